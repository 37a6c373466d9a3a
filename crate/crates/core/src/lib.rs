//! In-context reinforcement learning with a single linear self-attention layer.
//!
//! The algebra (prompts, forward pass, output decomposition, teachers, the
//! optimal constructions) is generic over [`Scalar`], so identities can be
//! checked in `f32`, `f64` or exact rationals. Sampling, training and
//! evaluation run in `f64`; the aliases below name those instantiations.

pub mod attention;
pub mod error;
pub mod eval;
pub mod features;
pub mod linalg;
pub mod mdp;
pub mod prompt;
pub mod rng;
pub mod scalar;
pub mod task;
pub mod teachers;
pub mod theory;
pub mod training;

pub use attention::{
    attention_forward, decompose_output, grad_loss, grad_loss_ac, load_checkpoint, loss, readout, readout_ac,
    readout_sarsa, save_checkpoint, Block, CheckpointManifest, GradPair,
};
pub use error::{Error, Result};
pub use eval::{closed_loop_eval, mc_return, Agent, EvalConfig, EvalCurves};
pub use features::{FeatureKind, FeatureMap};
pub use linalg::Matrix;
pub use mdp::{MdpConfig, PolicySpec, TabularMdp, Trajectory};
pub use prompt::{BlockLayout, Mode, Prompt, TrajectoryStats};
pub use rng::{Rng, SeedStreams};
pub use scalar::{Exact, Real, Scalar};
pub use teachers::TeacherConfig;
pub use training::{train, train_ac, train_sarsa, RunReport, TrainConfig};

pub type AttentionParams = attention::AttentionParams<f64>;
pub type EffectiveParams = attention::EffectiveParams<f64>;
pub type OptimalConstruction = theory::OptimalConstruction<f64>;
pub type Features = features::FeatureMap<f64>;
pub type PromptF64 = prompt::Prompt<f64>;
pub type MatrixF64 = linalg::Matrix<f64>;
