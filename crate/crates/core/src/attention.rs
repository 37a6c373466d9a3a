//! One-layer linear self-attention: forward pass, readouts, the closed-form
//! output decomposition over the effective blocks, and hand-derived gradients
//! of the mimicry loss.

use std::fs;
use std::ops::{Index, IndexMut, Range};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::prompt::{BlockLayout, Mode, Prompt, TrajectoryStats};
use crate::scalar::Scalar;

/// Named sub-blocks of `P` and `V`.
///
/// `V21Bar`/`V22Bar` are the readout rows of `V21`/`V22`, i.e. the bottom block
/// without its leading constant row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    P11,
    P12,
    P21,
    P22,
    V11,
    V12,
    V21,
    V22,
    V21Bar,
    V22Bar,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::P11,
        Block::P12,
        Block::P21,
        Block::P22,
        Block::V11,
        Block::V12,
        Block::V21,
        Block::V22,
        Block::V21Bar,
        Block::V22Bar,
    ];

    pub fn is_p(self) -> bool {
        matches!(self, Block::P11 | Block::P12 | Block::P21 | Block::P22)
    }

    pub fn ranges(self, layout: &BlockLayout) -> (Range<usize>, Range<usize>) {
        let (t, dim) = (layout.top(), layout.dim());
        let top = 0..t;
        let bot = t..dim;
        let bar = t + 1..dim;
        match self {
            Block::P11 | Block::V11 => (top.clone(), top),
            Block::P12 | Block::V12 => (top, bot),
            Block::P21 | Block::V21 => (bot, top),
            Block::P22 | Block::V22 => (bot.clone(), bot),
            Block::V21Bar => (bar, top),
            Block::V22Bar => (bar, bot),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T> {
    layout: BlockLayout,
    p: Matrix<T>,
    v: Matrix<T>,
}

/// `(P12, V̄21)`, the only blocks that matter once `P22 = 0` and `V̄22 = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams<T> {
    pub p12: Matrix<T>,
    pub v21_bar: Matrix<T>,
}

impl<T: Scalar> EffectiveParams<T> {
    pub fn zeros(layout: &BlockLayout) -> Self {
        Self {
            p12: Matrix::zeros(layout.top(), layout.bottom()),
            v21_bar: Matrix::zeros(layout.readout_len(), layout.top()),
        }
    }

    pub fn check(&self, layout: &BlockLayout) -> Result<()> {
        if self.p12.shape() != (layout.top(), layout.bottom()) || self.v21_bar.shape() != (layout.readout_len(), layout.top()) {
            return Err(contract(format!(
                "effective shapes {:?}/{:?} do not match layout {layout:?}",
                self.p12.shape(),
                self.v21_bar.shape()
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: &T) -> Self {
        let inv = T::one() / c.clone();
        Self { p12: self.p12.scale(c), v21_bar: self.v21_bar.scale(&inv) }
    }

    pub fn frob_dot(&self, rhs: &Self) -> T {
        self.p12.frob_dot(&rhs.p12) + self.v21_bar.frob_dot(&rhs.v21_bar)
    }

    pub fn norm_sq(&self) -> T {
        self.frob_dot(self)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        Self { p12: self.p12.sub(&rhs.p12), v21_bar: self.v21_bar.sub(&rhs.v21_bar) }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        Self { p12: self.p12.add(&rhs.p12), v21_bar: self.v21_bar.add(&rhs.v21_bar) }
    }

    pub fn scale(&self, c: &T) -> Self {
        Self { p12: self.p12.scale(c), v21_bar: self.v21_bar.scale(c) }
    }

    /// Flattened `(vec P12, vec V̄21)`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.p12.as_slice().to_vec();
        out.extend_from_slice(self.v21_bar.as_slice());
        out
    }

    pub fn from_flat(layout: &BlockLayout, flat: &[T]) -> Result<Self> {
        let np = layout.top() * layout.bottom();
        if flat.len() != np + layout.readout_len() * layout.top() {
            return Err(contract("flat effective vector has the wrong length"));
        }
        Ok(Self {
            p12: Matrix::from_vec(layout.top(), layout.bottom(), flat[..np].to_vec()),
            v21_bar: Matrix::from_vec(layout.readout_len(), layout.top(), flat[np..].to_vec()),
        })
    }

    pub fn cast<U: Scalar>(&self) -> EffectiveParams<U> {
        EffectiveParams { p12: self.p12.cast(), v21_bar: self.v21_bar.cast() }
    }
}

/// Gradient of the mimicry loss with respect to the trained blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair<T> {
    pub d_p12: Matrix<T>,
    pub d_v21_bar: Matrix<T>,
    pub d_p22: Option<Matrix<T>>,
    pub d_v22_bar: Option<Matrix<T>>,
}

/// Mutable view into a block of `P` or `V`; writes go to the parent matrix.
pub struct BlockViewMut<'a, T> {
    parent: &'a mut Matrix<T>,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
}

impl<T: Scalar> BlockViewMut<'_, T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn fill_from(&mut self, src: &Matrix<T>) {
        assert_eq!(src.shape(), self.shape(), "block shape");
        self.parent.set_block(self.r0, self.c0, src);
    }

    pub fn for_each(&mut self, mut f: impl FnMut(usize, usize, &mut T)) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                f(i, j, &mut self.parent[(self.r0 + i, self.c0 + j)]);
            }
        }
    }
}

impl<T> Index<(usize, usize)> for BlockViewMut<'_, T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        assert!(i < self.rows && j < self.cols, "block index out of range");
        &self.parent[(self.r0 + i, self.c0 + j)]
    }
}

impl<T> IndexMut<(usize, usize)> for BlockViewMut<'_, T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        assert!(i < self.rows && j < self.cols, "block index out of range");
        &mut self.parent[(self.r0 + i, self.c0 + j)]
    }
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(layout: BlockLayout) -> Self {
        let n = layout.dim();
        Self { layout, p: Matrix::zeros(n, n), v: Matrix::zeros(n, n) }
    }

    pub fn new(layout: BlockLayout, p: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        layout.validate()?;
        let n = layout.dim();
        if p.shape() != (n, n) || v.shape() != (n, n) {
            return Err(contract(format!("P {:?} and V {:?} must both be {n}×{n}", p.shape(), v.shape())));
        }
        Ok(Self { layout, p, v })
    }

    /// Full parameters holding the given blocks and zeros elsewhere.
    pub fn from_blocks(
        layout: BlockLayout,
        eff: &EffectiveParams<T>,
        p22: Option<&Matrix<T>>,
        v22_bar: Option<&Matrix<T>>,
    ) -> Result<Self> {
        layout.validate()?;
        eff.check(&layout)?;
        let mut out = Self::zeros(layout);
        out.set_block(Block::P12, &eff.p12)?;
        out.set_block(Block::V21Bar, &eff.v21_bar)?;
        if let Some(m) = p22 {
            out.set_block(Block::P22, m)?;
        }
        if let Some(m) = v22_bar {
            out.set_block(Block::V22Bar, m)?;
        }
        Ok(out)
    }

    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn p(&self) -> &Matrix<T> {
        &self.p
    }

    pub fn v(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn p_mut(&mut self) -> &mut Matrix<T> {
        &mut self.p
    }

    pub fn v_mut(&mut self) -> &mut Matrix<T> {
        &mut self.v
    }

    pub fn block(&self, b: Block) -> Matrix<T> {
        let (r, c) = b.ranges(&self.layout);
        if b.is_p() { self.p.block(r, c) } else { self.v.block(r, c) }
    }

    pub fn block_mut(&mut self, b: Block) -> BlockViewMut<'_, T> {
        let (r, c) = b.ranges(&self.layout);
        let parent = if b.is_p() { &mut self.p } else { &mut self.v };
        BlockViewMut { parent, r0: r.start, c0: c.start, rows: r.len(), cols: c.len() }
    }

    pub fn set_block(&mut self, b: Block, src: &Matrix<T>) -> Result<()> {
        let mut view = self.block_mut(b);
        if view.shape() != src.shape() {
            return Err(contract(format!("{b:?} is {:?}, got {:?}", view.shape(), src.shape())));
        }
        view.fill_from(src);
        Ok(())
    }

    pub fn effective(&self) -> EffectiveParams<T> {
        EffectiveParams { p12: self.block(Block::P12), v21_bar: self.block(Block::V21Bar) }
    }

    pub fn set_effective(&mut self, eff: &EffectiveParams<T>) -> Result<()> {
        self.set_block(Block::P12, &eff.p12)?;
        self.set_block(Block::V21Bar, &eff.v21_bar)
    }

    /// `(cP, c⁻¹V)`.
    pub fn scaled(&self, c: &T) -> Self {
        let inv = T::one() / c.clone();
        Self { layout: self.layout, p: self.p.scale(c), v: self.v.scale(&inv) }
    }

    pub fn cast<U: Scalar>(&self) -> AttentionParams<U> {
        AttentionParams { layout: self.layout, p: self.p.cast(), v: self.v.cast() }
    }

    fn check_prompt(&self, prompt: &Prompt<T>) -> Result<()> {
        if prompt.layout() != self.layout {
            return Err(contract(format!(
                "prompt layout {:?} does not match parameter layout {:?}",
                prompt.layout(),
                self.layout
            )));
        }
        Ok(())
    }
}

impl AttentionParams<f64> {
    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.v.is_finite()
    }
}

/// `H + (1/n)(VH)(HᵀPH)`.
pub fn attention_forward<T: Scalar>(params: &AttentionParams<T>, prompt: &Prompt<T>) -> Result<Matrix<T>> {
    params.check_prompt(prompt)?;
    let h = prompt.matrix();
    let vh = params.v.matmul(h);
    let hph = h.transpose().matmul(&params.p.matmul(h));
    let inv_n = T::one() / T::from_usize_lit(prompt.n());
    Ok(h.add(&vh.matmul(&hph).scale(&inv_n)))
}

/// Last `len` entries of the final output column, computed as
/// `h + (1/n) V H Hᵀ P h` with `h` the last prompt column.
fn final_column_tail<T: Scalar>(params: &AttentionParams<T>, prompt: &Prompt<T>) -> Vec<T> {
    let h = prompt.matrix();
    let last = h.col(prompt.n());
    let ph = params.p.matvec(&last);
    let u = h.matvec(&h.tr_matvec(&ph));
    let dim = params.dim();
    let start = dim - params.layout.readout_len();
    let inv_n = T::one() / T::from_usize_lit(prompt.n());
    (start..dim)
        .map(|r| last[r].clone() + inv_n.clone() * dot(params.v.row(r), &u))
        .collect()
}

pub fn readout_sarsa<T: Scalar>(params: &AttentionParams<T>, prompt: &Prompt<T>) -> Result<Vec<T>> {
    params.check_prompt(prompt)?;
    if prompt.mode() != Mode::Sarsa {
        return Err(contract("readout_sarsa needs a SARSA prompt"));
    }
    Ok(final_column_tail(params, prompt))
}

/// Returns `(λ_out, w_out)`.
pub fn readout_ac<T: Scalar>(params: &AttentionParams<T>, prompt: &Prompt<T>) -> Result<(Vec<T>, Vec<T>)> {
    params.check_prompt(prompt)?;
    if prompt.mode() != Mode::ActorCritic {
        return Err(contract("readout_ac needs an actor-critic prompt"));
    }
    let mut tail = final_column_tail(params, prompt);
    let w = tail.split_off(params.layout.m);
    Ok((tail, w))
}

/// Mode-agnostic readout; `(λ; w)` concatenated in actor-critic mode.
pub fn readout<T: Scalar>(params: &AttentionParams<T>, prompt: &Prompt<T>) -> Result<Vec<T>> {
    params.check_prompt(prompt)?;
    Ok(final_column_tail(params, prompt))
}

/// `base + V̄21 Σ̂ P12 w̃ + (1/n) V̄22 w̃ w̃ᵀ P22 w̃` with `base = w̃[1..]`.
pub fn decompose_parts<T: Scalar>(
    eff: &EffectiveParams<T>,
    sigma_hat: &Matrix<T>,
    w_tilde: &[T],
    n: usize,
    p22: Option<&Matrix<T>>,
    v22_bar: Option<&Matrix<T>>,
) -> Vec<T> {
    let z = sigma_hat.matvec(&eff.p12.matvec(w_tilde));
    let mut out = w_tilde[1..].to_vec();
    for (o, x) in out.iter_mut().zip(eff.v21_bar.matvec(&z)) {
        *o = o.clone() + x;
    }
    if let (Some(p22), Some(v22)) = (p22, v22_bar) {
        let q = dot(w_tilde, &p22.matvec(w_tilde)) / T::from_usize_lit(n);
        for (o, x) in out.iter_mut().zip(v22.matvec(w_tilde)) {
            *o = o.clone() + q.clone() * x;
        }
    }
    out
}

fn sarsa_w_tilde<T: Scalar>(w: &[T]) -> Vec<T> {
    let mut wt = Vec::with_capacity(w.len() + 1);
    wt.push(T::one());
    wt.extend_from_slice(w);
    wt
}

pub fn decompose_output<T: Scalar>(
    eff: &EffectiveParams<T>,
    stats: &TrajectoryStats<T>,
    w: &[T],
    p22: Option<&Matrix<T>>,
    v22_bar: Option<&Matrix<T>>,
) -> Vec<T> {
    decompose_parts(eff, &stats.sigma_hat, &sarsa_w_tilde(w), stats.n, p22, v22_bar)
}

/// `½‖prediction − target‖²`.
pub fn loss<T: Scalar>(prediction: &[T], target: &[T]) -> T {
    assert_eq!(prediction.len(), target.len(), "loss dimensions");
    let half = T::one() / (T::one() + T::one());
    let s = prediction
        .iter()
        .zip(target)
        .fold(T::zero(), |acc, (p, t)| acc + (p.clone() - t.clone()) * (p.clone() - t.clone()));
    half * s
}

/// Gradient and loss over the effective (and optionally the quadratic) blocks.
pub fn grad_parts<T: Scalar>(
    eff: &EffectiveParams<T>,
    sigma_hat: &Matrix<T>,
    w_tilde: &[T],
    n: usize,
    p22: Option<&Matrix<T>>,
    v22_bar: Option<&Matrix<T>>,
    target: &[T],
) -> (GradPair<T>, T) {
    let pred = decompose_parts(eff, sigma_hat, w_tilde, n, p22, v22_bar);
    let e: Vec<T> = pred.iter().zip(target).map(|(p, t)| p.clone() - t.clone()).collect();
    let l = loss(&pred, target);
    let z = sigma_hat.matvec(&eff.p12.matvec(w_tilde));
    let mut d_v21_bar = Matrix::zeros(eff.v21_bar.rows(), eff.v21_bar.cols());
    d_v21_bar.add_outer(&T::one(), &e, &z);
    let u = sigma_hat.tr_matvec(&eff.v21_bar.tr_matvec(&e));
    let mut d_p12 = Matrix::zeros(eff.p12.rows(), eff.p12.cols());
    d_p12.add_outer(&T::one(), &u, w_tilde);
    let (d_p22, d_v22_bar) = match (p22, v22_bar) {
        (Some(p22), Some(v22)) => {
            let inv_n = T::one() / T::from_usize_lit(n);
            let q = dot(w_tilde, &p22.matvec(w_tilde));
            let mut dv = Matrix::zeros(v22.rows(), v22.cols());
            dv.add_outer(&(inv_n.clone() * q), &e, w_tilde);
            let s = dot(&e, &v22.matvec(w_tilde));
            let mut dp = Matrix::zeros(p22.rows(), p22.cols());
            dp.add_outer(&(inv_n * s), w_tilde, w_tilde);
            (Some(dp), Some(dv))
        }
        _ => (None, None),
    };
    (GradPair { d_p12, d_v21_bar, d_p22, d_v22_bar }, l)
}

pub fn grad_loss<T: Scalar>(
    eff: &EffectiveParams<T>,
    stats: &TrajectoryStats<T>,
    w: &[T],
    target: &[T],
    full: Option<(&Matrix<T>, &Matrix<T>)>,
) -> GradPair<T> {
    let (p22, v22) = full.map_or((None, None), |(p, v)| (Some(p), Some(v)));
    grad_parts(eff, &stats.sigma_hat, &sarsa_w_tilde(w), stats.n, p22, v22, target).0
}

/// Actor-critic gradient; `target` is `(λ_AC; w_AC)` and `prompt` supplies `Σ̂` and `w̃`.
pub fn grad_loss_ac<T: Scalar>(
    eff: &EffectiveParams<T>,
    prompt: &Prompt<T>,
    target: &[T],
    full: Option<(&Matrix<T>, &Matrix<T>)>,
) -> Result<GradPair<T>> {
    if prompt.mode() != Mode::ActorCritic {
        return Err(contract("grad_loss_ac needs an actor-critic prompt"));
    }
    eff.check(&prompt.layout())?;
    let (p22, v22) = full.map_or((None, None), |(p, v)| (Some(p), Some(v)));
    Ok(grad_parts(eff, &prompt.sigma_hat(), &prompt.w_tilde(), prompt.n(), p22, v22, target).0)
}

/// Gradient of `½‖readout − target‖²` with respect to all of `P` and `V`,
/// together with the loss.
pub fn grad_full<T: Scalar>(
    params: &AttentionParams<T>,
    prompt: &Prompt<T>,
    target: &[T],
) -> Result<(Matrix<T>, Matrix<T>, T)> {
    params.check_prompt(prompt)?;
    let layout = params.layout;
    if target.len() != layout.readout_len() {
        return Err(contract("target length does not match the readout"));
    }
    let h = prompt.matrix();
    let last = h.col(prompt.n());
    let dim = layout.dim();
    let start = dim - layout.readout_len();
    let inv_n = T::one() / T::from_usize_lit(prompt.n());
    // u = H Hᵀ P h; readout = h_tail + (1/n) V_tail u
    let u = h.matvec(&h.tr_matvec(&params.p.matvec(&last)));
    let pred: Vec<T> = (start..dim)
        .map(|r| last[r].clone() + inv_n.clone() * dot(params.v.row(r), &u))
        .collect();
    let l = loss(&pred, target);
    let mut e_full = vec![T::zero(); dim];
    for (k, (p, t)) in pred.iter().zip(target).enumerate() {
        e_full[start + k] = p.clone() - t.clone();
    }
    let mut dv = Matrix::zeros(dim, dim);
    dv.add_outer(&inv_n, &e_full, &u);
    let g = h.matvec(&h.tr_matvec(&params.v.tr_matvec(&e_full)));
    let mut dp = Matrix::zeros(dim, dim);
    dp.add_outer(&inv_n, &g, &last);
    Ok((dp, dv, l))
}

/// Sidecar metadata written next to a binary checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    #[serde(rename = "D")]
    pub dim: usize,
    pub d: usize,
    pub m: usize,
    pub mode: Mode,
    pub step: usize,
    pub seed: u64,
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `P` then `V` as row-major little-endian `f64` to `bin`, and the
/// manifest to the same path with a `.json` extension.
pub fn save_checkpoint(params: &AttentionParams<f64>, bin: &Path, step: usize, seed: u64) -> Result<CheckpointManifest> {
    let mut bytes = Vec::with_capacity(16 * params.dim() * params.dim());
    for x in params.p.as_slice().iter().chain(params.v.as_slice()) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(parent) = bin.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(bin, bytes)?;
    let layout = params.layout;
    let manifest = CheckpointManifest { dim: layout.dim(), d: layout.d, m: layout.m, mode: layout.mode, step, seed };
    fs::write(manifest_path(bin), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(bin: &Path) -> Result<(AttentionParams<f64>, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(bin))?)?;
    let layout = BlockLayout { mode: manifest.mode, d: manifest.d, m: manifest.m };
    layout.validate().map_err(|_| Error::Config(format!("checkpoint manifest has an invalid layout {layout:?}")))?;
    if layout.dim() != manifest.dim {
        return Err(Error::Config(format!("manifest D={} disagrees with d={}, m={}", manifest.dim, manifest.d, manifest.m)));
    }
    let bytes = fs::read(bin)?;
    let n = manifest.dim * manifest.dim;
    if bytes.len() != 16 * n {
        return Err(Error::Config(format!("checkpoint has {} bytes, expected {}", bytes.len(), 16 * n)));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let p = Matrix::from_vec(manifest.dim, manifest.dim, vals[..n].to_vec());
    let v = Matrix::from_vec(manifest.dim, manifest.dim, vals[n..].to_vec());
    Ok((AttentionParams::new(layout, p, v)?, manifest))
}
