//! Named, independent random streams derived from one master seed.
//!
//! Every consumer (MDP sampling, features, rollouts, initialisation,
//! evaluation) asks for its own stream by name and index, so changing how
//! many draws one component makes never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream `index` of the family `name`.
    pub fn stream(&self, name: &str, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(stream_id(name, index));
        rng
    }
}

/// FNV-1a over the name followed by the little-endian index.
fn stream_id(name: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    name.bytes()
        .chain([0xff])
        .chain(index.to_le_bytes())
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
