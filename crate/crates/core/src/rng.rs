//! Counter-based RNG substreams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by
//! (master seed, module, session, epoch), so results do not depend on the
//! order in which independent work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Module {
    Data = 1,
    Init = 2,
    BaseNoise = 3,
    BaseShuffle = 4,
    Ball = 5,
    Split = 6,
    Probe = 7,
}

pub fn substream(master: u64, module: Module, session: u64, epoch: u64) -> ChaCha8Rng {
    assert!(session < 1 << 24 && epoch < 1 << 32, "substream counter overflow");
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((module as u64) << 56) | (session << 32) | epoch);
    rng
}
