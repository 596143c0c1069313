//! Named, seed-derived random streams.
//!
//! Every source of randomness in a run is a ChaCha stream keyed by the run
//! seed and a fixed stream id, so changing how one consumer draws numbers
//! never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env,
    Agent,
    Init,
    Eval,
    Verify,
    SysId,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::Agent => 2,
            Stream::Init => 3,
            Stream::Eval => 4,
            Stream::Verify => 5,
            Stream::SysId => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
