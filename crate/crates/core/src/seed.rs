//! Deterministic random streams. Every run draws all randomness from one
//! seed; each phase reads its own ChaCha stream so that changing how much
//! randomness one phase consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Pretrain = 3,
    Em = 4,
    Joint = 5,
    Synthetic = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
