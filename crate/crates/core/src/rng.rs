use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent RNG streams derived from one experiment seed, so that adding
/// draws in one subsystem never shifts another's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    ServerInit = 3,
    PartyInit = 4,
    Shuffle = 5,
    Jitter = 6,
    Resize = 7,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index);
    rng
}
