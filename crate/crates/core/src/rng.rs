//! Counter-based random streams.
//!
//! Every sample in a run is drawn from a ChaCha stream keyed by
//! `(seed, stream, step, lane)`, so any sample can be regenerated without
//! replaying the run and adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Query = 1,
    Network = 2,
    Outcome = 3,
    Gate = 4,
    Policy = 5,
}

pub fn stream_rng(seed: u64, stream: Stream, step: u64, lane: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key
        .chunks_exact_mut(8)
        .zip([seed, stream as u64, step, lane])
    {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(7, Stream::Query, 3, 1).random();
        let b: u64 = stream_rng(7, Stream::Query, 3, 1).random();
        let c: u64 = stream_rng(7, Stream::Query, 3, 2).random();
        let d: u64 = stream_rng(7, Stream::Outcome, 3, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
