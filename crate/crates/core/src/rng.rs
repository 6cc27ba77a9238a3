//! Seed derivation. Every source of randomness gets its own stream derived
//! from the master seed, so that switching one component on or off never
//! shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent concerns that draw random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    ExpertInit = 2,
    TrainNegatives = 3,
    Shuffle = 4,
    Gumbel = 5,
    RrdSampling = 6,
    EvalPool = 7,
    CdSampling = 8,
    RdDynamic = 9,
    Synthetic = 10,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a master seed with a stream tag and any number of indices
/// (user id, epoch, repeat, ...).
pub fn derive_seed(master: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &ix in indices {
        h = splitmix64(h ^ splitmix64(ix.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(master: u64, stream: Stream, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = derive_seed(7, Stream::Gumbel, &[1, 2]);
        assert_eq!(a, derive_seed(7, Stream::Gumbel, &[1, 2]));
        assert_ne!(a, derive_seed(7, Stream::RrdSampling, &[1, 2]));
        assert_ne!(a, derive_seed(7, Stream::Gumbel, &[2, 1]));
        assert_ne!(a, derive_seed(8, Stream::Gumbel, &[1, 2]));

        let mut r1 = stream_rng(3, Stream::Init, &[]);
        let mut r2 = stream_rng(3, Stream::Init, &[]);
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }
}
