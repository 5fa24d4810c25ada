//! Counter-based seed splitting: one root seed fans out to decoupled,
//! reproducible per-purpose RNG streams.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Derive independent seeds from `(root, domain, index)` with a SplitMix64
/// finalizer over a simple domain hash.
#[derive(Debug, Clone, Copy)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn seed(&self, domain: &str, index: u64) -> u64 {
        let mut h = self.root ^ 0x9e3779b97f4a7c15;
        for &b in domain.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        h ^= index.wrapping_mul(0xd1342543de82ef95);
        splitmix64(h)
    }

    pub fn rng(&self, domain: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(domain, index))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = SeedSplitter::new(42);
        let b = SeedSplitter::new(42);
        assert_eq!(a.seed("scene", 3), b.seed("scene", 3));
        assert_ne!(a.seed("scene", 3), a.seed("scene", 4));
        assert_ne!(a.seed("scene", 3), a.seed("gaze", 3));
        assert_ne!(SeedSplitter::new(43).seed("scene", 3), a.seed("scene", 3));
    }
}
