//! Seeded generator streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 generator whose seed
//! is derived from a root seed and a path of integer labels, e.g.
//! `(run seed, epoch, step, anchor)`. Derivation mixes the labels with
//! SplitMix64, so sibling streams are statistically independent and any stream
//! can be reconstructed without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A position in the stream tree. Cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(splitmix64(seed))
    }

    /// The child stream labelled `label`.
    pub fn child(self, label: u64) -> Self {
        SeedStream(splitmix64(self.0 ^ splitmix64(label.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    pub fn derive(self, labels: &[u64]) -> Self {
        labels.iter().fold(self, |s, &l| s.child(l))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn value(self) -> u64 {
        self.0
    }
}
