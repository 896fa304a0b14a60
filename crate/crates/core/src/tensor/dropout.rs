use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter-based dropout stream identifier.
///
/// A key names one training context (seed, epoch, batch, slot in batch);
/// every dropout site inside a forward pass draws its own ChaCha stream from
/// the key plus a site counter, so masks depend only on those coordinates and
/// never on thread scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    seed: u64,
    context: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, epoch: u64, batch: u64, slot: u64) -> Self {
        let context = mix(mix(mix(epoch) ^ batch.rotate_left(21)) ^ slot.rotate_left(42));
        DropoutKey { seed, context }
    }

    /// Keep/scale factors for `len` elements at dropout site `site`.
    pub(crate) fn mask(&self, site: u64, len: usize, p: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.context);
        rng.set_stream(site);
        let keep = 1.0 / (1.0 - p);
        (0..len)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
