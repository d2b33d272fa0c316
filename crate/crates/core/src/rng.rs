//! Seeded random streams.
//!
//! All randomness derives from one 64-bit seed. A stream is keyed by a name
//! (`"data"`, `"init"`, `"noise"`, ...) and a counter, so any component can be
//! replayed in isolation and per-frame draws do not depend on call order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Float, Tensor};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    fnv1a_bytes(0xcbf2_9ce4_8422_2325, name.as_bytes())
}

fn fnv1a_bytes(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// FNV-1a over the bit patterns of a sequence of tensors (shapes included).
pub fn digest<'a, T: Float + 'a>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &d in t.shape() {
            h = fnv1a_bytes(h, &(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h = fnv1a_bytes(h, &x.to_f64_lossy().to_bits().to_le_bytes());
        }
    }
    h
}

/// Generator for `(seed, name, index)`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(fnv1a(name))));
    rng.set_stream(index);
    rng
}

pub fn normal<T: Float>(rng: &mut impl Rng) -> T {
    T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_tensor<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| normal(rng))
}
