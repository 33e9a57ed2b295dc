//! Seeded generators. Each parameter gets its own stream derived from the
//! global seed and its name, so initial values never depend on creation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Tensor with entries drawn from `U(-bound, bound)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}
