//! Seeded random helpers. Everything in the kit that needs randomness takes
//! an explicit seed or rng so runs are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{lit, Scalar, Shape, Tensor};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1), seeded.
pub fn rand_tensor<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = seeded(seed);
    let data = (0..shape.numel())
        .map(|_| lit::<T>(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape, data).expect("length by construction")
}

pub fn rand_vec<T: Scalar>(len: usize, seed: u64) -> Vec<T> {
    let mut rng = seeded(seed);
    (0..len).map(|_| lit::<T>(rng.gen_range(-1.0..1.0))).collect()
}

/// Zero-mean Gaussian samples with the given standard deviation.
pub fn randn_fill<T: Scalar, R: Rng>(data: &mut [T], sigma: f64, rng: &mut R) {
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    for v in data.iter_mut() {
        *v = lit::<T>(normal.sample(rng));
    }
}
