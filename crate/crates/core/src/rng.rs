//! Deterministic random streams. Every stochastic routine takes one of these
//! explicitly; nothing in the crate touches a global generator.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::video::VideoTensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal video of the given shape.
pub fn normal_video(rng: &mut impl Rng, shape: [usize; 4]) -> VideoTensor {
    let data = Array4::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
    VideoTensor::new(data).expect("non-empty shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = {
            let mut r = seeded_rng(0);
            (0..100).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = seeded_rng(0);
            (0..100).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_different_stream() {
        let mut r0 = seeded_rng(0);
        let mut r1 = seeded_rng(1);
        let a: Vec<u64> = (0..100).map(|_| r0.random()).collect();
        let b: Vec<u64> = (0..100).map(|_| r1.random()).collect();
        assert_ne!(a, b);
    }
}
