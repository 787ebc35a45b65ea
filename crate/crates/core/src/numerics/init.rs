use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mixes `parts` into `base` with the splitmix64 finalizer. Stable across platforms and
/// releases, unlike `std::hash`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A `[fan_out, fan_in]` matrix drawn uniformly from `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor> {
    xavier_shaped(&[fan_out, fan_in], fan_in, fan_out, seed)
}

/// Xavier-uniform values for an arbitrary shape with explicit fans (e.g. convolution kernels).
pub fn xavier_shaped(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "xavier_init: fans must be positive (fan_in={fan_in}, fan_out={fan_out})"
        )));
    }
    let a = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| dist.sample(&mut rng)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_for_three_by_three_is_one() {
        assert!((xavier_bound(3, 3) - 1.0).abs() < 1e-15);
        let t = xavier_init(3, 3, 11).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn derived_seeds_differ_by_part_and_order() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = xavier_init(17, 5, 42).unwrap();
        let b = xavier_init(17, 5, 42).unwrap();
        let c = xavier_init(17, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), &[5, 17]);
    }

    #[test]
    fn zero_fan_is_rejected() {
        assert!(matches!(
            xavier_init(0, 3, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            xavier_init(3, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empirical_variance_matches_glorot() {
        let (fi, fo) = (400, 300);
        let t = xavier_init(fi, fo, 9).unwrap();
        let n = t.len() as f64;
        assert!(n >= 1e5);
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (fi + fo) as f64;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs {expected}"
        );
        let a = xavier_bound(fi, fo);
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }
}
