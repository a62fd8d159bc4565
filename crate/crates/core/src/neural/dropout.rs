use rand::Rng;

use crate::scalar::Scalar;

/// Inverted dropout mask: kept units are scaled by `1/(1−rate)`, dropped
/// units are 0. All ones outside training or when `rate` is 0.
pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(
    dim: usize,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Vec<S> {
    if !training || rate <= 0.0 {
        return vec![S::one(); dim];
    }
    let keep = S::of(1.0 / (1.0 - rate));
    (0..dim)
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask::<f64, _>(16, 0.0, &mut rng, true).iter().all(|&m| m == 1.0));
        assert!(dropout_mask::<f64, _>(16, 0.3, &mut rng, false).iter().all(|&m| m == 1.0));
    }

    #[test]
    fn mask_mean_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = dropout_mask::<f64, _>(100_000, 0.25, &mut rng, true);
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 4.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = dropout_mask::<f32, _>(64, 0.2, &mut ChaCha8Rng::seed_from_u64(9), true);
        let b = dropout_mask::<f32, _>(64, 0.2, &mut ChaCha8Rng::seed_from_u64(9), true);
        assert_eq!(a, b);
    }
}
