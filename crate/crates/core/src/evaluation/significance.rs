use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Two-sided paired permutation (sign-flip) test on the mean difference
/// `mean(a − b)`.
///
/// Returns `(1 + #{perm : |mean_perm| ≥ |mean_obs|}) / (1 + n_perm)`.
pub fn permutation_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "unpaired samples: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("permutation test needs at least one pair"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    // Sign flips that merely reorder the summation must still count as ties.
    let tol = 1e-12 * (1.0 + observed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        let s: f64 = diffs
            .iter()
            .map(|&d| if rng.gen::<bool>() { d } else { -d })
            .sum();
        if (s / n).abs() >= observed - tol {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + n_perm) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_samples() {
        let a = [0.2, 0.5, 0.9, 1.0];
        assert_eq!(permutation_test(&a, &a, 1000, 1).unwrap(), 1.0);
    }

    #[test]
    fn constant_shift() {
        let b: Vec<f64> = (0..100).map(|i| 0.5 + i as f64 / 400.0).collect();
        let a: Vec<f64> = b.iter().map(|x| x - 0.5).collect();
        let p = permutation_test(&a, &b, 10_000, 3).unwrap();
        assert!(p <= 2.0 / 10_000.0, "p = {p}");
    }

    #[test]
    fn noisy_shift_is_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(0.3..0.9)).collect();
        let a: Vec<f64> = b.iter().map(|x| x - 0.1 + noise.sample(&mut rng)).collect();
        assert!(permutation_test(&a, &b, 10_000, 5).unwrap() < 0.005);
    }

    #[test]
    fn null_is_not_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(0.3..0.9)).collect();
        let a: Vec<f64> = b.iter().map(|x| x + noise.sample(&mut rng)).collect();
        assert!(permutation_test(&a, &b, 2000, 5).unwrap() > 0.01);
    }

    #[test]
    fn deterministic_and_checks_pairing() {
        let a = [0.1, 0.4, 0.3];
        let b = [0.2, 0.1, 0.5];
        assert_eq!(
            permutation_test(&a, &b, 500, 9).unwrap(),
            permutation_test(&a, &b, 500, 9).unwrap()
        );
        assert!(permutation_test(&a, &b[..2], 10, 0).is_err());
    }
}
