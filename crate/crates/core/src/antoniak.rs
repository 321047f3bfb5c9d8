//! Expected number of occupied clusters under a Dirichlet process.

use crate::error::{Error, Result};

/// `E[k] = sum_{i=0}^{n-1} alpha / (alpha + i)` for `n` draws with concentration `alpha`.
pub fn expected_clusters(alpha: f64, n: usize) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain(format!("concentration must be positive, got {alpha}")));
    }
    if n == 0 {
        return Err(Error::domain("need at least one draw"));
    }
    Ok((0..n).map(|i| alpha / (alpha + i as f64)).sum())
}

/// Concentration whose expected cluster count over `n` draws equals `target_k`.
///
/// Bisection on `ln alpha`; `E[k]` is strictly increasing in `alpha`.
pub fn elicit_concentration(target_k: f64, n: usize) -> Result<f64> {
    if !(target_k > 1.0 && target_k < n as f64) {
        return Err(Error::invalid(format!(
            "target cluster count must lie in (1, {n}), got {target_k}"
        )));
    }
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let k = expected_clusters(mid.exp(), n)?;
        if (k - target_k).abs() < 1e-10 {
            return Ok(mid.exp());
        }
        if k < target_k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Average cluster count over every set partition of `n` labelled items,
    /// weighted by the Chinese-restaurant-process probability
    /// `alpha^k prod (n_j - 1)! / prod_{i<n} (alpha + i)`.
    fn crp_enumeration(alpha: f64, n: usize) -> f64 {
        fn rec(sizes: &mut Vec<usize>, left: usize, alpha: f64, acc: &mut (f64, f64), norm: f64) {
            if left == 0 {
                let k = sizes.len() as f64;
                let fact = |m: usize| (1..m).map(|x| x as f64).product::<f64>();
                let p = alpha.powi(sizes.len() as i32) * sizes.iter().map(|&m| fact(m)).product::<f64>() / norm;
                acc.0 += p;
                acc.1 += p * k;
                return;
            }
            for j in 0..sizes.len() {
                sizes[j] += 1;
                rec(sizes, left - 1, alpha, acc, norm);
                sizes[j] -= 1;
            }
            sizes.push(1);
            rec(sizes, left - 1, alpha, acc, norm);
            sizes.pop();
        }
        let norm: f64 = (0..n).map(|i| alpha + i as f64).product();
        let mut acc = (0.0, 0.0);
        rec(&mut Vec::new(), n, alpha, &mut acc, norm);
        assert!((acc.0 - 1.0).abs() < 1e-12, "partition probabilities sum to {}", acc.0);
        acc.1
    }

    #[test]
    fn matches_partition_enumeration() {
        assert!((crp_enumeration(1.0, 3) - 11.0 / 6.0).abs() < 1e-14);
        assert!((expected_clusters(1.0, 3).unwrap() - 11.0 / 6.0).abs() < 1e-15);
        for n in 1..=7 {
            for alpha in [0.3, 1.0, 2.5, 9.0] {
                let brute = crp_enumeration(alpha, n);
                assert!((expected_clusters(alpha, n).unwrap() - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn limits_and_monotonicity() {
        assert_eq!(expected_clusters(3.7, 1).unwrap(), 1.0);
        assert!((expected_clusters(1e-12, 50).unwrap() - 1.0).abs() < 1e-9);
        assert!((expected_clusters(1e12, 50).unwrap() - 50.0).abs() < 1e-6);
        let mut last = 0.0;
        for a in [0.1, 0.5, 1.0, 4.0, 20.0] {
            let k = expected_clusters(a, 100).unwrap();
            assert!(k > last);
            last = k;
        }
        assert!(expected_clusters(1.0, 101).unwrap() > expected_clusters(1.0, 100).unwrap());
        assert!(expected_clusters(0.0, 3).is_err());
        assert!(expected_clusters(1.0, 0).is_err());
    }

    #[test]
    fn inversion_round_trips() {
        let target = expected_clusters(2.0, 100).unwrap();
        assert!((elicit_concentration(target, 100).unwrap() - 2.0).abs() < 1e-6);

        let alpha = elicit_concentration(1.0 + 1e-9, 100).unwrap();
        assert!(alpha < 1e-8);

        let n = 5498;
        let elicited = 10.0 / (n as f64).ln();
        let k = expected_clusters(elicited, n).unwrap();
        assert!((elicit_concentration(k, n).unwrap() - elicited).abs() < 1e-6);

        assert!(elicit_concentration(1.0, 10).is_err());
        assert!(elicit_concentration(10.0, 10).is_err());
    }
}
