//! Truncated stick-breaking weights shared by the residual and trajectory mixtures.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::ar::ArParams;
use crate::error::{Error, Result};

/// `L` atoms with weights `w_l = s_l * prod_{j<l} (1 - s_j)`; the last weight
/// takes the remainder so the weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sticks<A> {
    sticks: Vec<f64>,
    weights: Vec<f64>,
    atoms: Vec<A>,
}

/// Stick-breaking representation of the residual distribution over `(phi, v)`.
pub type StickState = Sticks<ArParams>;

pub fn weights_from_sticks(sticks: &[f64]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(sticks.len() + 1);
    let mut rest = 1.0;
    for &s in sticks {
        weights.push(s * rest);
        rest *= 1.0 - s;
    }
    weights.push(rest);
    weights
}

fn beta_draw<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    // Beta::new only fails for non-positive parameters, which callers exclude.
    Beta::new(a, b).expect("positive beta parameters").sample(rng)
}

impl<A> Sticks<A> {
    pub fn from_parts(sticks: Vec<f64>, atoms: Vec<A>) -> Result<Self> {
        if atoms.len() < 2 {
            return Err(Error::invalid("stick-breaking truncation must be at least 2"));
        }
        if sticks.len() + 1 != atoms.len() {
            return Err(Error::invalid(format!(
                "{} sticks for {} atoms; need one fewer stick than atoms",
                sticks.len(),
                atoms.len()
            )));
        }
        if sticks.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("stick fractions must lie in [0, 1]"));
        }
        let weights = weights_from_sticks(&sticks);
        Ok(Self {
            sticks,
            weights,
            atoms,
        })
    }

    /// Sticks drawn from Beta(1, concentration).
    pub fn from_prior<R: Rng + ?Sized>(concentration: f64, atoms: Vec<A>, rng: &mut R) -> Result<Self> {
        if !(concentration.is_finite() && concentration > 0.0) {
            return Err(Error::domain(format!("concentration must be positive, got {concentration}")));
        }
        let sticks = (1..atoms.len())
            .map(|_| beta_draw(1.0, concentration, rng))
            .collect();
        Self::from_parts(sticks, atoms)
    }

    /// Conjugate update: `s_l ~ Beta(1 + n_l, concentration + sum_{j>l} n_j)`.
    pub fn update_sticks<R: Rng + ?Sized>(&mut self, counts: &[usize], concentration: f64, rng: &mut R) {
        debug_assert_eq!(counts.len(), self.atoms.len());
        let mut tail: usize = counts.iter().sum();
        for (l, s) in self.sticks.iter_mut().enumerate() {
            tail -= counts[l];
            *s = beta_draw(1.0 + counts[l] as f64, concentration + tail as f64, rng);
        }
        self.weights = weights_from_sticks(&self.sticks);
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn sticks(&self) -> &[f64] {
        &self.sticks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> &[A] {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut [A] {
        &mut self.atoms
    }

    /// Index of atoms sorted by decreasing weight.
    pub fn order_by_weight(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        idx
    }
}

pub fn counts(assignments: impl IntoIterator<Item = usize>, len: usize) -> Vec<usize> {
    let mut c = vec![0usize; len];
    for a in assignments {
        c[a] += 1;
    }
    c
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Draw an index with probability proportional to `exp(log_weights)`.
/// Returns `None` when no entry has finite positive mass.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Option<usize> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let total: f64 = log_weights.iter().map(|x| (x - m).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, x) in log_weights.iter().enumerate() {
        let w = (x - m).exp();
        if w > 0.0 {
            last = Some(i);
            if u < w {
                return Some(i);
            }
            u -= w;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn weights_sum_to_one() {
        let mut rng = rng_from(1);
        for alpha in [0.01, 1.0, 50.0, 1e4] {
            let s = Sticks::from_prior(alpha, vec![(); 60], &mut rng).unwrap();
            let total: f64 = s.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn large_concentration_spreads_mass() {
        let mut rng = rng_from(2);
        // Beta(1, alpha) sticks are O(1/alpha): no leading atom dominates.
        let s = Sticks::from_prior(1e6, vec![(); 10], &mut rng).unwrap();
        for w in &s.weights()[..9] {
            assert!(*w > 0.0 && *w < 1e-5);
        }
    }

    #[test]
    fn stick_update_follows_counts() {
        let mut rng = rng_from(3);
        let mut s = Sticks::from_prior(1.0, vec![(); 3], &mut rng).unwrap();
        s.update_sticks(&[1000, 0, 0], 1.0, &mut rng);
        assert!(s.weights()[0] > 0.98);
        assert_eq!(s.order_by_weight()[0], 0);
    }

    #[test]
    fn shape_checks() {
        assert!(Sticks::from_parts(vec![0.5], vec![(); 3]).is_err());
        assert!(Sticks::from_parts(vec![1.5], vec![(); 2]).is_err());
        assert!(Sticks::<()>::from_parts(vec![], vec![(); 1]).is_err());
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = rng_from(4);
        let lw = [0.2f64.ln(), f64::NEG_INFINITY, 0.8f64.ln()];
        let n = 100_000;
        let mut hits = [0usize; 3];
        for _ in 0..n {
            hits[sample_log_categorical(&lw, &mut rng).unwrap()] += 1;
        }
        assert_eq!(hits[1], 0);
        assert!((hits[0] as f64 / n as f64 - 0.2).abs() < 0.01);
        assert_eq!(sample_log_categorical(&[f64::NEG_INFINITY; 2], &mut rng), None);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
