//! Covariance matrix adaptation evolution strategy.
//!
//! A single [`EsState`] is a multivariate Gaussian search distribution
//! `N(mean, sigma² · cov)` plus the evolution paths and the strategy constants
//! derived from the dimension and the offspring count. Strategy constants
//! follow the standard (μ/μ_w, λ) defaults with positive log weights.
//!
//! The state is deliberately passive: callers sample, evaluate and rank
//! candidates themselves and hand the ranked list back to [`EsState::update`].
//! This lets the bilevel scheduler inject foreign solutions into the ranking
//! and mix distributions between tasks.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative eigenvalue floor used when repairing the covariance matrix.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Number of past means kept for fluctuation measurements.
pub const MEAN_HISTORY: usize = 3;

const MAX_RESAMPLES: usize = 10;

/// A sampled individual with its evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub vector: Vec<f64>,
    pub objective: f64,
    pub cv: f64,
}

/// Restriction of a search distribution to a subset of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub sigma: f64,
}

/// Strategy constants for a given dimension and offspring count.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    /// E‖N(0, I)‖.
    pub chi_n: f64,
}

impl Strategy {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let lambda = lambda.max(1);
        let mu = (lambda / 2).max(1);
        let (weights, mu_eff) = log_weights(mu);

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff))
            .min(1.0 - c_1)
            .max(0.0);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Self {
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Default offspring count `4 + ⌊3 ln n⌋`.
pub fn default_lambda(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

fn log_weights(mu: usize) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = (0..mu)
        .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    (weights, mu_eff)
}

/// Eigen-factorization `cov = B · diag(D²) · Bᵀ`.
#[derive(Debug, Clone)]
struct Factor {
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues.
    scales: DVector<f64>,
}

impl Factor {
    fn inv_sqrt_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut proj = self.basis.tr_mul(v);
        for (p, s) in proj.iter_mut().zip(self.scales.iter()) {
            *p /= s;
        }
        &self.basis * proj
    }
}

/// Symmetrize `cov` and clamp its spectrum at `EIGEN_FLOOR · trace`.
///
/// Returns the repaired matrix and its factorization. Fails only when the
/// trace is not a positive finite number.
fn repair(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, Factor)> {
    let sym = (cov + cov.transpose()) * 0.5;
    let trace = sym.trace();
    if !trace.is_finite() || trace <= 0.0 || sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let floor = EIGEN_FLOOR * trace;
    let eig = SymmetricEigen::new(sym.clone());
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let repaired = if eig.eigenvalues.iter().any(|&v| v < floor) {
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        (&rebuilt + rebuilt.transpose()) * 0.5
    } else {
        sym
    };
    Ok((
        repaired,
        Factor {
            basis: eig.eigenvectors,
            scales: clamped.map(f64::sqrt),
        },
    ))
}

/// One CMA-ES instance.
#[derive(Debug, Clone)]
pub struct EsState {
    dim: usize,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    strategy: Strategy,
    generation: usize,
    mean_history: VecDeque<Vec<f64>>,
    factor: Factor,
}

impl EsState {
    /// Fresh state with zero evolution paths and `mean0` as the only history entry.
    ///
    /// `cov0` must be symmetric positive definite; it is symmetrized before
    /// the check.
    pub fn new(dim: usize, mean0: &[f64], sigma0: f64, cov0: DMatrix<f64>, lambda: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("dimension"));
        }
        if mean0.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: mean0.len(),
            });
        }
        if cov0.nrows() != dim || cov0.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: cov0.nrows().max(cov0.ncols()),
            });
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma0 must be positive, got {sigma0}")));
        }
        let sym = (&cov0 + cov0.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite);
        }
        let (cov, factor) = repair(&sym)?;

        let mut mean_history = VecDeque::with_capacity(MEAN_HISTORY);
        mean_history.push_back(mean0.to_vec());
        Ok(Self {
            dim,
            mean: DVector::from_column_slice(mean0),
            sigma: sigma0,
            cov,
            path_sigma: DVector::zeros(dim),
            path_c: DVector::zeros(dim),
            strategy: Strategy::new(dim, lambda),
            generation: 0,
            mean_history,
            factor,
        })
    }

    /// Same as [`EsState::new`] with the default offspring count for `dim`.
    pub fn with_default_lambda(dim: usize, mean0: &[f64], sigma0: f64, cov0: DMatrix<f64>) -> Result<Self> {
        Self::new(dim, mean0, sigma0, cov0, default_lambda(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn path_sigma(&self) -> &[f64] {
        self.path_sigma.as_slice()
    }

    pub fn path_c(&self) -> &[f64] {
        self.path_c.as_slice()
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// The last (at most three) means, oldest first.
    pub fn mean_history(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.mean_history.iter().map(Vec::as_slice)
    }

    /// Eigenvalues of the current covariance matrix.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.factor.scales.iter().map(|s| s * s).collect()
    }

    /// Draws `count` vectors from `N(mean, sigma² · cov)`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.draw(rng)).collect()
    }

    /// Draws `count` vectors inside `bounds`, resampling out-of-box draws up to
    /// ten times before clamping.
    pub fn sample_within<R: Rng + ?Sized>(&self, count: usize, bounds: &[(f64, f64)], rng: &mut R) -> Vec<Vec<f64>> {
        debug_assert_eq!(bounds.len(), self.dim);
        (0..count)
            .map(|_| {
                let mut x = self.draw(rng);
                for _ in 0..MAX_RESAMPLES {
                    if inside(&x, bounds) {
                        return x;
                    }
                    x = self.draw(rng);
                }
                clamp(&mut x, bounds);
                x
            })
            .collect()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim,
            self.factor
                .scales
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal)),
        );
        let step = &self.factor.basis * z;
        self.mean
            .iter()
            .zip(step.iter())
            .map(|(m, d)| m + self.sigma * d)
            .collect()
    }

    /// One generation of mean, path, covariance and step-size adaptation.
    ///
    /// `ranked` is ordered best first. The first `μ = ⌊λ/2⌋` entries act as
    /// parents; when fewer are supplied the weights are truncated and
    /// renormalized.
    pub fn update(&mut self, ranked: &[Candidate]) -> Result<()> {
        if ranked.is_empty() {
            return Err(Error::Empty("ranked candidates"));
        }
        if let Some(bad) = ranked.iter().find(|c| c.vector.len() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: bad.vector.len(),
            });
        }

        let n = self.dim as f64;
        let s = &self.strategy;
        let parents = s.mu.min(ranked.len());
        let (weights, mu_eff) = if parents == s.mu {
            (s.weights.clone(), s.mu_eff)
        } else {
            let total: f64 = s.weights[..parents].iter().sum();
            let w: Vec<f64> = s.weights[..parents].iter().map(|w| w / total).collect();
            let eff = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
            (w, eff)
        };

        let steps: Vec<DVector<f64>> = ranked[..parents]
            .iter()
            .map(|c| (DVector::from_column_slice(&c.vector) - &self.mean) / self.sigma)
            .collect();
        let mut step_w = DVector::zeros(self.dim);
        for (w, y) in weights.iter().zip(&steps) {
            step_w.axpy(*w, y, 1.0);
        }

        self.mean.axpy(self.sigma, &step_w, 1.0);

        let whitened = self.factor.inv_sqrt_times(&step_w);
        self.path_sigma *= 1.0 - s.c_sigma;
        self.path_sigma
            .axpy((s.c_sigma * (2.0 - s.c_sigma) * mu_eff).sqrt(), &whitened, 1.0);

        let ps_norm = self.path_sigma.norm();
        let decay = 1.0 - (1.0 - s.c_sigma).powi(2 * (self.generation as i32 + 1));
        let h_sigma = ps_norm / decay.sqrt() < (1.4 + 2.0 / (n + 1.0)) * s.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };

        self.path_c *= 1.0 - s.c_c;
        self.path_c
            .axpy(h * (s.c_c * (2.0 - s.c_c) * mu_eff).sqrt(), &step_w, 1.0);

        let rank_one = &self.path_c * self.path_c.transpose();
        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in weights.iter().zip(&steps) {
            rank_mu.ger(*w, y, y, 1.0);
        }
        let keep = 1.0 - s.c_1 - s.c_mu + (1.0 - h) * s.c_1 * s.c_c * (2.0 - s.c_c);
        let cov = &self.cov * keep + rank_one * s.c_1 + rank_mu * s.c_mu;

        let exponent = ((s.c_sigma / s.d_sigma) * (ps_norm / s.chi_n - 1.0)).min(1.0);
        self.sigma = (self.sigma * exponent.exp()).clamp(f64::MIN_POSITIVE, f64::MAX);

        let (cov, factor) = repair(&cov)?;
        self.cov = cov;
        self.factor = factor;
        self.generation += 1;
        self.push_mean();
        Ok(())
    }

    fn push_mean(&mut self) {
        if self.mean_history.len() == MEAN_HISTORY {
            self.mean_history.pop_front();
        }
        self.mean_history.push_back(self.mean.as_slice().to_vec());
    }

    /// Mean sub-vector, principal sub-matrix and the unchanged step size
    /// over `coords` (zero-based, strictly increasing).
    pub fn marginal(&self, coords: &[usize]) -> Result<Marginal> {
        if coords.is_empty() {
            return Err(Error::Empty("coordinate set"));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::UnorderedCoords);
        }
        if let Some(&bad) = coords.iter().find(|&&c| c >= self.dim) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                dim: self.dim,
            });
        }
        let k = coords.len();
        Ok(Marginal {
            mean: coords.iter().map(|&c| self.mean[c]).collect(),
            cov: DMatrix::from_fn(k, k, |i, j| self.cov[(coords[i], coords[j])]),
            sigma: self.sigma,
        })
    }

    /// Replaces mean and covariance (e.g. after mixing with other tasks).
    /// Paths, step size and generation are kept.
    pub fn set_distribution(&mut self, mean: &[f64], cov: &DMatrix<f64>) -> Result<()> {
        if mean.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: mean.len(),
            });
        }
        if cov.nrows() != self.dim || cov.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: cov.nrows(),
            });
        }
        let (cov, factor) = repair(cov)?;
        self.mean = DVector::from_column_slice(mean);
        self.cov = cov;
        self.factor = factor;
        Ok(())
    }
}

fn inside(x: &[f64], bounds: &[(f64, f64)]) -> bool {
    x.iter().zip(bounds).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
}

/// Projects `x` onto the box.
pub fn clamp(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn fresh_state() {
        let s = EsState::new(2, &[0.0, 0.0], 0.5, DMatrix::identity(2, 2), 6).unwrap();
        assert_eq!(s.generation(), 0);
        assert!(s.path_sigma().iter().all(|&v| v == 0.0));
        assert!(s.path_c().iter().all(|&v| v == 0.0));
        assert_eq!(s.mean_history().len(), 1);
        assert_eq!(s.strategy().mu, 3);
    }

    #[test]
    fn dimension_mismatch() {
        let err = EsState::new(3, &[1.0, 2.0], 0.5, DMatrix::identity(3, 3), 6).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, actual: 2 }));
    }

    #[test]
    fn rejects_indefinite_cov() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        assert!(matches!(
            EsState::new(2, &[0.0, 0.0], 1.0, cov, 6),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn marginal_reads_sub_block() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let s = EsState::new(2, &[0.0, 0.0], 0.5, cov.clone(), 6).unwrap();
        let m = s.marginal(&[1]).unwrap();
        // oracle: direct sub-block extraction
        assert_eq!(m.cov[(0, 0)], cov[(1, 1)]);
        assert_eq!(m.sigma * m.sigma * m.cov[(0, 0)], 4.0 * 0.25);
    }

    #[test]
    fn marginal_identity_and_diagonal() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0]));
        let s = EsState::new(3, &[1.0, 2.0, 3.0], 0.7, cov, 6).unwrap();
        let full = s.marginal(&[0, 1, 2]).unwrap();
        assert_eq!(full.mean, s.mean());
        assert_eq!(&full.cov, s.cov());
        assert_eq!(full.sigma, s.sigma());

        let sub = s.marginal(&[1, 2]).unwrap();
        assert_eq!(sub.cov, DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0])));
        assert_eq!(sub.mean, vec![2.0, 3.0]);
    }

    #[test]
    fn marginal_errors() {
        let s = EsState::new(3, &[0.0; 3], 1.0, DMatrix::identity(3, 3), 6).unwrap();
        assert!(matches!(s.marginal(&[0, 3]), Err(Error::IndexOutOfRange { index: 3, dim: 3 })));
        assert!(matches!(s.marginal(&[1, 0]), Err(Error::UnorderedCoords)));
        assert!(matches!(s.marginal(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn sample_zero_and_determinism() {
        let s = EsState::new(3, &[0.0; 3], 1.0, DMatrix::identity(3, 3), 6).unwrap();
        assert!(s.sample(0, &mut seeded(1)).is_empty());
        let a = s.sample(7, &mut seeded(42));
        let b = s.sample(7, &mut seeded(42));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments() {
        let s = EsState::new(2, &[0.0; 2], 1.0, DMatrix::identity(2, 2), 6).unwrap();
        let n = 100_000;
        let xs = s.sample(n, &mut seeded(7));
        for d in 0..2 {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn sample_within_respects_box() {
        let s = EsState::new(2, &[0.0; 2], 5.0, DMatrix::identity(2, 2), 6).unwrap();
        let bounds = [(-1.0, 1.0), (0.0, 0.5)];
        for x in s.sample_within(200, &bounds, &mut seeded(3)) {
            assert!(inside(&x, &bounds));
        }
    }

    #[test]
    fn update_fixed_point_and_counter() {
        let mut s = EsState::new(2, &[0.3, -0.2], 0.5, DMatrix::identity(2, 2), 6).unwrap();
        let ranked: Vec<Candidate> = (0..6)
            .map(|_| Candidate {
                vector: vec![0.3, -0.2],
                objective: 0.0,
                cv: 0.0,
            })
            .collect();
        s.update(&ranked).unwrap();
        assert_eq!(s.generation(), 1);
        assert!((s.mean()[0] - 0.3).abs() < 1e-15 && (s.mean()[1] + 0.2).abs() < 1e-15);
        assert_eq!(s.mean_history().len(), 2);
        assert!(matches!(s.update(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn history_keeps_three() {
        let mut s = EsState::new(1, &[0.0], 1.0, DMatrix::identity(1, 1), 4).unwrap();
        for i in 1..=5 {
            let c = Candidate {
                vector: vec![i as f64],
                objective: 0.0,
                cv: 0.0,
            };
            s.update(&[c.clone(), c]).unwrap();
        }
        let h: Vec<f64> = s.mean_history().map(|m| m[0]).collect();
        assert_eq!(h.len(), 3);
        assert_eq!(*h.last().unwrap(), s.mean()[0]);
    }

    fn run_sphere(dim: usize, seed: u64, budget: usize) -> (Vec<f64>, EsState) {
        let mut rng = seeded(seed);
        let mut s = EsState::with_default_lambda(dim, &vec![1.0; dim], 0.5, DMatrix::identity(dim, dim)).unwrap();
        let lambda = s.strategy().lambda;
        let mut best = f64::INFINITY;
        let mut trail = Vec::new();
        let mut evals = 0;
        while evals + lambda <= budget {
            let mut cands: Vec<Candidate> = s
                .sample(lambda, &mut rng)
                .into_iter()
                .map(|v| Candidate {
                    objective: sphere(&v),
                    vector: v,
                    cv: 0.0,
                })
                .collect();
            evals += lambda;
            cands.sort_by(|a, b| a.objective.total_cmp(&b.objective));
            best = best.min(cands[0].objective);
            trail.push(best);
            s.update(&cands).unwrap();
        }
        (trail, s)
    }

    #[test]
    fn sphere_converges_monotonically() {
        let (trail, _) = run_sphere(5, 11, 5000);
        assert!(trail.windows(2).all(|w| w[1] <= w[0]));
        assert!(*trail.last().unwrap() < 1e-8, "best {}", trail.last().unwrap());
    }

    #[test]
    fn covariance_stays_repaired() {
        for dim in 2..=10 {
            let (_, s) = run_sphere(dim, dim as u64, 3000);
            let c = s.cov();
            let asym = (c - c.transpose()).abs().max();
            assert!(asym <= 1e-10);
            let floor = EIGEN_FLOOR * c.trace();
            let eig = SymmetricEigen::new(c.clone()).eigenvalues;
            assert!(eig.min() >= 0.9 * floor);
        }
    }

    #[test]
    fn reproducible_runs() {
        let (a, sa) = run_sphere(4, 99, 800);
        let (b, sb) = run_sphere(4, 99, 800);
        assert_eq!(a, b);
        assert_eq!(sa.mean(), sb.mean());
        assert_eq!(sa.cov(), sb.cov());
    }
}
