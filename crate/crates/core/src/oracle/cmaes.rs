//! (μ/μ_w, λ)-CMA-ES with rank-one and rank-μ covariance updates and
//! cumulative step-size adaptation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative floor on covariance eigenvalues; anything below is repaired.
const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct CmaEs {
    dim: usize,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    axis: DVector<f64>,
    inv_sqrt: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    pop_size: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    generation: usize,
    bounds: Option<(f64, f64)>,
    repairs: usize,
}

/// `4 + ⌊3·ln(n)⌋`.
pub fn default_pop_size(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

impl CmaEs {
    pub fn new(mean: Vec<f64>, sigma: f64, pop_size: Option<usize>) -> Self {
        let n = mean.len();
        assert!(n > 0, "CMA-ES needs at least one dimension");
        let pop_size = pop_size.unwrap_or_else(|| default_pop_size(n)).max(2);
        let mu = pop_size / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((pop_size as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        CmaEs {
            dim: n,
            mean: DVector::from_vec(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            axis: DVector::from_element(n, 1.0),
            inv_sqrt: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            pop_size,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            generation: 0,
            bounds: None,
            repairs: 0,
        }
    }

    /// Clip every sampled component into `[lo, hi]`.
    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pop_size(&self) -> usize {
        self.pop_size
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// Number of eigenvalue-floor repairs applied so far.
    pub fn repairs(&self) -> usize {
        self.repairs
    }

    /// Replace the covariance (re-decomposed immediately). Mainly for tests.
    pub fn set_covariance(&mut self, cov: DMatrix<f64>) {
        assert_eq!(cov.shape(), (self.dim, self.dim));
        self.cov = cov;
        self.decompose();
    }

    fn clip(&self, x: f64) -> f64 {
        match self.bounds {
            Some((lo, hi)) => x.clamp(lo, hi),
            None => x,
        }
    }

    /// Draw `pop_size` candidates from `N(mean, σ²·C)`.
    pub fn ask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        (0..self.pop_size)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z.component_mul(&self.axis);
                (0..self.dim)
                    .map(|i| self.clip(self.mean[i] + self.sigma * y[i]))
                    .collect()
            })
            .collect()
    }

    /// Rank the evaluated candidates and update mean, paths, covariance and σ.
    /// Ties in cost are broken lexicographically on the candidate vector, so
    /// the update does not depend on the order in which candidates are given.
    pub fn tell(&mut self, candidates: &[Vec<f64>], costs: &[f64]) {
        assert_eq!(candidates.len(), costs.len(), "one cost per candidate");
        assert!(candidates.len() >= self.weights.len(), "too few candidates for μ");
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            costs[a].total_cmp(&costs[b]).then_with(|| {
                candidates[a]
                    .iter()
                    .zip(&candidates[b])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });

        let n = self.dim;
        let steps: Vec<DVector<f64>> = order
            .iter()
            .take(self.weights.len())
            .map(|&i| {
                let x = DVector::from_column_slice(&candidates[i]);
                if self.sigma > 0.0 {
                    (x - &self.mean) / self.sigma
                } else {
                    DVector::zeros(n)
                }
            })
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }

        self.mean.axpy(self.sigma, &y_w, 1.0);

        let cs = self.c_sigma;
        let ps_gain = (cs * (2.0 - cs) * self.mu_eff).sqrt();
        self.p_sigma = &self.p_sigma * (1.0 - cs) + (&self.inv_sqrt * &y_w) * ps_gain;

        let ps_norm = self.p_sigma.norm();
        let decay = 1.0 - (1.0 - cs).powi(2 * (self.generation as i32 + 1));
        let h_sigma = ps_norm / decay.sqrt() < (1.4 + 2.0 / (n as f64 + 1.0)) * self.chi_n;
        let hs = if h_sigma { 1.0 } else { 0.0 };

        let cc = self.c_c;
        self.p_c = &self.p_c * (1.0 - cc) + &y_w * (hs * (cc * (2.0 - cc) * self.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, y) in self.weights.iter().zip(&steps) {
            rank_mu.ger(*w, y, y, 1.0);
        }
        let keep = 1.0 - self.c_1 - self.c_mu + (1.0 - hs) * self.c_1 * cc * (2.0 - cc);
        let mut cov = &self.cov * keep + rank_mu * self.c_mu;
        cov.ger(self.c_1, &self.p_c, &self.p_c, 1.0);
        self.cov = cov;

        self.sigma *= ((cs / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() {
            log::warn!("CMA-ES step size became non-finite; resetting to 1");
            self.sigma = 1.0;
        }
        self.generation += 1;
        self.decompose();
    }

    /// Symmetrize, eigendecompose and floor degenerate eigenvalues.
    fn decompose(&mut self) {
        let n = self.dim;
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let floor = EIGEN_FLOOR * max_eig.max(f64::MIN_POSITIVE);
        let mut values = eig.eigenvalues.clone();
        let mut repaired = false;
        for v in values.iter_mut() {
            if !(*v > floor) {
                *v = floor.max(f64::MIN_POSITIVE);
                repaired = true;
            }
        }
        if repaired {
            self.repairs += 1;
            log::warn!(
                "CMA-ES covariance repaired at generation {} (eigenvalue floor {floor:e})",
                self.generation
            );
        }
        let basis = eig.eigenvectors;
        self.axis = values.map(f64::sqrt);
        let d_inv = DMatrix::from_diagonal(&self.axis.map(|d| 1.0 / d));
        self.inv_sqrt = &basis * d_inv * basis.transpose();
        self.cov = &basis * DMatrix::from_diagonal(&values) * basis.transpose();
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        self.basis = basis;
        debug_assert_eq!(self.basis.shape(), (n, n));
    }
}
