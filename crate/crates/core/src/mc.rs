//! Nuclear-norm matrix completion with unpenalized two-way fixed effects.
//!
//! Treated cells are treated as missing. The untreated cells are fit by
//! `μ + α_i + β_t + L_it` with a nuclear-norm penalty on `L`, via soft-impute
//! sweeps; the effect estimate is the mean of `Y − fit` over treated cells.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Estimate, Method};
use crate::linalg::thin_svd;
use crate::panel::BlockDesign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    /// Penalties as fractions of the top singular value of the initial residual.
    /// `None` uses a geometric grid over `[1e-3, 1]`.
    pub penalty_grid: Option<Vec<f64>>,
    pub grid_size: usize,
    pub folds: usize,
    pub max_sweeps: usize,
    /// Sweeps stop once the imputed values and the low-rank part move by less
    /// than this, relative to the norm of the outcomes.
    pub tol: f64,
    /// Seed for the cross-validation fold assignment.
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { penalty_grid: None, grid_size: 10, folds: 5, max_sweeps: 500, tol: 1e-5, seed: 0 }
    }
}

impl McOptions {
    fn relative_grid(&self) -> Result<Vec<f64>> {
        let grid = match &self.penalty_grid {
            Some(g) => g.clone(),
            None if self.grid_size == 1 => vec![1e-3],
            None => (0..self.grid_size)
                .map(|k| 10f64.powf(-3.0 * k as f64 / (self.grid_size - 1) as f64))
                .collect(),
        };
        if grid.is_empty() {
            return Err(Error::InvalidInput("empty penalty grid".into()));
        }
        if grid.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput("penalties must be finite and nonnegative".into()));
        }
        let mut grid = grid;
        // Fit from the largest penalty down so each warm start is the sparser solution.
        grid.sort_by(|a, b| b.total_cmp(a));
        Ok(grid)
    }
}

/// Low-rank fit of the observed cells.
#[derive(Debug, Clone)]
pub struct McFit {
    /// `μ + α_i + β_t + L_it` at every cell.
    pub fitted: DMatrix<f64>,
    pub low_rank: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Last relative movement of the iterate.
    pub change: f64,
}

/// Additive part `μ + α_i + β_t`, fit by least squares on `z` (all cells).
fn additive_fit(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = z.shape();
    let rows: Vec<f64> = (0..n).map(|i| z.row(i).mean()).collect();
    let cols: Vec<f64> = (0..t).map(|j| z.column(j).mean()).collect();
    let g = z.mean();
    DMatrix::from_fn(n, t, |i, j| rows[i] + cols[j] - g)
}

/// Singular-value soft-thresholding; also returns the nuclear norm of the result.
fn soft_threshold(m: &DMatrix<f64>, level: f64) -> Result<(DMatrix<f64>, f64)> {
    let svd = thin_svd(m)?;
    let (u, vt) = (svd.u, svd.v_t);
    let s = svd.s.map(|v| (v - level).max(0.0));
    let k = s.iter().filter(|&&v| v > 0.0).count();
    if k == 0 {
        return Ok((DMatrix::zeros(m.nrows(), m.ncols()), 0.0));
    }
    let mut us = u.columns(0, k).clone_owned();
    for j in 0..k {
        us.column_mut(j).scale_mut(s[j]);
    }
    Ok((us * vt.rows(0, k), s.sum()))
}

/// Soft-impute with penalty `level` on the observed cells of `y`, warm-started at
/// `start`, with Nesterov extrapolation and restart on objective increase. Stops
/// at the sweep budget with `converged = false`.
fn soft_impute(
    y: &DMatrix<f64>,
    observed: &[bool],
    level: f64,
    start: &DMatrix<f64>,
    options: &McOptions,
) -> Result<McFit> {
    let n = y.nrows();
    let scale = y.norm_squared().max(f64::MIN_POSITIVE);
    // One block step from (additive, low_rank): impute, refit the additive part,
    // then shrink the singular values of what remains.
    let step = |additive: &DMatrix<f64>, low_rank: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
        let mut z = additive + low_rank;
        for (k, &obs) in observed.iter().enumerate() {
            if obs {
                z[(k % n, k / n)] = y[(k % n, k / n)];
            }
        }
        let a = additive_fit(&(&z - low_rank));
        let (l, nuclear) = soft_threshold(&(&z - &a), level)?;
        let mut loss = 0.0;
        for (k, &obs) in observed.iter().enumerate() {
            if obs {
                let (i, j) = (k % n, k / n);
                loss += (y[(i, j)] - a[(i, j)] - l[(i, j)]).powi(2);
            }
        }
        Ok((a, l, 0.5 * loss + level * nuclear))
    };

    let mut low_rank = start.clone();
    let mut additive = additive_fit(&(y - &low_rank));
    let mut objective = f64::INFINITY;
    let (mut prev_a, mut prev_l) = (additive.clone(), low_rank.clone());
    let mut momentum = 1.0f64;
    let mut change = f64::INFINITY;
    for sweep in 1..=options.max_sweeps {
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        let ya = &additive + (&additive - &prev_a) * beta;
        let yl = &low_rank + (&low_rank - &prev_l) * beta;
        let (mut a, mut l, mut obj) = step(&ya, &yl)?;
        if obj > objective {
            // Restart from the last iterate without momentum.
            (a, l, obj) = step(&additive, &low_rank)?;
            momentum = 1.0;
        } else {
            momentum = next_momentum;
        }
        change = (((&a - &additive).norm_squared() + (&l - &low_rank).norm_squared()) / scale).sqrt();
        prev_a = std::mem::replace(&mut additive, a);
        prev_l = std::mem::replace(&mut low_rank, l);
        objective = obj;
        if change <= options.tol {
            return Ok(McFit { fitted: &additive + &low_rank, low_rank, sweeps: sweep, converged: true, change });
        }
    }
    Ok(McFit { fitted: &additive + &low_rank, low_rank, sweeps: options.max_sweeps, converged: false, change })
}

fn require_converged(fit: McFit, options: &McOptions) -> Result<McFit> {
    if fit.converged {
        Ok(fit)
    } else {
        Err(Error::Convergence { iterations: fit.sweeps, gap: fit.change, tol: options.tol })
    }
}

/// Observation mask (column-major, matching nalgebra storage) of the untreated cells.
fn untreated_mask(design: &BlockDesign) -> Vec<bool> {
    let n = design.n();
    (0..n * design.t()).map(|k| !design.is_treated_cell(k % n, k / n)).collect()
}

fn initial_fill(y: &DMatrix<f64>, observed: &[bool]) -> DMatrix<f64> {
    // Alternate additive fits over the observed cells to fill the rest.
    let n = y.nrows();
    let mut z = y.clone();
    for _ in 0..50 {
        let fit = additive_fit(&z);
        for (k, &obs) in observed.iter().enumerate() {
            if !obs {
                z[(k % n, k / n)] = fit[(k % n, k / n)];
            }
        }
    }
    z
}

/// Cross-validated mean squared error on held-out untreated cells for each
/// relative penalty, largest penalty first. Fits that exhaust the sweep budget
/// are scored at their last iterate.
pub fn mc_cv_curve(design: &BlockDesign, options: &McOptions) -> Result<Vec<(f64, f64)>> {
    let grid = options.relative_grid()?;
    let y = design.y();
    let observed = untreated_mask(design);
    let scale = penalty_scale(y, &observed)?;
    let mut cells: Vec<usize> = (0..observed.len()).filter(|&k| observed[k]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    cells.shuffle(&mut rng);
    let folds = options.folds.max(2);
    let n = y.nrows();
    let mut mse = vec![0.0; grid.len()];
    let mut count = 0usize;
    for f in 0..folds {
        let held: Vec<usize> = cells.iter().copied().skip(f).step_by(folds).collect();
        if held.is_empty() {
            continue;
        }
        let mut mask = observed.clone();
        for &k in &held {
            mask[k] = false;
        }
        let filled = initial_fill(y, &mask);
        let mut start = DMatrix::zeros(y.nrows(), y.ncols());
        for (g, &rel) in grid.iter().enumerate() {
            let fit = soft_impute(&filled, &mask, rel * scale, &start, options)?;
            mse[g] += held.iter().map(|&k| (y[(k % n, k / n)] - fit.fitted[(k % n, k / n)]).powi(2)).sum::<f64>();
            start = fit.low_rank;
        }
        count += held.len();
    }
    Ok(grid.into_iter().zip(mse.into_iter().map(|m| m / count as f64)).collect())
}

fn penalty_scale(y: &DMatrix<f64>, observed: &[bool]) -> Result<f64> {
    let z = initial_fill(y, observed);
    let resid = &z - additive_fit(&z);
    Ok(thin_svd(&resid)?.s.iter().copied().fold(0.0, f64::max))
}

/// Fits the completion at an absolute penalty `level`.
pub fn mc_fit(design: &BlockDesign, level: f64, options: &McOptions) -> Result<McFit> {
    let observed = untreated_mask(design);
    let y = design.y();
    let filled = initial_fill(y, &observed);
    require_converged(soft_impute(&filled, &observed, level, &DMatrix::zeros(y.nrows(), y.ncols()), options)?, options)
}

/// Matrix-completion estimate with the penalty chosen by cross-validation.
pub fn mc_estimate(design: &BlockDesign, options: &McOptions) -> Result<Estimate> {
    let observed = untreated_mask(design);
    let y = design.y();
    for i in 0..design.n() {
        if !(0..design.t()).any(|t| observed[t * design.n() + i]) {
            return Err(Error::UnsupportedDesign(format!("unit {i} has no untreated cells")));
        }
    }
    let curve = mc_cv_curve(design, options)?;
    let best = curve.iter().enumerate().min_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).map_or(0, |(i, _)| i);
    let scale = penalty_scale(y, &observed)?;
    let filled = initial_fill(y, &observed);
    let mut start = DMatrix::zeros(y.nrows(), y.ncols());
    let mut fit = None;
    for (rel, _) in &curve[..=best] {
        let f = soft_impute(&filled, &observed, rel * scale, &start, options)?;
        start = f.low_rank.clone();
        fit = Some(f);
    }
    let fit = require_converged(fit.expect("grid is non-empty"), options)?;
    let mut s = 0.0;
    for i in design.n_co()..design.n() {
        for t in design.t_pre()..design.t() {
            s += y[(i, t)] - fit.fitted[(i, t)];
        }
    }
    let tau_hat = s / (design.n_tr() * design.t_post()) as f64;
    Ok(Estimate { method: Method::Mc, tau_hat, weights: None, fixed_effects: None, covariate_coefs: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rank_one_panel(tau: f64, noise: f64, seed: u64) -> BlockDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t) = (12, 10);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let v: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = DMatrix::from_fn(n, t, |i, j| {
            u[i] * v[j] + if i >= n - 2 && j >= t - 3 { tau } else { 0.0 } + noise * rng.random_range(-1.0..1.0)
        });
        BlockDesign::from_matrix(y, 2, 3).unwrap()
    }

    #[test]
    fn noiseless_rank_one_recovers_tau() {
        let d = rank_one_panel(1.5, 0.0, 1);
        let opts = McOptions { penalty_grid: Some(vec![1e-3]), max_sweeps: 5000, tol: 1e-8, ..McOptions::default() };
        let e = mc_estimate(&d, &opts).unwrap();
        assert!((e.tau_hat - 1.5).abs() < 1e-3, "{}", e.tau_hat);
    }

    #[test]
    fn cv_curve_has_interior_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, t) = (6, 6);
        let a = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let b = DMatrix::from_fn(2, t, |_, _| rng.random_range(-2.0..2.0));
        let e = DMatrix::from_fn(n, t, |_, _| 0.3 * rng.random_range(-1.0..1.0));
        let d = BlockDesign::from_matrix(&a * &b + e, 1, 1).unwrap();
        let opts = McOptions { grid_size: 12, ..McOptions::default() };
        let curve = mc_cv_curve(&d, &opts).unwrap();
        let mse: Vec<f64> = curve.iter().map(|c| c.1).collect();
        // The curve starts high at the largest penalty and first decreases.
        assert!(mse[1] < mse[0], "{mse:?}");
        let argmin = mse.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(argmin > 0, "{mse:?}");
    }

    #[test]
    fn empty_grid_is_an_error() {
        let d = rank_one_panel(0.0, 0.1, 2);
        let opts = McOptions { penalty_grid: Some(vec![]), ..McOptions::default() };
        assert!(matches!(mc_estimate(&d, &opts), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sweep_budget_is_enforced() {
        let d = rank_one_panel(0.0, 0.5, 4);
        let opts = McOptions { max_sweeps: 1, tol: 1e-12, ..McOptions::default() };
        assert!(mc_fit(&d, 1e-3, &opts).unwrap_err().is_convergence());
    }
}
