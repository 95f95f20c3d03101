//! Simplex-constrained least squares for unit, time and synthetic-control weights.
//!
//! Every weight problem has the form
//!
//! ```text
//! min_{w0, w ∈ Δ_k}  ‖w0·1 + A w − b‖² + ridge·n·‖w‖²
//! ```
//!
//! with `A` an `n × k` design, `Δ_k` the unit simplex, and the intercept `w0`
//! optional. The intercept is profiled out by centering the columns of `A` and
//! the target, leaving a quadratic over the simplex that is solved with
//! away-step Frank-Wolfe and exact line search. The Frank-Wolfe gap bounds the
//! suboptimality and is the reported certificate.

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::BlockDesign;

/// How to select among (near-)minimizers when the objective is not strictly convex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    None,
    /// Minimum Euclidean norm, via a vanishing-ridge homotopy.
    MinNorm,
}

#[derive(Debug, Clone)]
pub struct SimplexLsProblem {
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Penalty per coefficient; the effective penalty is `ridge * design.nrows()`.
    pub ridge: f64,
    pub with_intercept: bool,
    pub tie_break: TieBreak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Gap tolerance relative to the objective at uniform weights.
    pub rel_tol: f64,
    /// Absolute floor on the gap tolerance.
    pub abs_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-8, abs_tol: 1e-14, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexLsSolution {
    pub intercept: f64,
    pub weights: DVector<f64>,
    /// Frank-Wolfe gap at the returned point.
    pub gap: f64,
    /// Tolerance the gap was held to.
    pub tol: f64,
    /// Full objective value, including the ridge penalty.
    pub objective: f64,
    pub iterations: usize,
}

/// Unit and time weights of one fit. SC fits leave `lambda` empty and both
/// intercepts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub omega0: f64,
    pub omega: Vec<f64>,
    pub lambda0: f64,
    pub lambda: Vec<f64>,
    pub zeta: f64,
    pub gap: f64,
}

impl SimplexLsProblem {
    pub fn new(design: DMatrix<f64>, target: DVector<f64>) -> Self {
        Self { design, target, ridge: 0.0, with_intercept: false, tie_break: TieBreak::None }
    }

    pub fn ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn intercept(mut self, yes: bool) -> Self {
        self.with_intercept = yes;
        self
    }

    pub fn tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.design.ncols() == 0 {
            return Err(Error::EmptyDonors);
        }
        if self.design.nrows() != self.target.len() {
            return Err(Error::Dimension(format!(
                "design has {} rows but target has {}",
                self.design.nrows(),
                self.target.len()
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidInput(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if self.design.iter().chain(self.target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("weight problem has non-finite entries".into()));
        }
        Ok(())
    }

    /// Value of `w0` that zeroes the mean residual at `w` (0 without intercept).
    pub fn intercept_at(&self, w: &DVector<f64>) -> f64 {
        if !self.with_intercept || self.design.nrows() == 0 {
            return 0.0;
        }
        let n = self.design.nrows() as f64;
        (self.target.sum() - (&self.design * w).sum()) / n
    }

    /// Full objective at `(w0, w)`.
    pub fn objective(&self, w0: f64, w: &DVector<f64>) -> f64 {
        let r = (&self.design * w).add_scalar(w0) - &self.target;
        r.norm_squared() + self.ridge * self.design.nrows() as f64 * w.norm_squared()
    }

    /// Objective with the intercept profiled out.
    pub fn profiled_objective(&self, w: &DVector<f64>) -> f64 {
        self.objective(self.intercept_at(w), w)
    }
}

/// Gram form of the profiled problem: `f(w) = wᵀQw − 2qᵀw + c`.
struct Quadratic {
    q_mat: DMatrix<f64>,
    q_vec: DVector<f64>,
    c: f64,
}

impl Quadratic {
    fn build(problem: &SimplexLsProblem, extra_ridge: f64) -> Self {
        let (n, k) = problem.design.shape();
        let mut a = problem.design.clone();
        let mut b = problem.target.clone();
        if problem.with_intercept && n > 0 {
            for j in 0..k {
                let mean = a.column(j).mean();
                a.column_mut(j).add_scalar_mut(-mean);
            }
            let mean = b.mean();
            b.add_scalar_mut(-mean);
        }
        // On the simplex Aw = A(w − 1/k) + A1/k, so the row means of A can be moved
        // into the target. This removes the direction the constraint cancels anyway.
        for i in 0..n {
            let mean = a.row(i).mean();
            a.row_mut(i).add_scalar_mut(-mean);
            b[i] -= mean;
        }
        let mut q_mat = a.tr_mul(&a);
        let eta = problem.ridge * n as f64 + extra_ridge;
        for j in 0..k {
            q_mat[(j, j)] += eta;
        }
        Self { q_vec: a.tr_mul(&b), c: b.norm_squared(), q_mat }
    }

    fn value(&self, w: &DVector<f64>, qw: &DVector<f64>) -> f64 {
        w.dot(qw) - 2.0 * self.q_vec.dot(w) + self.c
    }

    /// Scale used for the homotopy ridge: mean diagonal of the unpenalized Gram
    /// restricted to directions with `Σd = 0`. Adding a common vector to every
    /// column leaves the objective on the simplex unchanged, and so leaves this
    /// scale unchanged too.
    fn diag_scale(problem: &SimplexLsProblem) -> f64 {
        let (n, k) = problem.design.shape();
        let mut a = problem.design.clone();
        if problem.with_intercept && n > 0 {
            for j in 0..k {
                let mean = a.column(j).mean();
                a.column_mut(j).add_scalar_mut(-mean);
            }
        }
        let full = a.norm_squared() / k as f64;
        for i in 0..n {
            let mean = a.row(i).mean();
            a.row_mut(i).add_scalar_mut(-mean);
        }
        let projected = a.norm_squared() / k as f64;
        if projected > 0.0 {
            projected
        } else {
            full
        }
    }
}

#[derive(Debug)]
struct FwOutcome {
    w: DVector<f64>,
    gap: f64,
    iterations: usize,
    converged: bool,
}

/// Frank-Wolfe gap `gᵀw − min_j g_j` with `g = 2(Qw − q)`.
fn fw_gap(quad: &Quadratic, w: &DVector<f64>, qw: &DVector<f64>) -> f64 {
    let g = 2.0 * (qw - &quad.q_vec);
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    (g.dot(w) - min).max(0.0)
}

/// Minimizes over the support `s` subject only to `Σw = 1`, by the KKT system.
/// Returns `None` when the system is singular or the solution leaves the simplex.
fn polish(quad: &Quadratic, w: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    let sol = face_solve(quad, &support)?;
    if sol.iter().any(|&v| v < 0.0) {
        return None;
    }
    let mut out = DVector::zeros(w.len());
    for (r, &i) in support.iter().enumerate() {
        out[i] = sol[r];
    }
    let total = out.sum();
    Some(out / total)
}

/// Minimizer on the affine hull of `support` (weights off the support fixed at zero).
fn face_solve(quad: &Quadratic, support: &[usize]) -> Option<DVector<f64>> {
    let m = support.len();
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            kkt[(r, c)] = quad.q_mat[(i, j)];
        }
        kkt[(r, m)] = 1.0;
        kkt[(m, r)] = 1.0;
        rhs[r] = quad.q_vec[i];
    }
    rhs[m] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(sol.rows(0, m).into_owned())
}

/// Primal active-set finish from a feasible point: shrink the support until the
/// face minimizer is feasible, then grow it while some excluded coordinate has a
/// smaller gradient than the support. Returns the exact minimizer when the face
/// systems stay nonsingular.
fn active_set(quad: &Quadratic, w: &DVector<f64>) -> Option<DVector<f64>> {
    let k = w.len();
    let mut x = w.clone();
    let mut active: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let scale = quad.q_vec.amax().max(quad.q_mat.amax()).max(f64::MIN_POSITIVE);
    for _ in 0..4 * k + 20 {
        let support: Vec<usize> = (0..k).filter(|&j| active[j]).collect();
        let y = face_solve(quad, &support)?;
        if y.iter().all(|&v| v >= 0.0) {
            x.fill(0.0);
            for (r, &i) in support.iter().enumerate() {
                x[i] = y[r];
            }
            let g = 2.0 * (&quad.q_mat * &x - &quad.q_vec);
            let level = support.iter().map(|&i| g[i]).fold(f64::INFINITY, f64::min);
            let entering = (0..k)
                .filter(|&j| !active[j] && g[j] < level - 1e-12 * scale)
                .min_by(|&a, &b| g[a].total_cmp(&g[b]));
            match entering {
                Some(j) => active[j] = true,
                None => return Some(x),
            }
        } else {
            // Step toward the face minimizer until the first weight reaches zero.
            let (mut alpha, mut block) = (1.0f64, usize::MAX);
            for (r, &i) in support.iter().enumerate() {
                if y[r] < 0.0 {
                    let a = x[i] / (x[i] - y[r]);
                    if a < alpha {
                        alpha = a;
                        block = i;
                    }
                }
            }
            for (r, &i) in support.iter().enumerate() {
                x[i] += alpha * (y[r] - x[i]);
                if x[i] <= 0.0 || i == block {
                    x[i] = 0.0;
                    active[i] = false;
                }
            }
            if !active.iter().any(|&a| a) {
                return None;
            }
        }
    }
    None
}

const POLISH_EVERY: usize = 25;

fn away_step_fw(quad: &Quadratic, start: DVector<f64>, tol: f64, max_iter: usize) -> FwOutcome {
    let k = start.len();
    let mut w = start;
    let mut qw = &quad.q_mat * &w;
    let mut gap = fw_gap(quad, &w, &qw);
    let mut iter = 0;
    while gap > tol && iter < max_iter {
        iter += 1;
        let g = 2.0 * (&qw - &quad.q_vec);
        let (mut s, mut v) = (0, usize::MAX);
        for j in 0..k {
            if g[j] < g[s] {
                s = j;
            }
            if w[j] > 0.0 && (v == usize::MAX || g[j] > g[v]) {
                v = j;
            }
        }
        let gw = g.dot(&w);
        let wqw = w.dot(&qw);
        let fw_descent = gw - g[s];
        let away_descent = g[v] - gw;
        if fw_descent >= away_descent {
            // d = e_s − w
            let curv = quad.q_mat[(s, s)] - 2.0 * qw[s] + wqw;
            let step = if curv > 0.0 { (fw_descent / (2.0 * curv)).min(1.0) } else { 1.0 };
            w *= 1.0 - step;
            w[s] += step;
            qw *= 1.0 - step;
            qw.axpy(step, &quad.q_mat.column(s), 1.0);
        } else {
            // d = w − e_v, capped so that w_v stays nonnegative
            let wv = w[v];
            let max_step = if wv < 1.0 { wv / (1.0 - wv) } else { f64::INFINITY };
            let curv = wqw - 2.0 * qw[v] + quad.q_mat[(v, v)];
            let step = if curv > 0.0 { (away_descent / (2.0 * curv)).min(max_step) } else { max_step };
            if !step.is_finite() {
                break;
            }
            w *= 1.0 + step;
            w[v] -= step;
            qw *= 1.0 + step;
            qw.axpy(-step, &quad.q_mat.column(v), 1.0);
            if step == max_step {
                w[v] = 0.0;
            }
        }
        for x in w.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        gap = fw_gap(quad, &w, &qw);
        if gap > tol && iter % POLISH_EVERY == 0 {
            if let Some(p) = polish(quad, &w) {
                let qp = &quad.q_mat * &p;
                let pgap = fw_gap(quad, &p, &qp);
                if pgap <= gap && quad.value(&p, &qp) <= quad.value(&w, &qw) {
                    w = p;
                    qw = qp;
                    gap = pgap;
                }
            }
        }
    }
    // Final renormalization guards against drift in Σw.
    let total = w.sum();
    w /= total;
    let qw = &quad.q_mat * &w;
    let mut gap = fw_gap(quad, &w, &qw);
    if let Some(p) = active_set(quad, &w) {
        let qp = &quad.q_mat * &p;
        let pgap = fw_gap(quad, &p, &qp);
        if pgap <= gap.max(tol) && quad.value(&p, &qp) <= quad.value(&w, &qw) + tol * 1e-3 {
            w = p;
            gap = pgap;
        }
    }
    FwOutcome { w, gap, iterations: iter, converged: gap <= tol }
}

/// Solves one simplex least-squares problem.
pub fn solve_simplex_ls(problem: &SimplexLsProblem, options: &SolverOptions) -> Result<SimplexLsSolution> {
    problem.validate()?;
    let k = problem.design.ncols();
    let uniform = DVector::from_element(k, 1.0 / k as f64);
    if k == 1 {
        return Ok(finish(problem, uniform, 0.0, 0.0, 0));
    }
    let needs_homotopy = problem.tie_break == TieBreak::MinNorm && problem.ridge == 0.0;
    if !needs_homotopy {
        let quad = Quadratic::build(problem, 0.0);
        let tol = tolerance(&quad, &uniform, options);
        let out = away_step_fw(&quad, uniform, tol, options.max_iter);
        if !out.converged {
            return Err(Error::Convergence { iterations: out.iterations, gap: out.gap, tol });
        }
        return Ok(finish(problem, out.w, out.gap, tol, out.iterations));
    }

    let scale = Quadratic::diag_scale(problem);
    if scale == 0.0 {
        // Constant design: every feasible point is optimal and uniform has least norm.
        return Ok(finish(problem, uniform, 0.0, 0.0, 0));
    }
    let mut previous: Option<(DVector<f64>, f64, f64, usize)> = None;
    let mut start = uniform.clone();
    let mut total_iter = 0;
    for eps in HOMOTOPY_STEPS {
        let quad = Quadratic::build(problem, eps * scale);
        let tol = tolerance(&quad, &uniform, options);
        let out = away_step_fw(&quad, start.clone(), tol, options.max_iter);
        total_iter += out.iterations;
        if !out.converged {
            match previous {
                Some((w, gap, tol, _)) => return Ok(finish(problem, w, gap, tol, total_iter)),
                None => return Err(Error::Convergence { iterations: out.iterations, gap: out.gap, tol }),
            }
        }
        if let Some((prev, ..)) = &previous {
            if (prev - &out.w).amax() <= HOMOTOPY_AGREEMENT {
                return Ok(finish(problem, out.w, out.gap, tol, total_iter));
            }
        }
        start = out.w.clone();
        previous = Some((out.w, out.gap, tol, out.iterations));
    }
    let (w, gap, tol, _) = previous.expect("homotopy ran at least once");
    Ok(finish(problem, w, gap, tol, total_iter))
}

const HOMOTOPY_STEPS: [f64; 4] = [1e-4, 1e-6, 1e-8, 1e-10];
const HOMOTOPY_AGREEMENT: f64 = 1e-4;

fn tolerance(quad: &Quadratic, uniform: &DVector<f64>, options: &SolverOptions) -> f64 {
    let f0 = quad.value(uniform, &(&quad.q_mat * uniform)).max(0.0);
    (options.rel_tol * f0).max(options.abs_tol)
}

fn finish(problem: &SimplexLsProblem, w: DVector<f64>, gap: f64, tol: f64, iterations: usize) -> SimplexLsSolution {
    let intercept = problem.intercept_at(&w);
    let objective = problem.objective(intercept, &w);
    SimplexLsSolution { intercept, weights: w, gap, tol, objective, iterations }
}

/// Regularization scale: standard deviation of one-period changes of the control
/// units over the pre-period.
pub fn compute_zeta(y_co_pre: DMatrixView<'_, f64>) -> Result<f64> {
    let (n_co, t_pre) = y_co_pre.shape();
    if t_pre < 2 {
        return Err(Error::InsufficientPrePeriods { needed: 2, have: t_pre });
    }
    if n_co == 0 {
        return Err(Error::EmptyDonors);
    }
    let diffs = y_co_pre.columns(1, t_pre - 1) - y_co_pre.columns(0, t_pre - 1);
    let mean = diffs.mean();
    let ss: f64 = diffs.iter().map(|d| (d - mean).powi(2)).sum();
    Ok((ss / (n_co * (t_pre - 1)) as f64).sqrt())
}

fn treated_pre_average(design: &BlockDesign) -> DVector<f64> {
    design.y_tr_pre().row_mean().transpose()
}

/// Unit weights with intercept and ridge `ζ²·T_pre`.
pub fn unit_weights(design: &BlockDesign, zeta: f64, options: &SolverOptions) -> Result<SimplexLsSolution> {
    let problem = SimplexLsProblem::new(design.y_co_pre().transpose(), treated_pre_average(design))
        .ridge(zeta * zeta)
        .intercept(true)
        .tie_break(TieBreak::MinNorm);
    solve_simplex_ls(&problem, options)
}

/// Time weights with intercept, no ridge and min-norm selection.
pub fn time_weights(design: &BlockDesign, options: &SolverOptions) -> Result<SimplexLsSolution> {
    let target = design.y_co_post().column_mean();
    let problem = SimplexLsProblem::new(design.y_co_pre().clone_owned(), target)
        .intercept(true)
        .tie_break(TieBreak::MinNorm);
    solve_simplex_ls(&problem, options)
}

/// Synthetic-control weights: as [`unit_weights`] without the intercept.
pub fn sc_weights(design: &BlockDesign, zeta: f64, options: &SolverOptions) -> Result<SimplexLsSolution> {
    let problem = SimplexLsProblem::new(design.y_co_pre().transpose(), treated_pre_average(design))
        .ridge(zeta * zeta)
        .tie_break(TieBreak::MinNorm);
    solve_simplex_ls(&problem, options)
}

/// Both SDID weight vectors for a design.
pub fn sdid_weights(design: &BlockDesign, options: &SolverOptions) -> Result<WeightSet> {
    let zeta = compute_zeta(design.y_co_pre())?;
    let unit = unit_weights(design, zeta, options)?;
    let time = time_weights(design, options)?;
    Ok(WeightSet {
        omega0: unit.intercept,
        omega: unit.weights.iter().copied().collect(),
        lambda0: time.intercept,
        lambda: time.weights.iter().copied().collect(),
        zeta,
        gap: unit.gap.max(time.gap),
    })
}

/// Synthetic-control weights packaged as a [`WeightSet`] with no time weights.
pub fn sc_weight_set(design: &BlockDesign, options: &SolverOptions) -> Result<WeightSet> {
    let zeta = compute_zeta(design.y_co_pre())?;
    let sc = sc_weights(design, zeta, options)?;
    Ok(WeightSet {
        omega0: 0.0,
        omega: sc.weights.iter().copied().collect(),
        lambda0: 0.0,
        lambda: Vec::new(),
        zeta,
        gap: sc.gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    /// Best objective over the 2-simplex grid `{(i, j, n−i−j)/n}`.
    fn grid_min(problem: &SimplexLsProblem, n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let w = DVector::from_vec(vec![i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64]);
                best = best.min(problem.profiled_objective(&w));
            }
        }
        best
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_column_equal_to_target() {
        let col = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        let p = SimplexLsProblem::new(DMatrix::from_column_slice(3, 1, col.as_slice()), col);
        let s = solve_simplex_ls(&p, &opts()).unwrap();
        assert_eq!(s.weights.as_slice(), &[1.0]);
        assert_abs_diff_eq!(s.objective, 0.0);
    }

    #[test]
    fn empty_design_is_an_error() {
        let p = SimplexLsProblem::new(DMatrix::zeros(3, 0), DVector::zeros(3));
        assert!(matches!(solve_simplex_ls(&p, &opts()), Err(Error::EmptyDonors)));
    }

    #[test]
    fn matches_grid_oracle_with_ridge_and_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = SimplexLsProblem::new(random_matrix(&mut rng, 5, 3), random_matrix(&mut rng, 5, 1).column(0).into())
                .ridge(0.5)
                .intercept(true);
            let s = solve_simplex_ls(&p, &opts()).unwrap();
            let grid = grid_min(&p, 1000);
            assert!(s.objective <= grid + 1e-6, "{} vs {}", s.objective, grid);
            // The grid is within O(h²) of the optimum, so it also bounds from the other side.
            assert!(grid - s.objective < 1e-4);
        }
    }

    #[test]
    fn identical_columns_split_evenly() {
        let c = vec![1.0, -2.0, 0.5, 3.0];
        let mut a = DMatrix::zeros(4, 2);
        a.set_column(0, &DVector::from_vec(c.clone()));
        a.set_column(1, &DVector::from_vec(c));
        let p = SimplexLsProblem::new(a, DVector::from_vec(vec![0.0, 1.0, 2.0, 0.0])).ridge(0.1);
        let s = solve_simplex_ls(&p, &opts()).unwrap();
        assert_abs_diff_eq!(s.weights[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weights[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn intercept_zeroes_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SimplexLsProblem::new(random_matrix(&mut rng, 8, 4), random_matrix(&mut rng, 8, 1).column(0).into())
            .ridge(0.01)
            .intercept(true);
        let s = solve_simplex_ls(&p, &opts()).unwrap();
        let r = (&p.design * &s.weights).add_scalar(s.intercept) - &p.target;
        assert_abs_diff_eq!(r.sum(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zeta_edge_cases() {
        let constant = DMatrix::from_element(3, 5, 2.0);
        assert_eq!(compute_zeta(constant.as_view()).unwrap(), 0.0);
        let trend = DMatrix::from_fn(3, 5, |_, t| t as f64);
        assert_abs_diff_eq!(compute_zeta(trend.as_view()).unwrap(), 0.0, epsilon = 1e-15);
        let short = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(compute_zeta(short.as_view()), Err(Error::InsufficientPrePeriods { needed: 2, have: 1 })));
    }

    #[test]
    fn zeta_matches_two_pass_variance() {
        let y = DMatrix::from_row_slice(3, 4, &[1.0, 3.0, 2.0, 6.0, 0.0, 0.5, 1.5, 1.0, -2.0, 1.0, 1.0, 4.0]);
        // Differences per row: (2, -1, 4), (0.5, 1, -0.5), (3, 0, 3).
        let d = [2.0, -1.0, 4.0, 0.5, 1.0, -0.5, 3.0, 0.0, 3.0];
        let mean = d.iter().sum::<f64>() / 9.0;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 9.0;
        assert_abs_diff_eq!(compute_zeta(y.as_view()).unwrap(), var.sqrt(), epsilon = 1e-14);
    }

    fn design_from(rng: &mut ChaCha8Rng, n_co: usize, n_tr: usize, t_pre: usize, t_post: usize) -> BlockDesign {
        let n = n_co + n_tr;
        let t = t_pre + t_post;
        let a = random_matrix(rng, n, 2);
        let b = random_matrix(rng, 2, t);
        let y = &a * &b + 0.3 * random_matrix(rng, n, t);
        BlockDesign::from_matrix(y, n_tr, t_post).unwrap()
    }

    #[test]
    fn unit_weights_beat_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = design_from(&mut rng, 5, 1, 6, 2);
        let zeta = compute_zeta(d.y_co_pre()).unwrap();
        let s = unit_weights(&d, zeta, &opts()).unwrap();
        let p = SimplexLsProblem::new(d.y_co_pre().transpose(), treated_pre_average(&d)).ridge(zeta * zeta).intercept(true);
        let uniform = DVector::from_element(5, 0.2);
        assert!(s.objective <= p.profiled_objective(&uniform));
    }

    #[test]
    fn identical_controls_get_uniform_weights() {
        let row = [1.0, 2.0, 0.5, 3.0];
        let y = DMatrix::from_fn(4, 5, |i, t| if t < 4 { row[t] + if i == 3 { 5.0 } else { 0.0 } } else { 0.0 });
        let d = BlockDesign::from_matrix(y, 1, 1).unwrap();
        let zeta = compute_zeta(d.y_co_pre()).unwrap();
        let s = unit_weights(&d, zeta, &opts()).unwrap();
        for w in s.weights.iter() {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(s.objective - zeta * zeta * 4.0 / 3.0, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn single_pre_period_gives_unit_time_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = design_from(&mut rng, 4, 1, 1, 3);
        let s = time_weights(&d, &opts()).unwrap();
        assert_eq!(s.weights.as_slice(), &[1.0]);
    }

    #[test]
    fn duplicated_pre_periods_share_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = design_from(&mut rng, 8, 1, 4, 2);
        // Columns 0 and 4 of the new pre-period block are copies.
        let y = base.y();
        let mut cols: Vec<usize> = vec![0, 1, 2, 3, 0];
        cols.extend([4, 5]);
        let y2 = DMatrix::from_fn(y.nrows(), cols.len(), |i, j| y[(i, cols[j])]);
        let d = BlockDesign::from_matrix(y2, 1, 2).unwrap();
        let s = time_weights(&d, &opts()).unwrap();
        assert_abs_diff_eq!(s.weights[0], s.weights[4], epsilon = 1e-6);

        // Ridge-limit oracle: with an explicit tiny ridge the solution is unique.
        let p = SimplexLsProblem::new(d.y_co_pre().clone_owned(), d.y_co_post().column_mean())
            .intercept(true)
            .ridge(1e-9);
        let oracle = solve_simplex_ls(&p, &opts()).unwrap();
        assert!((oracle.weights - &s.weights).amax() < 1e-3);
    }

    #[test]
    fn exact_match_dominates_sc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d0 = design_from(&mut rng, 6, 1, 10, 2);
        let mut y = d0.y().clone();
        let copy = y.row(2).clone_owned();
        y.row_mut(6).copy_from(&copy);
        let d = BlockDesign::from_matrix(y, 1, 2).unwrap();
        let s = sc_weights(&d, 1e-6, &opts()).unwrap();
        assert!(s.weights[2] > 0.999, "{}", s.weights);
    }

    #[test]
    fn sc_matches_grid_with_four_controls() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = design_from(&mut rng, 4, 1, 6, 2);
        let zeta = compute_zeta(d.y_co_pre()).unwrap();
        let s = sc_weights(&d, zeta, &opts()).unwrap();
        let p = SimplexLsProblem::new(d.y_co_pre().transpose(), treated_pre_average(&d)).ridge(zeta * zeta);
        let n = 100;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                for k in 0..=(n - i - j) {
                    let w = DVector::from_vec(vec![i, j, k, n - i - j - k].iter().map(|&v| v as f64 / n as f64).collect());
                    best = best.min(p.profiled_objective(&w));
                }
            }
        }
        assert!(s.objective <= best + 1e-6);
    }

    #[test]
    fn nonconvergence_reports_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SimplexLsProblem::new(random_matrix(&mut rng, 10, 6), random_matrix(&mut rng, 10, 1).column(0).into());
        let tight = SolverOptions { rel_tol: 1e-300, abs_tol: 0.0, max_iter: 2 };
        match solve_simplex_ls(&p, &tight) {
            Err(Error::Convergence { iterations, gap, .. }) => {
                assert_eq!(iterations, 2);
                assert!(gap > 0.0);
            }
            other => panic!("expected a convergence failure, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn solutions_are_feasible_and_certified(seed in any::<u64>(), n in 2usize..12, k in 2usize..8, ridge in 0.0f64..2.0, icpt: bool) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SimplexLsProblem::new(random_matrix(&mut rng, n, k), random_matrix(&mut rng, n, 1).column(0).into())
                .ridge(ridge)
                .intercept(icpt);
            let s = solve_simplex_ls(&p, &opts()).unwrap();
            prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((s.weights.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(s.gap <= s.tol);
            // No feasible single-coordinate move of size 1e-4 improves by more than tol.
            for i in 0..k {
                for j in 0..k {
                    if i == j || s.weights[j] < 1e-4 {
                        continue;
                    }
                    let mut w = s.weights.clone();
                    w[i] += 1e-4;
                    w[j] -= 1e-4;
                    prop_assert!(p.profiled_objective(&w) >= s.objective - s.tol - 1e-12);
                }
            }
        }

        #[test]
        fn unit_weights_ignore_column_and_row_shifts(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = design_from(&mut rng, 6, 2, 7, 3);
            let beta: Vec<f64> = (0..d.t()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let alpha: Vec<f64> = (0..d.n()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let shifted = DMatrix::from_fn(d.n(), d.t(), |i, t| d.y()[(i, t)] + alpha[i] + beta[t]);
            let d2 = d.with_outcomes(shifted).unwrap();
            let z = compute_zeta(d.y_co_pre()).unwrap();
            let a = unit_weights(&d, z, &opts()).unwrap();
            let b = unit_weights(&d2, z, &opts()).unwrap();
            prop_assert!((a.weights - b.weights).amax() < 1e-6);
            let ta = time_weights(&d, &opts()).unwrap();
            let tb = time_weights(&d2, &opts()).unwrap();
            prop_assert!((ta.weights - tb.weights).amax() < 1e-4);
        }
    }
}
