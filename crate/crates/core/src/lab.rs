//! Calibrated simulation studies.
//!
//! A real panel is normalized, approximated by a rank-`R` matrix `L`, and split
//! into an additive part `F` and an interactive part `M`. The residuals give a
//! stationary AR(2) noise covariance and an observed binary unit characteristic
//! gives assignment probabilities through a logistic model on `(α_i, M_i)`.
//! Simulated panels are `L + τW + E` with Gaussian rows `E_i ~ N(0, Σ)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample_weighted;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{tau_hat, EstimatorOptions, Method};
use crate::linalg::thin_svd;
use crate::inference::{
    bootstrap_variance, confidence_interval, jackknife_variance, method_weights, placebo_variance, InferenceOptions,
    SeMethod,
};
use crate::panel::{BlockDesign, Panel};
use crate::rng::{derive_seed, stream_rng};
use crate::stats;

mod nested {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(n, t, |i, j| rows[i][j]))
    }
}

/// Affine map from the original outcome units to the normalized ones:
/// `normalized = (original − mean) / sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(rename = "L", with = "nested")]
    pub l: DMatrix<f64>,
    #[serde(rename = "F", with = "nested")]
    pub f: DMatrix<f64>,
    #[serde(rename = "M", with = "nested")]
    pub m: DMatrix<f64>,
    #[serde(rename = "Sigma", with = "nested")]
    pub sigma: DMatrix<f64>,
    pub ar_coefs: [f64; 2],
    pub pi: Vec<f64>,
    pub tau: f64,
    pub scale: Scale,
    #[serde(default)]
    pub unit_labels: Vec<String>,
    #[serde(default)]
    pub time_labels: Vec<String>,
}

/// Magnitudes of the components of a spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEcho {
    /// `‖F‖_F / √(NT)`.
    pub f_norm: f64,
    /// `‖M‖_F / √(NT)`.
    pub m_norm: f64,
    /// `√(tr Σ / T)`, the per-cell noise standard deviation.
    pub noise_scale: f64,
    pub ar_coefs: [f64; 2],
}

impl DgpSpec {
    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    pub fn t(&self) -> usize {
        self.l.ncols()
    }

    pub fn echo(&self) -> CalibrationEcho {
        let cells = ((self.n() * self.t()) as f64).sqrt();
        CalibrationEcho {
            f_norm: self.f.norm() / cells,
            m_norm: self.m.norm() / cells,
            noise_scale: (self.sigma.trace() / self.t() as f64).max(0.0).sqrt(),
            ar_coefs: self.ar_coefs,
        }
    }

    /// The same outcome model with every unit equally likely to be treated.
    pub fn with_uniform_assignment(&self) -> Self {
        Self { pi: vec![0.5; self.n()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = self.l.shape();
        if n == 0 || t == 0 {
            return Err(Error::InvalidInput("empty outcome model".into()));
        }
        if self.f.shape() != (n, t) || self.m.shape() != (n, t) || self.sigma.shape() != (t, t) {
            return Err(Error::Dimension("L, F, M must be N×T and Sigma T×T".into()));
        }
        if self.pi.len() != n || self.pi.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidInput("pi must hold N probabilities strictly between 0 and 1".into()));
        }
        let asym = (&self.sigma - self.sigma.transpose()).amax();
        if asym > 1e-10 * self.sigma.amax().max(1.0) {
            return Err(Error::InvalidInput("Sigma is not symmetric".into()));
        }
        if !self.tau.is_finite() || self.l.iter().chain(self.sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("spec has non-finite entries".into()));
        }
        Ok(())
    }
}

/// `argmin_{rank(L) = R} ‖Y − L‖_F`, by truncated SVD.
pub fn fit_low_rank(y: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let (n, t) = y.shape();
    if rank > n.min(t) {
        return Err(Error::InvalidInput(format!("rank {rank} exceeds min(N, T) = {}", n.min(t))));
    }
    let svd = thin_svd(y)?;
    let mut l = DMatrix::zeros(n, t);
    for k in 0..rank {
        l += svd.u.column(k) * svd.v_t.row(k) * svd.s[k];
    }
    Ok(l)
}

/// `F_it = L̄_i· + L̄_·t − L̄` and `M = L − F`.
pub fn decompose_additive(l: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, t) = l.shape();
    let rows: Vec<f64> = (0..n).map(|i| l.row(i).mean()).collect();
    let cols: Vec<f64> = (0..t).map(|j| l.column(j).mean()).collect();
    let g = l.mean();
    let f = DMatrix::from_fn(n, t, |i, j| rows[i] + cols[j] - g);
    let m = l - &f;
    (f, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ar2Fit {
    pub sigma: DMatrix<f64>,
    pub coefs: [f64; 2],
    pub innovation_variance: f64,
}

/// Pooled Yule-Walker AR(2) fit to the rows of `residuals` and the implied
/// stationary `T × T` covariance.
pub fn fit_ar2_covariance(residuals: &DMatrix<f64>) -> Result<Ar2Fit> {
    let (n, t) = residuals.shape();
    if t < 3 || n == 0 {
        return Err(Error::InvalidInput(format!("need at least 3 periods for an AR(2) fit, got {t}")));
    }
    let autocov = |k: usize| {
        stats::mean(
            &(0..n)
                .map(|i| (0..t - k).map(|s| residuals[(i, s)] * residuals[(i, s + k)]).sum::<f64>() / t as f64)
                .collect::<Vec<_>>(),
        )
    };
    let g0 = autocov(0);
    if g0 == 0.0 {
        return Ok(Ar2Fit { sigma: DMatrix::zeros(t, t), coefs: [0.0, 0.0], innovation_variance: 0.0 });
    }
    let [phi1, phi2] = yule_walker(autocov(1) / g0, autocov(2) / g0)?;
    let mut rho = vec![1.0, phi1 / (1.0 - phi2)];
    for k in 2..t {
        rho.push(phi1 * rho[k - 1] + phi2 * rho[k - 2]);
    }
    let sigma = DMatrix::from_fn(t, t, |a, b| g0 * rho[a.abs_diff(b)]);
    let innovation_variance = g0 * (1.0 - phi1 * rho[1] - phi2 * rho[2]);
    Ok(Ar2Fit { sigma, coefs: [phi1, phi2], innovation_variance })
}

fn yule_walker(r1: f64, r2: f64) -> Result<[f64; 2]> {
    let den = 1.0 - r1 * r1;
    let phi1 = r1 * (1.0 - r2) / den;
    let phi2 = (r2 - r1 * r1) / den;
    if !(phi2.abs() < 1.0 && phi1 + phi2 < 1.0 && phi2 - phi1 < 1.0) {
        return Err(Error::NonStationary(phi1, phi2, format_roots(phi1, phi2)));
    }
    Ok([phi1, phi2])
}

/// Roots of `1 − φ₁z − φ₂z²`.
fn format_roots(phi1: f64, phi2: f64) -> String {
    if phi2 == 0.0 {
        return if phi1 == 0.0 { "none".into() } else { format!("{:.4}", 1.0 / phi1) };
    }
    let disc = phi1 * phi1 + 4.0 * phi2;
    if disc >= 0.0 {
        let s = disc.sqrt();
        format!("{:.4}, {:.4}", (-phi1 + s) / (2.0 * phi2), (-phi1 - s) / (2.0 * phi2))
    } else {
        let re = -phi1 / (2.0 * phi2);
        let im = (-disc).sqrt() / (2.0 * phi2.abs());
        format!("{re:.4} ± {im:.4}i (modulus {:.4})", (re * re + im * im).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentFit {
    pub intercept: f64,
    pub phi_alpha: f64,
    /// Coefficients on the `T` entries of `M_i`.
    pub phi_m: Vec<f64>,
    pub pi: Vec<f64>,
    /// McFadden pseudo-R².
    pub pseudo_r2: f64,
    /// Set when the unpenalized fit separated and a ridge penalty was used.
    pub warning: Option<String>,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(d: &[u8], p: &[f64]) -> f64 {
    d.iter()
        .zip(p)
        .map(|(&di, &pi)| if di == 1 { pi.max(1e-300).ln() } else { (1.0 - pi).max(1e-300).ln() })
        .sum()
}

/// Indices of columns not in the span of the columns before them, by
/// Gram-Schmidt with a residual tolerance relative to each column's norm.
fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if norm > 0.0 && rn > tol * norm {
            basis.push(r / rn);
            keep.push(j);
        }
    }
    keep
}

/// Logistic IRLS with an optional ridge penalty (not applied to the intercept,
/// which is column 0). Returns `None` on divergence or apparent separation.
fn irls(x: &DMatrix<f64>, d: &[u8], penalty: f64) -> Option<DVector<f64>> {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        let mut h = DMatrix::zeros(p, p);
        let mut g = DVector::zeros(p);
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            let xi = x.row(i);
            h += xi.transpose() * xi * w;
            g += xi.transpose() * (f64::from(d[i]) - mu[i]);
        }
        for j in 1..p {
            h[(j, j)] += penalty;
            g[j] -= penalty * beta[j];
        }
        let step = h.cholesky()?.solve(&g);
        beta += &step;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 1e6) {
            return None;
        }
        if step.amax() < 1e-10 * (1.0 + beta.amax()) {
            let fitted = x * &beta;
            let extreme = fitted.iter().all(|&e| e.abs() > 30.0);
            return (!extreme || penalty > 0.0).then_some(beta);
        }
    }
    None
}

/// Logistic regression of `d` on `(α_i, M_i)`.
///
/// `M` has rank at most `R`, so the regression is run on the coordinates of the
/// rows of `M` in its row space and mapped back to `T` coefficients.
pub fn fit_assignment(d: &[u8], alpha: &[f64], m: &DMatrix<f64>) -> Result<AssignmentFit> {
    let n = d.len();
    if alpha.len() != n || m.nrows() != n {
        return Err(Error::Dimension("assignment inputs disagree on N".into()));
    }
    if d.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("assignment indicator must be 0/1".into()));
    }
    let treated = d.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::InvalidInput("assignment indicator is constant".into()));
    }
    let svd = thin_svd(m)?;
    let (u, vt, s) = (&svd.u, &svd.v_t, &svd.s);
    let s_max = s.max();
    let comps: Vec<usize> = (0..s.len()).filter(|&k| s[k] > 1e-8 * s_max.max(f64::MIN_POSITIVE)).collect();
    let full = DMatrix::from_fn(n, 2 + comps.len(), |i, j| match j {
        0 => 1.0,
        1 => alpha[i],
        _ => u[(i, comps[j - 2])] * s[comps[j - 2]],
    });
    // alpha is the centered row mean of L, so it usually lies in the span of the
    // M scores; aliased columns are dropped in order and get a zero coefficient
    let keep = independent_columns(&full, 1e-8);
    let x = full.select_columns(&keep);
    let (fit, warning) = match irls(&x, d, 0.0) {
        Some(b) => (b, None),
        None => {
            let penalty = 1e-4 * n as f64;
            let b = irls(&x, d, penalty).ok_or_else(|| Error::Convergence { iterations: 200, gap: f64::NAN, tol: 1e-10 })?;
            (b, Some(format!("logistic fit separated; refit with L2 penalty {penalty:.3e}")))
        }
    };
    let mut beta = DVector::zeros(full.ncols());
    for (j, &c) in keep.iter().enumerate() {
        beta[c] = fit[j];
    }
    let x = full;
    let mut phi_m = vec![0.0; m.ncols()];
    for (j, &k) in comps.iter().enumerate() {
        for (t, v) in phi_m.iter_mut().enumerate() {
            *v += beta[2 + j] * vt[(k, t)];
        }
    }
    let pi: Vec<f64> = (0..n).map(|i| logistic((x.row(i) * &beta)[0]).clamp(1e-12, 1.0 - 1e-12)).collect();
    let base = treated as f64 / n as f64;
    let ll0 = log_likelihood(d, &vec![base; n]);
    let pseudo_r2 = 1.0 - log_likelihood(d, &pi) / ll0;
    Ok(AssignmentFit { intercept: beta[0], phi_alpha: beta[1], phi_m, pi, pseudo_r2, warning })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub rank: usize,
    pub tau: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { rank: 4, tau: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub spec: DgpSpec,
    /// Present when an assignment indicator was supplied.
    pub assignment: Option<AssignmentFit>,
}

/// Calibrates a spec from an outcome matrix and an optional unit indicator.
/// Without an indicator every unit is equally likely to be treated.
pub fn calibrate(y: &DMatrix<f64>, d: Option<&[u8]>, options: &CalibrationOptions) -> Result<Calibration> {
    let (n, t) = y.shape();
    let mean = y.mean();
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n * t) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidInput("outcomes are constant".into()));
    }
    let y_star = y.map(|v| (v - mean) / sd);
    let l = fit_low_rank(&y_star, options.rank)?;
    let (f, m) = decompose_additive(&l);
    let ar = fit_ar2_covariance(&(&y_star - &l))?;
    let (pi, assignment) = match d {
        Some(d) => {
            let alpha: Vec<f64> = (0..n).map(|i| f.row(i).mean() - f.mean()).collect();
            let fit = fit_assignment(d, &alpha, &m)?;
            (fit.pi.clone(), Some(fit))
        }
        None => (vec![0.5; n], None),
    };
    let spec = DgpSpec {
        l,
        f,
        m,
        sigma: ar.sigma,
        ar_coefs: ar.coefs,
        pi,
        tau: options.tau,
        scale: Scale { mean, sd },
        unit_labels: Vec::new(),
        time_labels: Vec::new(),
    };
    Ok(Calibration { spec, assignment })
}

/// [`calibrate`] on a panel, with labels carried into the spec.
pub fn calibrate_panel(panel: &Panel, d: Option<&[u8]>, options: &CalibrationOptions) -> Result<Calibration> {
    let mut c = calibrate(panel.outcomes(), d, options)?;
    c.spec.unit_labels = panel.unit_labels().to_vec();
    c.spec.time_labels = panel.time_labels().to_vec();
    Ok(c)
}

/// Precomputed sampling state for a spec.
pub struct Simulator<'a> {
    spec: &'a DgpSpec,
    noise_factor: DMatrix<f64>,
    n_tr: usize,
    t_post: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a DgpSpec, n_tr: usize, t_post: usize) -> Result<Self> {
        spec.validate()?;
        let (n, t) = (spec.n(), spec.t());
        if n_tr == 0 || n_tr >= n || t_post == 0 || t_post >= t {
            return Err(Error::UnsupportedDesign(format!(
                "need 1 <= n_tr < {n} and 1 <= t_post < {t}, got n_tr={n_tr}, t_post={t_post}"
            )));
        }
        let eig = spec.sigma.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig < -1e-8 * eig.eigenvalues.amax().max(1.0) {
            return Err(Error::InvalidInput(format!("Sigma is not positive semi-definite (eigenvalue {min_eig:.3e})")));
        }
        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let mut noise_factor = eig.eigenvectors;
        for (j, r) in root.iter().enumerate() {
            noise_factor.column_mut(j).scale_mut(*r);
        }
        Ok(Self { spec, noise_factor, n_tr, t_post })
    }

    /// Draws the treated set and the noise, returning the outcome matrix in spec
    /// row order and the sorted treated rows.
    fn draw<R: Rng>(&self, rng: &mut R) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let (n, t) = (self.spec.n(), self.spec.t());
        let mut treated = sample_weighted(rng, n, |i| self.spec.pi[i], self.n_tr)
            .map_err(|e| Error::InvalidInput(format!("assignment probabilities: {e}")))?
            .into_vec();
        treated.sort_unstable();
        let z = DMatrix::from_fn(t, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = (&self.noise_factor * z).transpose();
        let mut y = &self.spec.l + noise;
        let t0 = t - self.t_post;
        for &i in &treated {
            for s in t0..t {
                y[(i, s)] += self.spec.tau;
            }
        }
        Ok((y, treated))
    }

    pub fn simulate_panel<R: Rng>(&self, rng: &mut R) -> Result<Panel> {
        let (y, treated) = self.draw(rng)?;
        let (n, t) = y.shape();
        let t0 = t - self.t_post;
        let w = DMatrix::from_fn(n, t, |i, s| u8::from(s >= t0 && treated.binary_search(&i).is_ok()));
        Panel::new(y, w, self.unit_labels(), self.time_labels())
    }

    /// A simulated panel already in controls-first design form.
    pub fn simulate_design<R: Rng>(&self, rng: &mut R) -> Result<BlockDesign> {
        let (y, treated) = self.draw(rng)?;
        let n = y.nrows();
        let order: Vec<usize> = (0..n).filter(|i| treated.binary_search(i).is_err()).chain(treated.iter().copied()).collect();
        let yd = DMatrix::from_fn(n, y.ncols(), |r, c| y[(order[r], c)]);
        let labels = self.unit_labels();
        BlockDesign::with_labels(yd, self.n_tr, self.t_post, order.iter().map(|&i| labels[i].clone()).collect(), self.time_labels())
    }

    fn unit_labels(&self) -> Vec<String> {
        if self.spec.unit_labels.len() == self.spec.n() {
            self.spec.unit_labels.clone()
        } else {
            (0..self.spec.n()).map(|i| format!("u{i}")).collect()
        }
    }

    fn time_labels(&self) -> Vec<String> {
        if self.spec.time_labels.len() == self.spec.t() {
            self.spec.time_labels.clone()
        } else {
            (0..self.spec.t()).map(|s| s.to_string()).collect()
        }
    }
}

/// One simulated panel from `spec`, deterministic in `seed`.
pub fn simulate_panel(spec: &DgpSpec, n_tr: usize, t_post: usize, seed: u64) -> Result<Panel> {
    let sim = Simulator::new(spec, n_tr, t_post)?;
    sim.simulate_panel(&mut stream_rng(seed, "simulate", 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_tr: usize,
    pub t_post: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Method>,
    pub variance_methods: Vec<SeMethod>,
    /// Estimators whose confidence intervals are evaluated.
    pub coverage_estimators: Vec<Method>,
    /// Bootstrap and placebo replicates per simulated panel.
    pub inference_reps: usize,
    pub alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_tr: 10,
            t_post: 10,
            reps: 100,
            seed: 0,
            estimators: vec![Method::Sdid, Method::Sc, Method::Did, Method::Mc],
            variance_methods: Vec::new(),
            coverage_estimators: vec![Method::Sdid],
            inference_reps: 200,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub method: Method,
    pub rmse: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub method: Method,
    pub se_method: SeMethod,
    /// `None` when the interval is undefined for this design.
    pub coverage: Option<f64>,
    pub mean_ci_length: Option<f64>,
    /// Replicates in which the variance was not defined.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub reps: usize,
    pub tau: f64,
    pub config: ExperimentConfig,
    pub echo: CalibrationEcho,
    pub estimators: Vec<EstimatorSummary>,
    pub coverage: Vec<CoverageSummary>,
}

impl SimulationReport {
    pub fn rmse(&self, method: Method) -> Option<f64> {
        self.estimators.iter().find(|e| e.method == method).map(|e| e.rmse)
    }

    pub fn bias(&self, method: Method) -> Option<f64> {
        self.estimators.iter().find(|e| e.method == method).map(|e| e.bias)
    }

    pub fn coverage(&self, method: Method, se_method: SeMethod) -> Option<f64> {
        self.coverage.iter().find(|c| c.method == method && c.se_method == se_method).and_then(|c| c.coverage)
    }

    /// Header and values of the single-row CSV summary.
    pub fn csv_row(&self, setting: &str) -> (Vec<String>, Vec<String>) {
        let mut header = vec!["setting", "reps", "seed", "f_norm", "m_norm", "noise_scale", "ar1", "ar2"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let mut row = vec![
            setting.to_string(),
            self.reps.to_string(),
            self.config.seed.to_string(),
            fmt(self.echo.f_norm),
            fmt(self.echo.m_norm),
            fmt(self.echo.noise_scale),
            fmt(self.echo.ar_coefs[0]),
            fmt(self.echo.ar_coefs[1]),
        ];
        for e in &self.estimators {
            header.push(format!("rmse_{}", e.method));
            row.push(fmt(e.rmse));
        }
        for e in &self.estimators {
            header.push(format!("bias_{}", e.method));
            row.push(fmt(e.bias));
        }
        for c in &self.coverage {
            header.push(format!("coverage_{}_{}", c.se_method, c.method));
            row.push(c.coverage.map(fmt).unwrap_or_default());
        }
        (header, row)
    }

    pub fn write_csv<W: std::io::Write>(&self, setting: &str, writer: W) -> Result<()> {
        let (header, row) = self.csv_row(setting);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&header)?;
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

struct ReplicateOutcome {
    errors: Vec<f64>,
    intervals: Vec<Option<(bool, f64)>>,
}

fn run_one(sim: &Simulator<'_>, spec: &DgpSpec, config: &ExperimentConfig, options: &EstimatorOptions, rep: u64) -> Result<ReplicateOutcome> {
    let mut rng = stream_rng(config.seed, "experiment", rep);
    let design = sim.simulate_design(&mut rng)?;
    let mut opts = options.clone();
    opts.mc.seed = derive_seed(config.seed, "experiment-mc", rep);
    let mut errors = Vec::with_capacity(config.estimators.len());
    let mut cached: Vec<(Method, f64)> = Vec::new();
    for &m in &config.estimators {
        let tau = tau_hat(&design, m, &opts)?;
        cached.push((m, tau));
        errors.push(tau - spec.tau);
    }
    let inference = InferenceOptions {
        replicates: config.inference_reps,
        seed: derive_seed(config.seed, "experiment-inference", rep),
        parallel: false,
        estimator: opts.clone(),
    };
    let mut intervals = Vec::new();
    for &m in &config.coverage_estimators {
        let tau = match cached.iter().find(|c| c.0 == m) {
            Some(&(_, t)) => t,
            None => tau_hat(&design, m, &opts)?,
        };
        for &v in &config.variance_methods {
            let var = match v {
                SeMethod::Bootstrap => bootstrap_variance(&design, m, &inference),
                SeMethod::Placebo => placebo_variance(&design, m, &inference),
                SeMethod::Jackknife => method_weights(&design, m, &opts).and_then(|w| jackknife_variance(&design, &w, tau)),
            };
            match var {
                Ok(var) => {
                    let (lo, hi) = confidence_interval(tau, var.v_hat, config.alpha)?;
                    intervals.push(Some((lo <= spec.tau && spec.tau <= hi, hi - lo)));
                }
                Err(Error::NotDefined(_)) => intervals.push(None),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ReplicateOutcome { errors, intervals })
}

/// Monte Carlo study: simulate, estimate, and summarize errors and coverage.
pub fn run_experiment(spec: &DgpSpec, config: &ExperimentConfig, options: &EstimatorOptions) -> Result<SimulationReport> {
    if config.reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    let sim = Simulator::new(spec, config.n_tr, config.t_post)?;
    let outcomes: Vec<ReplicateOutcome> =
        (0..config.reps as u64).into_par_iter().map(|r| run_one(&sim, spec, config, options, r)).collect::<Result<_>>()?;
    let reps = outcomes.len() as f64;
    let estimators = config
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let e: Vec<f64> = outcomes.iter().map(|o| o.errors[k]).collect();
            EstimatorSummary { method, rmse: (stats::sum(e.iter().map(|x| x * x)) / reps).sqrt(), bias: stats::mean(&e) }
        })
        .collect();
    let mut coverage = Vec::new();
    let mut k = 0;
    for &method in &config.coverage_estimators {
        for &se_method in &config.variance_methods {
            let defined: Vec<(bool, f64)> = outcomes.iter().filter_map(|o| o.intervals[k]).collect();
            let undefined = outcomes.len() - defined.len();
            let (cov, len) = if defined.is_empty() {
                (None, None)
            } else {
                let d = defined.len() as f64;
                (
                    Some(defined.iter().filter(|c| c.0).count() as f64 / d),
                    Some(stats::sum(defined.iter().map(|c| c.1)) / d),
                )
            };
            coverage.push(CoverageSummary { method, se_method, coverage: cov, mean_ci_length: len, undefined });
            k += 1;
        }
    }
    Ok(SimulationReport { reps: outcomes.len(), tau: spec.tau, config: config.clone(), echo: spec.echo(), estimators, coverage })
}
