//! Point estimators: SDID, DID, SC and the weighted two-way fixed-effects regression
//! they share.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::{mc_estimate, McOptions};
use crate::panel::{BlockDesign, CovariateSet};
use crate::weights::{sc_weight_set, sdid_weights, SolverOptions, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sdid,
    Did,
    Sc,
    Mc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sdid, Method::Did, Method::Sc, Method::Mc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sdid => "sdid",
            Method::Did => "did",
            Method::Sc => "sc",
            Method::Mc => "mc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}` (expected sdid, did, sc or mc)")))
    }
}

/// Fixed effects of the weighted regression, normalized to weighted mean zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub mu: f64,
    /// Unit effects in design order; empty when the regression has no unit effects.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub tau_hat: f64,
    pub weights: Option<WeightSet>,
    pub fixed_effects: Option<FixedEffects>,
    pub covariate_coefs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct EstimatorOptions {
    pub solver: SolverOptions,
    pub mc: McOptions,
}

/// Row and column cell weights `a_i`, `b_t` implied by a weight set. An empty
/// `lambda` selects the synthetic-control regression: no unit effects and equal
/// weight on every period.
fn margins(design: &BlockDesign, weights: &WeightSet) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    if weights.omega.len() != design.n_co() {
        return Err(Error::Dimension(format!(
            "{} unit weights for {} control units",
            weights.omega.len(),
            design.n_co()
        )));
    }
    let mut a = weights.omega.clone();
    a.extend(std::iter::repeat_n(1.0 / design.n_tr() as f64, design.n_tr()));
    if weights.lambda.is_empty() {
        return Ok((a, vec![1.0; design.t()], false));
    }
    if weights.lambda.len() != design.t_pre() {
        return Err(Error::Dimension(format!(
            "{} time weights for {} pre-treatment periods",
            weights.lambda.len(),
            design.t_pre()
        )));
    }
    let mut b = weights.lambda.clone();
    b.extend(std::iter::repeat_n(1.0 / design.t_post() as f64, design.t_post()));
    Ok((a, b, true))
}

struct Demeaner<'a> {
    a: &'a [f64],
    b: &'a [f64],
    sa: f64,
    sb: f64,
    unit_effects: bool,
}

impl Demeaner<'_> {
    fn row_means(&self, m: &DMatrix<f64>) -> Vec<f64> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|t| self.b[t] * m[(i, t)]).sum::<f64>() / self.sb).collect()
    }

    fn col_means(&self, m: &DMatrix<f64>) -> Vec<f64> {
        (0..m.ncols()).map(|t| (0..m.nrows()).map(|i| self.a[i] * m[(i, t)]).sum::<f64>() / self.sa).collect()
    }

    fn grand_mean(&self, m: &DMatrix<f64>) -> f64 {
        self.col_means(m).iter().zip(self.b).map(|(c, b)| c * b).sum::<f64>() / self.sb
    }

    /// Residual of the weighted projection onto `μ + α_i + β_t` (or `μ + β_t`).
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let cols = self.col_means(m);
        if self.unit_effects {
            let rows = self.row_means(m);
            let g = self.grand_mean(m);
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, t| m[(i, t)] - rows[i] - cols[t] + g)
        } else {
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, t| m[(i, t)] - cols[t])
        }
    }

    fn inner(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for t in 0..x.ncols() {
            let mut col = 0.0;
            for i in 0..x.nrows() {
                col += self.a[i] * x[(i, t)] * y[(i, t)];
            }
            s += self.b[t] * col;
        }
        s
    }
}

/// Weighted two-way fixed-effects regression of the outcome on the treatment
/// indicator with cell weights `a_i·b_t`.
///
/// `covariates` must be in design (controls-first) order; see
/// [`CovariateSet::reordered`].
pub fn weighted_twfe_regress(
    design: &BlockDesign,
    weights: &WeightSet,
    covariates: Option<&CovariateSet>,
) -> Result<(f64, FixedEffects, Option<Vec<f64>>)> {
    let (a, b, unit_effects) = margins(design, weights)?;
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if !(sa > 0.0 && sb > 0.0) {
        return Err(Error::InvalidInput("cell weights have zero total".into()));
    }
    let dm = Demeaner { a: &a, b: &b, sa, sb, unit_effects };
    let w = design.treatment().map(f64::from);
    let y = design.y();

    let mut regressors = vec![w.clone()];
    if let Some(cov) = covariates {
        for x in cov.values() {
            if x.shape() != y.shape() {
                return Err(Error::Dimension(format!("covariate is {:?}, panel is {:?}", x.shape(), y.shape())));
            }
            regressors.push(x.clone());
        }
    }
    let tilde: Vec<DMatrix<f64>> = regressors.iter().map(|r| dm.apply(r)).collect();
    let y_tilde = dm.apply(y);
    let p = tilde.len();
    let gram = DMatrix::from_fn(p, p, |i, j| dm.inner(&tilde[i], &tilde[j]));
    let rhs = DVector::from_fn(p, |i, _| dm.inner(&tilde[i], &y_tilde));
    let theta = if p == 1 {
        if gram[(0, 0)] <= 0.0 {
            return Err(Error::InvalidInput("treatment indicator has no weighted variation".into()));
        }
        DVector::from_element(1, rhs[0] / gram[(0, 0)])
    } else {
        solve_normal_equations(&gram, &rhs, covariates.map(|c| c.names()).unwrap_or_default())?
    };

    let mut resid = y.clone();
    for (r, coef) in regressors.iter().zip(theta.iter()) {
        resid -= r * *coef;
    }
    let mu = dm.grand_mean(&resid);
    let beta = dm.col_means(&resid).into_iter().map(|c| c - mu).collect();
    let alpha = if unit_effects { dm.row_means(&resid).into_iter().map(|r| r - mu).collect() } else { Vec::new() };
    let coefs = (p > 1).then(|| theta.iter().skip(1).copied().collect());
    Ok((theta[0], FixedEffects { mu, alpha, beta }, coefs))
}

fn solve_normal_equations(gram: &DMatrix<f64>, rhs: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let p = gram.nrows();
    // Scale to unit diagonal so the rank test is relative.
    let d: Vec<f64> = (0..p).map(|i| gram[(i, i)].max(0.0).sqrt()).collect();
    if let Some(i) = d.iter().position(|&v| v <= 1e-12) {
        let what = if i == 0 { "treatment".to_string() } else { names[i - 1].clone() };
        return Err(Error::Collinear(format!("`{what}` has no variation after removing fixed effects")));
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (d[i] * d[j]));
    let eig = scaled.clone().symmetric_eigen();
    if eig.eigenvalues.min() < 1e-10 {
        return Err(Error::Collinear(format!(
            "covariates {:?} are linearly dependent with the treatment or each other",
            names
        )));
    }
    let srhs = DVector::from_fn(p, |i, _| rhs[i] / d[i]);
    let sol = scaled.cholesky().ok_or_else(|| Error::Collinear("normal equations are not positive definite".into()))?.solve(&srhs);
    Ok(DVector::from_fn(p, |i, _| sol[i] / d[i]))
}

/// `ω_trᵀ Y_tr,post λ_post − ω_coᵀ Y_co,post λ_post − ω_trᵀ Y_tr,pre λ_pre + ω_coᵀ Y_co,pre λ_pre`.
/// With an empty `lambda` this is the synthetic-control contrast of post-period means.
pub fn weighted_double_difference(design: &BlockDesign, weights: &WeightSet) -> Result<f64> {
    let table = influence_from_weights(design, weights)?;
    Ok(table.delta_treated - table.delta.iter().zip(&table.omega).map(|(d, w)| d * w).sum::<f64>())
}

/// Per-control adjusted outcomes and their contributions to the estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceTable {
    pub units: Vec<String>,
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub influence: Vec<f64>,
    pub delta_treated: f64,
}

impl InfluenceTable {
    /// `δ̂_N − Σ ωᵢ δ̂ᵢ`.
    pub fn tau(&self) -> f64 {
        self.influence.iter().sum()
    }
}

fn influence_from_weights(design: &BlockDesign, weights: &WeightSet) -> Result<InfluenceTable> {
    let (a, b, unit_effects) = margins(design, weights)?;
    let y = design.y();
    let t_pre = design.t_pre();
    let contrast = |i: usize| -> f64 {
        let post = (t_pre..design.t()).map(|t| y[(i, t)]).sum::<f64>() / design.t_post() as f64;
        if unit_effects {
            post - (0..t_pre).map(|t| b[t] * y[(i, t)]).sum::<f64>()
        } else {
            post
        }
    };
    let delta: Vec<f64> = (0..design.n_co()).map(contrast).collect();
    let delta_treated = (design.n_co()..design.n()).map(contrast).sum::<f64>() / design.n_tr() as f64;
    let omega = a[..design.n_co()].to_vec();
    let influence = delta.iter().zip(&omega).map(|(d, w)| w * (delta_treated - d)).collect();
    Ok(InfluenceTable { units: design.control_labels().to_vec(), delta, omega, influence, delta_treated })
}

fn did_weights(design: &BlockDesign) -> WeightSet {
    WeightSet {
        omega0: 0.0,
        omega: vec![1.0 / design.n_co() as f64; design.n_co()],
        lambda0: 0.0,
        lambda: vec![1.0 / design.t_pre() as f64; design.t_pre()],
        zeta: 0.0,
        gap: 0.0,
    }
}

/// Adjusted outcomes for SDID, DID or SC. Weights are fitted when not supplied.
pub fn adjusted_outcomes(
    design: &BlockDesign,
    method: Method,
    weights: Option<&WeightSet>,
    options: &SolverOptions,
) -> Result<InfluenceTable> {
    let fitted;
    let w = match (method, weights) {
        (Method::Mc, _) => return Err(Error::InvalidInput("matrix completion has no unit weights".into())),
        (Method::Did, _) => {
            fitted = did_weights(design);
            &fitted
        }
        (_, Some(w)) => w,
        (Method::Sdid, None) => {
            fitted = sdid_weights(design, options)?;
            &fitted
        }
        (Method::Sc, None) => {
            fitted = sc_weight_set(design, options)?;
            &fitted
        }
    };
    influence_from_weights(design, w)
}

pub fn sdid(design: &BlockDesign, covariates: Option<&CovariateSet>, options: &SolverOptions) -> Result<Estimate> {
    if design.t_pre() < 2 {
        return Err(Error::InsufficientPrePeriods { needed: 2, have: design.t_pre() });
    }
    let weights = sdid_weights(design, options)?;
    from_regression(Method::Sdid, design, weights, covariates, true)
}

pub fn did(design: &BlockDesign, covariates: Option<&CovariateSet>) -> Result<Estimate> {
    from_regression(Method::Did, design, did_weights(design), covariates, false)
}

pub fn sc(design: &BlockDesign, options: &SolverOptions) -> Result<Estimate> {
    let weights = sc_weight_set(design, options)?;
    from_regression(Method::Sc, design, weights, None, true)
}

fn from_regression(
    method: Method,
    design: &BlockDesign,
    weights: WeightSet,
    covariates: Option<&CovariateSet>,
    keep_weights: bool,
) -> Result<Estimate> {
    let (tau_hat, fe, coefs) = weighted_twfe_regress(design, &weights, covariates)?;
    Ok(Estimate {
        method,
        tau_hat,
        weights: keep_weights.then_some(weights),
        fixed_effects: Some(fe),
        covariate_coefs: coefs,
    })
}

/// Runs `method` on a design without covariates.
pub fn estimate(design: &BlockDesign, method: Method, options: &EstimatorOptions) -> Result<Estimate> {
    match method {
        Method::Sdid => sdid(design, None, &options.solver),
        Method::Did => did(design, None),
        Method::Sc => sc(design, &options.solver),
        Method::Mc => mc_estimate(design, &options.mc),
    }
}

/// Point estimate only, skipping the fixed effects. Used inside resampling loops.
pub fn tau_hat(design: &BlockDesign, method: Method, options: &EstimatorOptions) -> Result<f64> {
    match method {
        Method::Sdid => weighted_double_difference(design, &sdid_weights(design, &options.solver)?),
        Method::Did => weighted_double_difference(design, &did_weights(design)),
        Method::Sc => weighted_double_difference(design, &sc_weight_set(design, &options.solver)?),
        Method::Mc => mc_estimate(design, &options.mc).map(|e| e.tau_hat),
    }
}
