//! Variance estimation for block designs: unit bootstrap, fixed-weight jackknife,
//! and placebo reassignment among controls.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{tau_hat, EstimatorOptions, Method};
use crate::panel::BlockDesign;
use crate::rng::{derive_seed, stream_rng};
use crate::stats;
use crate::weights::{sc_weight_set, sdid_weights, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    Bootstrap,
    Jackknife,
    Placebo,
}

impl SeMethod {
    pub const ALL: [SeMethod; 3] = [SeMethod::Bootstrap, SeMethod::Jackknife, SeMethod::Placebo];

    pub fn as_str(self) -> &'static str {
        match self {
            SeMethod::Bootstrap => "bootstrap",
            SeMethod::Jackknife => "jackknife",
            SeMethod::Placebo => "placebo",
        }
    }
}

impl fmt::Display for SeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SeMethod::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown se method `{s}` (expected bootstrap, jackknife or placebo)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub v_hat: f64,
    pub method: SeMethod,
    /// Replicates used (leave-one-out fits for the jackknife).
    pub replicates: usize,
    pub seed: u64,
}

impl VarianceEstimate {
    pub fn se(&self) -> f64 {
        self.v_hat.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Run replicates on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub estimator: EstimatorOptions,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { replicates: 200, seed: 0, parallel: true, estimator: EstimatorOptions::default() }
    }
}

const MAX_REDRAWS: usize = 100;

fn run_replicates<F>(count: usize, parallel: bool, f: F) -> Result<Vec<f64>>
where
    F: Fn(u64) -> Result<f64> + Sync + Send,
{
    if parallel {
        (0..count as u64).into_par_iter().map(&f).collect()
    } else {
        (0..count as u64).map(f).collect()
    }
}

fn replicate_options(options: &InferenceOptions, domain: &str, b: u64) -> EstimatorOptions {
    let mut o = options.estimator.clone();
    o.mc.seed = derive_seed(options.seed, domain, b);
    o
}

/// Unit bootstrap: resample rows with replacement, redrawing resamples with no
/// treated or no control units, and take the variance of the re-fitted estimates.
pub fn bootstrap_variance(design: &BlockDesign, method: Method, options: &InferenceOptions) -> Result<VarianceEstimate> {
    if options.replicates < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 replicates, got {}", options.replicates)));
    }
    let n = design.n();
    let n_co = design.n_co();
    let draws = run_replicates(options.replicates, options.parallel, |b| {
        let mut rng = stream_rng(options.seed, "bootstrap", b);
        for _ in 0..MAX_REDRAWS {
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let (controls, treated): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&r| r < n_co);
            if controls.is_empty() || treated.is_empty() {
                continue;
            }
            let resampled = design.resample(&controls, &treated)?;
            return tau_hat(&resampled, method, &replicate_options(options, "bootstrap", b));
        }
        Err(Error::NotDefined(format!(
            "bootstrap replicate {b} drew only treated or only control units {MAX_REDRAWS} times"
        )))
    })?;
    Ok(VarianceEstimate { v_hat: stats::variance(&draws), method: SeMethod::Bootstrap, replicates: draws.len(), seed: options.seed })
}

/// Placebo variance: repeatedly assign `design.n_tr()` of the controls to a fake
/// treatment and take the variance of the resulting estimates.
pub fn placebo_variance(design: &BlockDesign, method: Method, options: &InferenceOptions) -> Result<VarianceEstimate> {
    if options.replicates < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 replicates, got {}", options.replicates)));
    }
    let n_co = design.n_co();
    let n_tr = design.n_tr();
    if n_co <= n_tr {
        return Err(Error::NotDefined(format!(
            "placebo needs more controls than treated units (have {n_co} controls, {n_tr} treated)"
        )));
    }
    let draws = run_replicates(options.replicates, options.parallel, |b| {
        let mut rng = stream_rng(options.seed, "placebo", b);
        let picked = sample(&mut rng, n_co, n_co).into_vec();
        let (treated, controls) = picked.split_at(n_tr);
        let placebo = design.resample(controls, treated)?;
        tau_hat(&placebo, method, &replicate_options(options, "placebo", b))
    })?;
    Ok(VarianceEstimate { v_hat: stats::variance(&draws), method: SeMethod::Placebo, replicates: draws.len(), seed: options.seed })
}

/// Leave-one-unit-out estimates with the weights held fixed and renormalized.
///
/// Returns one estimate per unit in design order.
pub fn jackknife_replicates(design: &BlockDesign, weights: &WeightSet) -> Result<Vec<f64>> {
    let n_co = design.n_co();
    let n_tr = design.n_tr();
    if n_tr < 2 {
        return Err(Error::NotDefined("the jackknife needs at least two treated units".into()));
    }
    if weights.omega.len() != n_co {
        return Err(Error::Dimension(format!("{} unit weights for {} controls", weights.omega.len(), n_co)));
    }
    let y = design.y();
    let t_pre = design.t_pre();
    let contrast = |i: usize| -> f64 {
        let post = (t_pre..design.t()).map(|t| y[(i, t)]).sum::<f64>() / design.t_post() as f64;
        if weights.lambda.is_empty() {
            post
        } else {
            post - (0..t_pre).map(|t| weights.lambda[t] * y[(i, t)]).sum::<f64>()
        }
    };
    let delta: Vec<f64> = (0..design.n()).map(contrast).collect();
    let mu_co = stats::sum((0..n_co).map(|i| weights.omega[i] * delta[i]));
    let mu_tr = stats::mean(&delta[n_co..]);
    let mut out = Vec::with_capacity(design.n());
    for (i, &w) in weights.omega.iter().enumerate() {
        if w >= 1.0 - 1e-12 {
            return Err(Error::NotDefined(format!(
                "control unit `{}` carries all of the weight, so leaving it out empties the control group",
                design.unit_labels()[i]
            )));
        }
        out.push(mu_tr - (mu_co - w * delta[i]) / (1.0 - w));
    }
    for &d in &delta[n_co..] {
        let tr = (mu_tr * n_tr as f64 - d) / (n_tr - 1) as f64;
        out.push(tr - mu_co);
    }
    Ok(out)
}

/// Jackknife variance `(N−1)/N · Σ (τ̂^(−i) − τ̂)²` with fixed weights.
pub fn jackknife_variance(design: &BlockDesign, weights: &WeightSet, tau_hat: f64) -> Result<VarianceEstimate> {
    let loo = jackknife_replicates(design, weights)?;
    let n = loo.len() as f64;
    let v_hat = (n - 1.0) / n * stats::sum(loo.iter().map(|t| (t - tau_hat).powi(2)));
    Ok(VarianceEstimate { v_hat, method: SeMethod::Jackknife, replicates: loo.len(), seed: 0 })
}

/// Weights the jackknife holds fixed for `method`.
pub fn method_weights(design: &BlockDesign, method: Method, options: &EstimatorOptions) -> Result<WeightSet> {
    match method {
        Method::Sdid => sdid_weights(design, &options.solver),
        Method::Sc => sc_weight_set(design, &options.solver),
        Method::Did => Ok(WeightSet {
            omega0: 0.0,
            omega: vec![1.0 / design.n_co() as f64; design.n_co()],
            lambda0: 0.0,
            lambda: vec![1.0 / design.t_pre() as f64; design.t_pre()],
            zeta: 0.0,
            gap: 0.0,
        }),
        Method::Mc => Err(Error::NotDefined("matrix completion has no unit or time weights".into())),
    }
}

/// Variance of `method` by `se_method`.
pub fn variance(design: &BlockDesign, method: Method, se_method: SeMethod, options: &InferenceOptions) -> Result<VarianceEstimate> {
    match se_method {
        SeMethod::Bootstrap => bootstrap_variance(design, method, options),
        SeMethod::Placebo => placebo_variance(design, method, options),
        SeMethod::Jackknife => {
            let weights = method_weights(design, method, &options.estimator)?;
            let tau = crate::estimators::weighted_double_difference(design, &weights)?;
            jackknife_variance(design, &weights, tau)
        }
    }
}

/// `τ̂ ± z_{α/2} √V̂`.
pub fn confidence_interval(tau_hat: f64, v_hat: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(v_hat >= 0.0) {
        return Err(Error::InvalidInput(format!("variance must be nonnegative, got {v_hat}")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let half = z * v_hat.sqrt();
    Ok((tau_hat - half, tau_hat + half))
}

/// How well the time weights fitted on controls carry over to the treated units:
/// `T_post / N_tr · Σ_i (λ̂₀ + Σ_t λ̂_t Y_it − Ȳ_i,post)²` over treated `i`.
pub fn lambda_generalization_diagnostic(design: &BlockDesign, weights: &WeightSet) -> Result<f64> {
    if weights.lambda.len() != design.t_pre() {
        return Err(Error::Dimension(format!(
            "{} time weights for {} pre-treatment periods",
            weights.lambda.len(),
            design.t_pre()
        )));
    }
    let y = design.y();
    let t_pre = design.t_pre();
    let ss = stats::sum((design.n_co()..design.n()).map(|i| {
        let pre = (0..t_pre).map(|t| weights.lambda[t] * y[(i, t)]).sum::<f64>();
        let post = (t_pre..design.t()).map(|t| y[(i, t)]).sum::<f64>() / design.t_post() as f64;
        (weights.lambda0 + pre - post).powi(2)
    }));
    Ok(design.t_post() as f64 / design.n_tr() as f64 * ss)
}
