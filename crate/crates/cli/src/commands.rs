use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use sdid_core::{
    adjusted_outcomes, calibrate_panel, confidence_interval, did, estimate as fit, load_wide, method_weights,
    read_long, run_experiment, sdid, validate_block, variance, AssignmentFit, BlockDesign, CalibrationEcho,
    CalibrationOptions, DgpSpec, EstimatorOptions, ExperimentConfig, InferenceOptions, LongFormat, Method, Panel,
    SeMethod, SimulationReport, WeightSet,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::meta::{digest, file_digest, Meta};
use crate::{CalibrateArgs, EstimateArgs, Format, InputArgs, PipelineArgs, PlotdataArgs, ReportArgs, SimulateArgs, WeightsArgs};

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn input_err(path: &Path) -> impl FnOnce(sdid_core::Error) -> CliError + '_ {
    move |source| CliError::Input { path: path.to_path_buf(), source }
}

fn input_paths(a: &InputArgs) -> Vec<&Path> {
    std::iter::once(a.input.as_path()).chain(a.treatment.as_deref()).collect()
}

/// Loads the panel, collecting `extra` columns when reading long format.
fn load(a: &InputArgs, extra: &[String]) -> Result<(Panel, Option<sdid_core::LongTable>), CliError> {
    if a.wide {
        if !extra.is_empty() {
            return Err(CliError::Invalid("extra columns need long-format input".into()));
        }
        let treatment = a.treatment.as_deref().map(open).transpose()?;
        let panel = load_wide(open(&a.input)?, treatment).map_err(input_err(&a.input))?;
        return Ok((panel, None));
    }
    let format = LongFormat { extra: extra.to_vec(), ..LongFormat::default() };
    let table = read_long(open(&a.input)?, &format).map_err(input_err(&a.input))?;
    Ok((table.panel.clone(), Some(table)))
}

fn load_design(a: &InputArgs) -> Result<BlockDesign, CliError> {
    let (panel, _) = load(a, &[])?;
    validate_block(&panel).map_err(input_err(&a.input))
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match output {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// CSV text preceded by the provenance comment line.
fn csv_text(meta: &Meta, header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut buf = meta.csv_comment().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| CliError::io(Path::new("<buffer>"), e))?;
    }
    Ok(buf)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    meta: Meta,
    method: Method,
    tau_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    se_method: Option<SeMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replicates: Option<usize>,
    n_units: usize,
    n_treated: usize,
    n_periods: usize,
    t_post: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<&'a WeightSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariate_coefs: Option<Vec<(String, f64)>>,
}

pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::Invalid(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    if matches!(a.se_method, Some(SeMethod::Bootstrap | SeMethod::Placebo)) && a.reps < 2 {
        return Err(CliError::Invalid(format!("--reps must be at least 2, got {}", a.reps)));
    }
    if !a.covariates.is_empty() {
        if a.se_method.is_some() {
            return Err(CliError::Invalid("standard errors are not available with covariates".into()));
        }
        if !matches!(a.method, Method::Sdid | Method::Did) {
            return Err(CliError::Invalid(format!("covariates are supported for sdid and did, not {}", a.method)));
        }
    }
    let meta = Meta::new("estimate", a, &input_paths(&a.input), a.seed)?;
    let (panel, table) = load(&a.input, &a.covariates)?;
    let design = validate_block(&panel).map_err(input_err(&a.input.input))?;
    let opts = EstimatorOptions::default();
    let est = if a.covariates.is_empty() {
        fit(&design, a.method, &opts)?
    } else {
        let cov = table
            .expect("covariates imply long format")
            .covariates(&a.covariates)
            .and_then(|c| c.reordered(&design))
            .map_err(input_err(&a.input.input))?;
        match a.method {
            Method::Sdid => sdid(&design, Some(&cov), &opts.solver)?,
            _ => did(&design, Some(&cov))?,
        }
    };
    let var = a
        .se_method
        .map(|m| {
            let inf = InferenceOptions { replicates: a.reps, seed: a.seed, parallel: true, estimator: opts.clone() };
            variance(&design, a.method, m, &inf)
        })
        .transpose()?;
    let ci = var.as_ref().map(|v| confidence_interval(est.tau_hat, v.v_hat, a.alpha)).transpose()?;
    let out = EstimateOutput {
        meta,
        method: a.method,
        tau_hat: est.tau_hat,
        se: var.as_ref().map(|v| v.se()),
        ci_lo: ci.map(|c| c.0),
        ci_hi: ci.map(|c| c.1),
        se_method: a.se_method,
        alpha: a.se_method.map(|_| a.alpha),
        replicates: var.as_ref().map(|v| v.replicates),
        n_units: design.n(),
        n_treated: design.n_tr(),
        n_periods: design.t(),
        t_post: design.t_post(),
        weights: est.weights.as_ref(),
        covariate_coefs: est.covariate_coefs.map(|c| a.covariates.iter().cloned().zip(c).collect()),
    };
    let bytes = match a.format {
        Format::Json => json(&out)?,
        Format::Csv => {
            let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
            let header = strings(&["method", "tau_hat", "se", "ci_lo", "ci_hi", "se_method"]);
            let row = vec![
                out.method.to_string(),
                num(out.tau_hat),
                opt(out.se),
                opt(out.ci_lo),
                opt(out.ci_hi),
                out.se_method.map(|m| m.to_string()).unwrap_or_default(),
            ];
            csv_text(&out.meta, &header, &[row])?
        }
    };
    emit(a.output.as_deref(), &bytes)
}

#[derive(Serialize)]
struct WeightsOutput<'a> {
    meta: Meta,
    method: Method,
    control_units: &'a [String],
    pre_periods: &'a [String],
    #[serde(flatten)]
    weights: &'a WeightSet,
}

pub fn weights(a: &WeightsArgs) -> Result<(), CliError> {
    let meta = Meta::new("weights", a, &input_paths(&a.input), 0)?;
    let design = load_design(&a.input)?;
    let w = method_weights(&design, a.method, &EstimatorOptions::default())?;
    let out = WeightsOutput {
        meta,
        method: a.method,
        control_units: design.control_labels(),
        pre_periods: design.pre_labels(),
        weights: &w,
    };
    emit(a.output.as_deref(), &json(&out)?)
}

fn influence_csv(meta: &Meta, design: &BlockDesign, method: Method) -> Result<Vec<u8>, CliError> {
    let table = adjusted_outcomes(design, method, None, &EstimatorOptions::default().solver)?;
    let rows: Vec<Vec<String>> = table
        .units
        .iter()
        .zip(table.delta.iter().zip(&table.omega))
        .map(|(u, (d, w))| vec![u.clone(), num(*d), num(*w)])
        .collect();
    csv_text(meta, &strings(&["unit", "delta_i", "omega_i"]), &rows)
}

pub fn influence(a: &WeightsArgs) -> Result<(), CliError> {
    let meta = Meta::new("influence", a, &input_paths(&a.input), 0)?;
    let design = load_design(&a.input)?;
    emit(a.output.as_deref(), &influence_csv(&meta, &design, a.method)?)
}

pub fn plotdata(a: &PlotdataArgs) -> Result<(), CliError> {
    let meta = Meta::new("plotdata", a, &input_paths(&a.input), 0)?;
    let design = load_design(&a.input)?;
    let w = method_weights(&design, a.method, &EstimatorOptions::default())?;
    let y = design.y();
    let rows: Vec<Vec<String>> = (0..design.t())
        .map(|t| {
            let treated = (design.n_co()..design.n()).map(|i| y[(i, t)]).sum::<f64>() / design.n_tr() as f64;
            let control: f64 = w.omega.iter().enumerate().map(|(i, wi)| wi * y[(i, t)]).sum();
            let pre = t < design.t_pre();
            let lambda = if pre { w.lambda.get(t).map(|&l| num(l)).unwrap_or_default() } else { String::new() };
            vec![
                design.time_labels()[t].clone(),
                if pre { "pre" } else { "post" }.to_string(),
                num(treated),
                num(control),
                lambda,
            ]
        })
        .collect();
    let trend = csv_text(&meta, &strings(&["time", "period", "treated_mean", "control_weighted", "lambda"]), &rows)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let trend_path = a.out_dir.join("trend.csv");
    fs::write(&trend_path, trend).map_err(|e| CliError::io(&trend_path, e))?;
    let infl_path = a.out_dir.join("influence.csv");
    fs::write(&infl_path, influence_csv(&meta, &design, a.method)?).map_err(|e| CliError::io(&infl_path, e))
}

#[derive(Serialize)]
struct SpecOutput<'a> {
    meta: Meta,
    #[serde(flatten)]
    spec: &'a DgpSpec,
    calibration: CalibrationEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<&'a AssignmentFit>,
}

fn calibrate_spec(input: &Path, assignment: Option<&str>, rank: usize, tau: f64) -> Result<(DgpSpec, Option<AssignmentFit>), CliError> {
    let extra: Vec<String> = assignment.into_iter().map(String::from).collect();
    let format = LongFormat { treated: None, extra, ..LongFormat::default() };
    let table = read_long(open(input)?, &format).map_err(input_err(input))?;
    let d = assignment.map(|col| table.unit_indicator(col)).transpose().map_err(input_err(input))?;
    let cal = calibrate_panel(&table.panel, d.as_deref(), &CalibrationOptions { rank, tau })?;
    if let Some(w) = cal.assignment.as_ref().and_then(|f| f.warning.as_ref()) {
        eprintln!("warning: {w}");
    }
    Ok((cal.spec, cal.assignment))
}

fn spec_json(meta: Meta, spec: &DgpSpec, assignment: Option<&AssignmentFit>) -> Result<Vec<u8>, CliError> {
    json(&SpecOutput { meta, spec, calibration: spec.echo(), assignment })
}

pub fn calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let meta = Meta::new("calibrate", a, &[&a.input], 0)?;
    let (spec, fit) = calibrate_spec(&a.input, a.assignment.as_deref(), a.rank, a.tau)?;
    emit(a.output.as_deref(), &spec_json(meta, &spec, fit.as_ref())?)
}

#[derive(Serialize, Deserialize)]
struct ResultsFile {
    meta: serde_json::Value,
    name: String,
    report: SimulationReport,
}

/// One simulation setting, shared by `simulate` flags and pipeline configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub name: String,
    pub ntr: usize,
    pub tpost: usize,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_methods")]
    pub estimators: Vec<Method>,
    #[serde(default)]
    pub se_methods: Vec<SeMethod>,
    #[serde(default = "sdid_only")]
    pub coverage_estimators: Vec<Method>,
    #[serde(default = "default_inference_reps")]
    pub inference_reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub random_assignment: bool,
}

fn all_methods() -> Vec<Method> {
    vec![Method::Sdid, Method::Sc, Method::Did, Method::Mc]
}

fn sdid_only() -> Vec<Method> {
    vec![Method::Sdid]
}

fn default_inference_reps() -> usize {
    200
}

fn default_alpha() -> f64 {
    0.05
}

impl Setting {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Invalid(format!("setting `{}`: {m}", self.name)));
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if self.estimators.is_empty() {
            return bad("no estimators".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !self.se_methods.is_empty() && self.inference_reps < 2 {
            return bad("inference_reps must be at least 2".into());
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return bad("name must be non-empty and use only letters, digits, `_` or `-`".into());
        }
        Ok(())
    }

    fn run(&self, spec: &DgpSpec) -> Result<SimulationReport, CliError> {
        let spec = if self.random_assignment { spec.with_uniform_assignment() } else { spec.clone() };
        let config = ExperimentConfig {
            n_tr: self.ntr,
            t_post: self.tpost,
            reps: self.reps,
            seed: self.seed,
            estimators: self.estimators.clone(),
            variance_methods: self.se_methods.clone(),
            coverage_estimators: self.coverage_estimators.clone(),
            inference_reps: self.inference_reps,
            alpha: self.alpha,
        };
        Ok(run_experiment(&spec, &config, &EstimatorOptions::default())?)
    }
}

fn read_spec(path: &Path) -> Result<DgpSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let spec: DgpSpec = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(input_err(path))?;
    Ok(spec)
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let setting = Setting {
        name: a.name.clone(),
        ntr: a.ntr,
        tpost: a.tpost,
        reps: a.reps,
        seed: a.seed,
        estimators: a.estimators.clone(),
        se_methods: a.se_methods.clone(),
        coverage_estimators: a.coverage_estimators.clone(),
        inference_reps: a.inference_reps,
        alpha: a.alpha,
        random_assignment: a.random_assignment,
    };
    setting.validate()?;
    let meta = Meta::new("simulate", a, &[&a.spec], a.seed)?;
    let spec = read_spec(&a.spec)?;
    let report = setting.run(&spec)?;
    let out = ResultsFile { meta: serde_json::to_value(meta)?, name: setting.name, report };
    emit(a.output.as_deref(), &json(&out)?)
}

fn report_csv(meta: &Meta, results: &[ResultsFile]) -> Result<Vec<u8>, CliError> {
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for r in results {
        let (h, row) = r.report.csv_row(&r.name);
        match &header {
            Some(prev) if *prev != h => {
                return Err(CliError::Invalid(format!("result `{}` has different columns from the first result", r.name)))
            }
            Some(_) => {}
            None => header = Some(h),
        }
        rows.push(row);
    }
    csv_text(meta, &header.unwrap_or_default(), &rows)
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let results = a
        .results
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<ResultsFile>(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let paths: Vec<&Path> = a.results.iter().map(PathBuf::as_path).collect();
    let seed = results.first().map_or(0, |r| r.report.config.seed);
    let meta = Meta::new("report", a, &paths, seed)?;
    emit(a.output.as_deref(), &report_csv(&meta, &results)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineConfig {
    /// Long-format panel, relative to the config file.
    input: PathBuf,
    #[serde(default)]
    assignment: Option<String>,
    #[serde(default = "default_rank")]
    rank: usize,
    #[serde(default)]
    tau: f64,
    settings: Vec<Setting>,
}

fn default_rank() -> usize {
    4
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct SeedEntry<'a> {
    name: &'a str,
    seed: u64,
    reps: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    meta: Meta,
    config: &'a PipelineConfig,
    input_sha256: String,
    seeds: Vec<SeedEntry<'a>>,
    outputs: Vec<ManifestEntry>,
}

pub fn pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let config: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", a.config.display())))?;
    if config.settings.is_empty() {
        return Err(CliError::Invalid("pipeline config has no settings".into()));
    }
    let mut names = BTreeSet::new();
    for s in &config.settings {
        s.validate()?;
        if !names.insert(s.name.as_str()) || s.name == "spec" || s.name == "manifest" {
            return Err(CliError::Invalid(format!("setting name `{}` is repeated or reserved", s.name)));
        }
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let input = base.join(&config.input);
    let seed = config.settings[0].seed;
    let meta = Meta::new("pipeline", &config, &[&input], seed)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let mut outputs = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
        let path = a.out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        outputs.push(ManifestEntry { file: name.to_string(), sha256: digest(bytes) });
        Ok(())
    };

    let (spec, fit) = calibrate_spec(&input, config.assignment.as_deref(), config.rank, config.tau)?;
    write("spec.json", &spec_json(meta.clone(), &spec, fit.as_ref())?)?;
    let mut results = Vec::new();
    for s in &config.settings {
        let report = s.run(&spec)?;
        let file = ResultsFile {
            meta: serde_json::to_value(Meta { seed: s.seed, ..meta.clone() })?,
            name: s.name.clone(),
            report,
        };
        write(&format!("{}.json", s.name), &json(&file)?)?;
        results.push(file);
    }
    write("report.csv", &report_csv(&meta, &results)?)?;

    let manifest = Manifest {
        input_sha256: file_digest(&input)?,
        seeds: config.settings.iter().map(|s| SeedEntry { name: &s.name, seed: s.seed, reps: s.reps }).collect(),
        meta,
        config: &config,
        outputs,
    };
    let path = a.out_dir.join("manifest.json");
    fs::write(&path, json(&manifest)?).map_err(|e| CliError::io(&path, e))
}
