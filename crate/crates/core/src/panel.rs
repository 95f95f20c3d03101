//! Balanced panels, CSV ingestion, and block-design validation.
//!
//! A [`Panel`] stores outcomes and treatment indicators as `N × T` matrices with
//! units in sorted label order and times in sorted label order. [`validate_block`]
//! checks that the treatment pattern is a single block (a fixed set of units, all
//! treated from a common period onwards) and produces a [`BlockDesign`] whose
//! outcome matrix is reordered controls-first. Everything downstream works on the
//! four block views of that matrix.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};

/// Outcome and treatment matrices for a balanced panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    outcomes: DMatrix<f64>,
    treatment: DMatrix<u8>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl Panel {
    pub fn new(
        outcomes: DMatrix<f64>,
        treatment: DMatrix<u8>,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        if outcomes.shape() != treatment.shape() {
            return Err(Error::Dimension(format!(
                "outcomes are {:?} but treatment is {:?}",
                outcomes.shape(),
                treatment.shape()
            )));
        }
        if unit_labels.len() != outcomes.nrows() || time_labels.len() != outcomes.ncols() {
            return Err(Error::Dimension(format!(
                "{} unit labels and {} time labels for a {}x{} panel",
                unit_labels.len(),
                time_labels.len(),
                outcomes.nrows(),
                outcomes.ncols()
            )));
        }
        if let Some(bad) = treatment.iter().find(|&&w| w > 1) {
            return Err(Error::InvalidInput(format!("treatment value {bad} is not 0/1")));
        }
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("outcomes must be finite".into()));
        }
        Ok(Self { outcomes, treatment, unit_labels, time_labels })
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treatment(&self) -> &DMatrix<u8> {
        &self.treatment
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn unit_index(&self, label: &str) -> Option<usize> {
        self.unit_labels.iter().position(|u| u == label)
    }

    /// Same units, times and treatment with a different outcome matrix.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        Self::new(
            outcomes,
            self.treatment.clone(),
            self.unit_labels.clone(),
            self.time_labels.clone(),
        )
    }
}

/// Time-varying covariates `X_it ∈ R^p`, stored as one `N × T` matrix per covariate,
/// in the row order of the [`Panel`] they were loaded with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateSet {
    names: Vec<String>,
    values: Vec<DMatrix<f64>>,
}

impl CovariateSet {
    pub fn new(names: Vec<String>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::Dimension("covariate names and matrices differ in count".into()));
        }
        if let Some(first) = values.first() {
            if values.iter().any(|m| m.shape() != first.shape()) {
                return Err(Error::Dimension("covariate matrices differ in shape".into()));
            }
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    fn check_shape(&self, n: usize, t: usize) -> Result<()> {
        match self.values.first() {
            Some(m) if m.shape() != (n, t) => Err(Error::Dimension(format!(
                "covariates are {:?} but the panel is {n}x{t}",
                m.shape()
            ))),
            _ => Ok(()),
        }
    }

    /// Reorders rows into the controls-first order of `design`.
    pub fn reordered(&self, design: &BlockDesign) -> Result<Self> {
        self.check_shape(design.n(), design.t())?;
        let values = self
            .values
            .iter()
            .map(|m| DMatrix::from_fn(design.n(), design.t(), |r, c| m[(design.unit_order[r], c)]))
            .collect();
        Ok(Self { names: self.names.clone(), values })
    }
}

/// Column names for long-format input.
#[derive(Debug, Clone)]
pub struct LongFormat {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    /// `None` reads every cell as untreated.
    pub treated: Option<String>,
    /// Extra numeric columns to collect as `N × T` matrices.
    pub extra: Vec<String>,
}

impl Default for LongFormat {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treated: Some("treated".into()),
            extra: Vec::new(),
        }
    }
}

/// A panel together with any extra columns requested through [`LongFormat::extra`].
#[derive(Debug, Clone)]
pub struct LongTable {
    pub panel: Panel,
    pub extras: Vec<(String, DMatrix<f64>)>,
}

impl LongTable {
    pub fn extra(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Collects the named extra columns into a covariate set.
    pub fn covariates(&self, names: &[String]) -> Result<CovariateSet> {
        let values = names
            .iter()
            .map(|n| {
                self.extra(n)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("no column `{n}` was loaded")))
            })
            .collect::<Result<Vec<_>>>()?;
        CovariateSet::new(names.to_vec(), values)
    }

    /// A per-unit indicator taken as the maximum of a 0/1 column over time.
    pub fn unit_indicator(&self, name: &str) -> Result<Vec<u8>> {
        let m = self
            .extra(name)
            .ok_or_else(|| Error::InvalidInput(format!("no column `{name}` was loaded")))?;
        m.row_iter()
            .map(|row| {
                let v = row.max();
                if v == 0.0 || v == 1.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::InvalidInput(format!("column `{name}` is not 0/1")))
                }
            })
            .collect()
    }
}

/// Reads a long-format panel with header `unit,time,outcome,treated`.
pub fn load_panel<R: Read>(reader: R) -> Result<Panel> {
    read_long(reader, &LongFormat::default()).map(|t| t.panel)
}

/// Reads a long-format panel with configurable column names.
pub fn read_long<R: Read>(reader: R, format: &LongFormat) -> Result<LongTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let unit_col = col(&format.unit)?;
    let time_col = col(&format.time)?;
    let outcome_col = col(&format.outcome)?;
    let treated_col = format.treated.as_deref().map(col).transpose()?;
    let extra_cols = format.extra.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    struct Row {
        unit: String,
        time: String,
        outcome: f64,
        treated: u8,
        extras: Vec<f64>,
    }
    let mut rows = Vec::new();
    let mut seen: HashMap<(String, String), u64> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let unit = field(unit_col).to_string();
        let time = field(time_col).to_string();
        if unit.is_empty() || time.is_empty() {
            return Err(Error::Parse { line, message: "empty unit or time label".into() });
        }
        let outcome = parse_number(field(outcome_col), line, &format.outcome)?;
        let treated = match treated_col {
            Some(c) => parse_treated(field(c), line)?,
            None => 0,
        };
        let extras = extra_cols
            .iter()
            .zip(&format.extra)
            .map(|(&c, name)| parse_number(field(c), line, name))
            .collect::<Result<Vec<_>>>()?;
        if seen.insert((unit.clone(), time.clone()), line).is_some() {
            return Err(Error::DuplicateCell { unit, time, line });
        }
        rows.push(Row { unit, time, outcome, treated, extras });
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data rows".into() });
    }

    let units = sorted_labels(rows.iter().map(|r| r.unit.as_str()));
    let times = sorted_labels(rows.iter().map(|r| r.time.as_str()));
    let unit_pos: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let time_pos: HashMap<&str, usize> = times.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let (n, t) = (units.len(), times.len());

    let mut filled = vec![false; n * t];
    let mut outcomes = DMatrix::zeros(n, t);
    let mut treatment = DMatrix::zeros(n, t);
    let mut extras = vec![DMatrix::zeros(n, t); format.extra.len()];
    for r in &rows {
        let (i, j) = (unit_pos[r.unit.as_str()], time_pos[r.time.as_str()]);
        filled[i * t + j] = true;
        outcomes[(i, j)] = r.outcome;
        treatment[(i, j)] = r.treated;
        for (m, &v) in extras.iter_mut().zip(&r.extras) {
            m[(i, j)] = v;
        }
    }
    if let Some(k) = filled.iter().position(|f| !f) {
        return Err(Error::MissingCell { unit: units[k / t].clone(), time: times[k % t].clone() });
    }
    let panel = Panel::new(outcomes, treatment, units, times)?;
    Ok(LongTable { panel, extras: format.extra.iter().cloned().zip(extras).collect() })
}

/// Reads a wide unit-by-time outcome matrix (`unit,<t1>,<t2>,...`) and an optional
/// treatment matrix with the same layout.
pub fn load_wide<R: Read, S: Read>(outcomes: R, treatment: Option<S>) -> Result<Panel> {
    let (units, times, y) = read_wide_matrix(outcomes, |s, line| parse_number(s, line, "outcome"))?;
    let w = match treatment {
        Some(tr) => {
            let (tu, tt, w) = read_wide_matrix(tr, |s, line| parse_treated(s, line).map(f64::from))?;
            if tu != units || tt != times {
                return Err(Error::Dimension(
                    "treatment file does not have the same units and times as the outcome file".into(),
                ));
            }
            w.map(|v| v as u8)
        }
        None => DMatrix::zeros(units.len(), times.len()),
    };
    Panel::new(y, w, units, times)
}

fn read_wide_matrix<R: Read>(
    reader: R,
    parse: impl Fn(&str, u64) -> Result<f64>,
) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse { line: 1, message: "wide format needs a unit column and at least one time column".into() });
    }
    let raw_times: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut by_unit: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", headers.len(), record.len()) });
        }
        let unit = record[0].to_string();
        let values = record.iter().skip(1).map(|s| parse(s, line)).collect::<Result<Vec<_>>>()?;
        if by_unit.insert(unit.clone(), values).is_some() {
            return Err(Error::DuplicateCell { unit, time: "*".into(), line });
        }
    }
    let times = sorted_labels(raw_times.iter().map(String::as_str));
    if times.len() != raw_times.len() {
        return Err(Error::Parse { line: 1, message: "duplicate time column".into() });
    }
    let order: Vec<usize> = times.iter().map(|t| raw_times.iter().position(|r| r == t).unwrap()).collect();
    let units = sorted_labels(by_unit.keys().map(String::as_str));
    let y = DMatrix::from_fn(units.len(), times.len(), |i, j| by_unit[&units[i]][order[j]]);
    Ok((units, times, y))
}

/// Writes a panel back out in long format, units then times in sorted order.
pub fn write_long<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["unit", "time", "outcome", "treated"])?;
    for (i, unit) in panel.unit_labels.iter().enumerate() {
        for (j, time) in panel.time_labels.iter().enumerate() {
            let y = panel.outcomes[(i, j)].to_string();
            let w = panel.treatment[(i, j)].to_string();
            wtr.write_record([unit.as_str(), time.as_str(), y.as_str(), w.as_str()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn parse_number(s: &str, line: u64, column: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse { line, message: format!("non-numeric {column} value `{s}`") }),
    }
}

fn parse_treated(s: &str, line: u64) -> Result<u8> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(1),
        "0" | "false" => Ok(0),
        other => match other.parse::<f64>() {
            Ok(v) if v == 0.0 => Ok(0),
            Ok(v) if v == 1.0 => Ok(1),
            _ => Err(Error::Parse { line, message: format!("treated value `{s}` is not 0/1") }),
        },
    }
}

/// Distinct labels sorted numerically when every label parses as a number,
/// lexicographically otherwise (ISO dates sort correctly either way).
fn sorted_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut distinct: Vec<String> = labels.map(str::to_string).collect();
    distinct.sort();
    distinct.dedup();
    let numeric: Option<Vec<f64>> = distinct.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut paired: Vec<(f64, String)> = keys.into_iter().zip(distinct).collect();
        paired.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1)));
        paired.into_iter().map(|(_, s)| s).collect()
    } else {
        distinct
    }
}

/// A validated block-treatment design with outcomes reordered controls-first.
///
/// Times keep the sorted order of the panel: under block assignment the treated
/// periods are always the last `t_post` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDesign {
    y: DMatrix<f64>,
    n_co: usize,
    n_tr: usize,
    t_pre: usize,
    t_post: usize,
    unit_order: Vec<usize>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl BlockDesign {
    /// Builds a design from a controls-first outcome matrix whose last `n_tr` rows
    /// are treated in the last `t_post` columns.
    pub fn from_matrix(y: DMatrix<f64>, n_tr: usize, t_post: usize) -> Result<Self> {
        let (n, t) = y.shape();
        let unit_labels = (0..n).map(|i| format!("u{i}")).collect();
        let time_labels = (0..t).map(|j| j.to_string()).collect();
        Self::with_labels(y, n_tr, t_post, unit_labels, time_labels)
    }

    pub fn with_labels(
        y: DMatrix<f64>,
        n_tr: usize,
        t_post: usize,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        let (n, t) = y.shape();
        if n_tr == 0 || n_tr >= n {
            return Err(Error::UnsupportedDesign(format!("need 1 <= n_tr < N, got n_tr={n_tr}, N={n}")));
        }
        if t_post == 0 || t_post >= t {
            return Err(Error::UnsupportedDesign(format!("need 1 <= t_post < T, got t_post={t_post}, T={t}")));
        }
        if unit_labels.len() != n || time_labels.len() != t {
            return Err(Error::Dimension("label count does not match the outcome matrix".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("outcomes must be finite".into()));
        }
        Ok(Self {
            y,
            n_co: n - n_tr,
            n_tr,
            t_pre: t - t_post,
            t_post,
            unit_order: (0..n).collect(),
            unit_labels,
            time_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.n_co + self.n_tr
    }
    pub fn t(&self) -> usize {
        self.t_pre + self.t_post
    }
    pub fn n_co(&self) -> usize {
        self.n_co
    }
    pub fn n_tr(&self) -> usize {
        self.n_tr
    }
    pub fn t_pre(&self) -> usize {
        self.t_pre
    }
    pub fn t_post(&self) -> usize {
        self.t_post
    }

    /// Reordered outcomes, controls first.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// `unit_order()[k]` is the panel row placed at position `k`.
    pub fn unit_order(&self) -> &[usize] {
        &self.unit_order
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn control_labels(&self) -> &[String] {
        &self.unit_labels[..self.n_co]
    }

    pub fn treated_labels(&self) -> &[String] {
        &self.unit_labels[self.n_co..]
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn pre_labels(&self) -> &[String] {
        &self.time_labels[..self.t_pre]
    }

    pub fn y_co_pre(&self) -> DMatrixView<'_, f64> {
        self.y.view((0, 0), (self.n_co, self.t_pre))
    }
    pub fn y_co_post(&self) -> DMatrixView<'_, f64> {
        self.y.view((0, self.t_pre), (self.n_co, self.t_post))
    }
    pub fn y_tr_pre(&self) -> DMatrixView<'_, f64> {
        self.y.view((self.n_co, 0), (self.n_tr, self.t_pre))
    }
    pub fn y_tr_post(&self) -> DMatrixView<'_, f64> {
        self.y.view((self.n_co, self.t_pre), (self.n_tr, self.t_post))
    }

    pub fn is_treated_cell(&self, i: usize, t: usize) -> bool {
        i >= self.n_co && t >= self.t_pre
    }

    /// The same design with new (reordered) outcomes.
    pub fn with_outcomes(&self, y: DMatrix<f64>) -> Result<Self> {
        if y.shape() != self.y.shape() {
            return Err(Error::Dimension(format!("expected {:?}, got {:?}", self.y.shape(), y.shape())));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// A new design built from a subset of rows: `controls` become the control
    /// group and `treated` the treated group, in the given order. Rows may repeat.
    pub fn resample(&self, controls: &[usize], treated: &[usize]) -> Result<Self> {
        let rows: Vec<usize> = controls.iter().chain(treated).copied().collect();
        let y = DMatrix::from_fn(rows.len(), self.t(), |r, c| self.y[(rows[r], c)]);
        let labels = rows.iter().map(|&r| self.unit_labels[r].clone()).collect();
        let mut design = Self::with_labels(y, treated.len(), self.t_post, labels, self.time_labels.clone())?;
        design.unit_order = rows.iter().map(|&r| self.unit_order[r]).collect();
        Ok(design)
    }

    /// The treatment indicator matrix in design order.
    pub fn treatment(&self) -> DMatrix<u8> {
        DMatrix::from_fn(self.n(), self.t(), |i, t| u8::from(self.is_treated_cell(i, t)))
    }

    /// Rebuilds a [`Panel`] in design order.
    pub fn to_panel(&self) -> Result<Panel> {
        Panel::new(self.y.clone(), self.treatment(), self.unit_labels.clone(), self.time_labels.clone())
    }
}

/// Checks that `panel` has block treatment assignment and reorders it controls-first.
pub fn validate_block(panel: &Panel) -> Result<BlockDesign> {
    let (n, t) = (panel.n_units(), panel.n_periods());
    let w = panel.treatment();
    let mut controls = Vec::new();
    let mut treated = Vec::new();
    let mut adoption: Option<(usize, usize)> = None;
    for i in 0..n {
        let Some(first) = (0..t).find(|&j| w[(i, j)] == 1) else {
            controls.push(i);
            continue;
        };
        if let Some(j) = (first..t).find(|&j| w[(i, j)] == 0) {
            return Err(Error::UnsupportedDesign(format!(
                "treatment for unit `{}` switches off at time `{}`",
                panel.unit_labels[i], panel.time_labels[j]
            )));
        }
        match adoption {
            None => adoption = Some((i, first)),
            Some((other, start)) if start != first => {
                return Err(Error::UnsupportedDesign(format!(
                    "staggered adoption: unit `{}` is first treated at `{}` but unit `{}` at `{}`",
                    panel.unit_labels[other], panel.time_labels[start], panel.unit_labels[i], panel.time_labels[first]
                )));
            }
            Some(_) => {}
        }
        treated.push(i);
    }
    let Some((_, start)) = adoption else {
        return Err(Error::UnsupportedDesign("no treated units".into()));
    };
    if controls.is_empty() {
        return Err(Error::UnsupportedDesign("no never-treated control units".into()));
    }
    if start == 0 {
        return Err(Error::UnsupportedDesign(format!(
            "treatment starts in the first period `{}`, leaving no pre-treatment periods",
            panel.time_labels[0]
        )));
    }
    let order: Vec<usize> = controls.iter().chain(&treated).copied().collect();
    let y = DMatrix::from_fn(n, t, |r, c| panel.outcomes[(order[r], c)]);
    Ok(BlockDesign {
        y,
        n_co: controls.len(),
        n_tr: treated.len(),
        t_pre: start,
        t_post: t - start,
        unit_labels: order.iter().map(|&i| panel.unit_labels[i].clone()).collect(),
        unit_order: order,
        time_labels: panel.time_labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: &[&str]) -> String {
        let mut s = String::from("unit,time,outcome,treated\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn single_cell_panel() {
        let p = load_panel(csv(&["a,1,2.5,0"]).as_bytes()).unwrap();
        assert_eq!((p.n_units(), p.n_periods()), (1, 1));
        assert_eq!(p.outcomes()[(0, 0)], 2.5);
    }

    #[test]
    fn duplicate_cell_is_rejected() {
        let err = load_panel(csv(&["u1,t1,1,0", "u1,t2,1,0", "u1,t1,2,0", "u2,t1,1,0"]).as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DuplicateCell { ref unit, ref time, line: 4 } if unit == "u1" && time == "t1"), "{err}");
    }

    #[test]
    fn missing_cell_is_rejected() {
        let err = load_panel(csv(&["a,1,1,0", "a,2,1,0", "b,1,1,0"]).as_bytes()).unwrap_err();
        assert!(matches!(err, Error::MissingCell { ref unit, ref time } if unit == "b" && time == "2"));
    }

    #[test]
    fn bad_fields_carry_line_numbers() {
        let err = load_panel(csv(&["a,1,1,0", "a,2,abc,0"]).as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load_panel(csv(&["a,1,1,2"]).as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn treated_column_is_coerced() {
        let p = load_panel(csv(&["a,1,1,TRUE", "a,2,1,0.0", "b,1,1,false", "b,2,1,1.0"]).as_bytes()).unwrap();
        assert_eq!(p.treatment().as_slice(), &[1, 0, 0, 1]);
    }

    #[test]
    fn numeric_times_sort_numerically() {
        let p = load_panel(csv(&["a,10,1,0", "a,9,2,0", "a,100,3,0"]).as_bytes()).unwrap();
        assert_eq!(p.time_labels(), ["9", "10", "100"]);
        assert_eq!(p.outcomes().row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0, 3.0]);
    }

    #[test]
    fn wide_format_matches_long() {
        let y = "unit,2001,2000\nb,4,3\na,2,1\n";
        let w = "unit,2001,2000\nb,1,0\na,0,0\n";
        let wide = load_wide(y.as_bytes(), Some(w.as_bytes())).unwrap();
        let long = load_panel(csv(&["a,2000,1,0", "a,2001,2,0", "b,2000,3,0", "b,2001,4,1"]).as_bytes()).unwrap();
        assert_eq!(wide, long);
    }

    fn block_panel(w: &[&[u8]]) -> Panel {
        let n = w.len();
        let t = w[0].len();
        Panel::new(
            DMatrix::from_fn(n, t, |i, j| (i * t + j) as f64),
            DMatrix::from_fn(n, t, |i, j| w[i][j]),
            (0..n).map(|i| format!("u{i}")).collect(),
            (1..=t).map(|j| j.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn block_design_reorders_controls_first() {
        let p = block_panel(&[&[0, 0, 1, 1], &[0, 0, 0, 0], &[0, 0, 0, 0]]);
        let d = validate_block(&p).unwrap();
        assert_eq!((d.n_co(), d.n_tr(), d.t_pre(), d.t_post()), (2, 1, 2, 2));
        assert_eq!(d.unit_order(), &[1, 2, 0]);
        assert_eq!(d.y_tr_post()[(0, 0)], 2.0);
        assert_eq!(d.treatment(), DMatrix::from_fn(3, 4, |i, j| u8::from(i == 2 && j >= 2)));
    }

    #[test]
    fn all_zero_treatment_is_rejected() {
        let p = block_panel(&[&[0, 0], &[0, 0]]);
        assert!(matches!(validate_block(&p), Err(Error::UnsupportedDesign(_))));
    }

    #[test]
    fn staggered_adoption_names_units() {
        let p = block_panel(&[&[0, 0, 1, 1, 1, 1], &[0, 0, 0, 0, 1, 1], &[0; 6]]);
        let msg = validate_block(&p).unwrap_err().to_string();
        assert!(msg.contains("staggered") && msg.contains("u0") && msg.contains("u1") && msg.contains("`5`"), "{msg}");
    }

    #[test]
    fn reversible_treatment_is_rejected() {
        let p = block_panel(&[&[0, 1, 0], &[0, 0, 0]]);
        let msg = validate_block(&p).unwrap_err().to_string();
        assert!(msg.contains("switches off") && msg.contains("u0"), "{msg}");
    }

    #[test]
    fn treatment_from_first_period_is_rejected() {
        let p = block_panel(&[&[1, 1], &[0, 0]]);
        assert!(validate_block(&p).is_err());
    }

    #[test]
    fn resample_tracks_panel_rows() {
        let p = block_panel(&[&[0, 0, 1], &[0, 0, 0], &[0, 0, 0]]);
        let d = validate_block(&p).unwrap();
        let r = d.resample(&[1, 1], &[2]).unwrap();
        assert_eq!(r.unit_order(), &[2, 2, 0]);
        assert_eq!(r.n_tr(), 1);
        assert_eq!(r.y().row(0), d.y().row(1));
    }
}
