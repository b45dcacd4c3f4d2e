//! Summary documents written by every study.

use serde::Serialize;
use serde_json::{Map, Value};

use fbsde_core::export::SCHEMA_VERSION;

/// One pass/fail line of a summary.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Settings that determine the numbers in a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub problem: String,
    pub study: String,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub degree: usize,
    pub control: f64,
    pub n_x: usize,
    pub x_range: f64,
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub run: RunInfo,
    pub pass: bool,
    pub checks: Vec<CheckRecord>,
    pub results: Map<String, Value>,
    pub artifacts: Vec<String>,
}

/// Collects checks, results and artifact names while a study runs.
#[derive(Debug, Default)]
pub struct Collector {
    pub checks: Vec<CheckRecord>,
    pub results: Map<String, Value>,
    pub artifacts: Vec<String>,
}

impl Collector {
    /// Records `value <= tolerance`.
    pub fn at_most(&mut self, name: &str, value: f64, tolerance: f64) {
        self.record(name, value <= tolerance, value, tolerance, String::new());
    }

    /// Records `value >= -tolerance`.
    pub fn at_least_zero(&mut self, name: &str, value: f64, tolerance: f64) {
        self.record(name, value >= -tolerance, value, tolerance, String::new());
    }

    pub fn record(&mut self, name: &str, pass: bool, value: f64, tolerance: f64, detail: String) {
        self.checks.push(CheckRecord { name: name.into(), pass, value, tolerance, detail });
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.results.insert(key.into(), v);
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.into());
    }

    pub fn finish(self, run: RunInfo) -> Summary {
        let pass = self.checks.iter().all(|c| c.pass);
        Summary { schema: SCHEMA_VERSION, run, pass, checks: self.checks, results: self.results, artifacts: self.artifacts }
    }
}

/// Written instead of a summary when a study aborts.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub schema: u32,
    pub study: String,
    pub problem: String,
    pub kind: String,
    pub message: String,
}

impl ErrorRecord {
    pub fn new(study: &str, problem: &str, err: &anyhow::Error) -> Self {
        let kind = match err.downcast_ref::<fbsde_core::FbsdeError>() {
            Some(e) => error_kind(e),
            None => "other",
        };
        Self {
            schema: SCHEMA_VERSION,
            study: study.into(),
            problem: problem.into(),
            kind: kind.into(),
            message: format!("{err:#}"),
        }
    }
}

fn error_kind(e: &fbsde_core::FbsdeError) -> &'static str {
    use fbsde_core::FbsdeError::*;
    match e {
        Dimension(_) => "dimension",
        InvalidParameter(_) => "invalid_parameter",
        ControlOutOfRegion { .. } => "control_out_of_region",
        NegativeIncrement { .. } => "negative_increment",
        NonFinite { .. } => "non_finite",
        DerivativeMismatch { .. } => "derivative_mismatch",
        NonPositiveDensity { .. } => "non_positive_density",
        IllConditioned { .. } => "ill_conditioned",
        NoConvergence { .. } => "no_convergence",
        OutsideGrid { .. } => "outside_grid",
        MissingInput(_) => "missing_input",
        NonReproducible(_) => "non_reproducible",
        ProblemFile(_) => "problem_file",
        Io(_) => "io",
        Csv(_) => "csv",
        Json(_) => "json",
    }
}
