//! Error-to-exit-code mapping and the sweep CSV schema.

use olar_core::pipeline::PipelineError;
use olar_core::io::IoError;
use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(m) => CliError::Usage(m),
            PipelineError::Io(io) => CliError::Data(io.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

/// One sweep data row. `status` is "ok" or an error tag; failed trials keep
/// their row instead of aborting the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub method: String,
    pub budget: u64,
    pub trial: u32,
    pub relative_error: Option<f64>,
    pub queries_used: u64,
    pub seed: u64,
    pub status: String,
}

pub const CSV_HEADER: &str = "method,budget,trial,relative_error,queries_used,seed,status";
pub const AGG_HEADER: &str = "method,budget,mean_relative_error,std_relative_error,trials_ok";

/// Renders rows plus the aggregate section. Aggregates are the sample mean
/// and the (k−1)-normalized standard deviation over the ok rows, exactly
/// recomputable from the data rows above them.
pub fn render_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let err = r.relative_error.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.budget, r.trial, err, r.queries_used, r.seed, r.status
        ));
    }
    out.push_str("# aggregates\n");
    out.push_str(AGG_HEADER);
    out.push('\n');
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.budget);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (method, budget) in keys {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == method && r.budget == budget && r.status == "ok")
            .filter_map(|r| r.relative_error)
            .collect();
        let k = vals.len();
        let (mean, std) = mean_std(&vals);
        out.push_str(&format!("{method},{budget},{mean},{std},{k}\n"));
    }
    out
}

pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}
