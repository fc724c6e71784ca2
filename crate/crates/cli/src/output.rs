//! Output records and the error contract.
//!
//! Exit codes: 0 success, 1 usage, 2 input parse, 3 numerical precondition,
//! 4 solver failure. Field order of every record is its declaration order.

use std::io::Write;
use std::path::Path;

use kms_core::kernels::Kernel;
use kms_core::kms::{DirectionSource, KmsResult};
use kms_core::sdr::ResolvedParams;
use kms_core::KmsError;
use serde::Serialize;
use serde_json::json;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "parse",
            message: message.into(),
        }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            kind: "solver",
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "code": self.code, "kind": self.kind, "message": self.message } })
            .to_string()
    }
}

impl From<KmsError> for CliError {
    fn from(e: KmsError) -> Self {
        let (code, kind) = match &e {
            KmsError::InvalidParameter(_) => (1, "invalid_parameter"),
            KmsError::Parse(_) => (2, "parse"),
            KmsError::Io(_) => (2, "io"),
            KmsError::DuplicatePoints { .. } => (3, "duplicate_points"),
            KmsError::NotPositiveDefinite { .. } => (3, "not_positive_definite"),
            KmsError::SampleSizeMismatch { .. } => (3, "sample_size_mismatch"),
            KmsError::DimensionMismatch { .. } => (3, "dimension_mismatch"),
            KmsError::Degenerate(_) => (3, "degenerate"),
            KmsError::Numerical(_) => (4, "numerical"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 2,
            kind: "io",
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct ProjectorRecord {
    pub a_x: Vec<f64>,
    pub a_y: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct DistanceRecord {
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub kernel: Kernel,
    pub distance: f64,
    pub value: f64,
    pub sdr_value: f64,
    pub sdr_upper_bound: f64,
    pub rank: usize,
    pub rank_before_reduction: usize,
    pub k_bound: usize,
    pub iterations: usize,
    pub reduction_loops: usize,
    pub reduction_pivots: usize,
    pub direction_source: DirectionSource,
    pub params: ResolvedParams,
    pub projector: ProjectorRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl DistanceRecord {
    pub fn new(r: &KmsResult, timings: Option<Timings>) -> Self {
        Self {
            command: "distance",
            seed: r.seed,
            n: r.n,
            d: r.d,
            kernel: r.kernel,
            distance: r.distance,
            value: r.value,
            sdr_value: r.sdr_value,
            sdr_upper_bound: r.diagnostics.sdr_upper_bound,
            rank: r.rank,
            rank_before_reduction: r.diagnostics.rank_before_reduction,
            k_bound: r.k_bound,
            iterations: r.diagnostics.iterations,
            reduction_loops: r.diagnostics.reduction_loops,
            reduction_pivots: r.diagnostics.reduction_pivots,
            direction_source: r.diagnostics.direction_source,
            params: r.diagnostics.params,
            projector: ProjectorRecord {
                a_x: r.projector.a_x.iter().copied().collect(),
                a_y: r.projector.a_y.iter().copied().collect(),
            },
            timings,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TestRecord {
    pub command: &'static str,
    pub mode: &'static str,
    pub seed: u64,
    pub n: usize,
    pub kernel: Kernel,
    pub alpha: f64,
    pub p: f64,
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub p_value: f64,
    pub distance: f64,
    pub rank: usize,
    pub permutation_stats: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// Pretty JSON with a trailing newline, to `out` or stdout.
pub fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::solver(e.to_string()))?;
    text.push('\n');
    emit_text(&text, out)
}

pub fn emit_text(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}
