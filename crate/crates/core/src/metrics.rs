// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text-quality metrics and experiment reports.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shannon entropy (bits) of the empirical n-gram distribution.
pub fn ngram_entropy<T: Eq + Hash>(tokens: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be positive".into()));
    }
    if tokens.len() < n {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} tokens is shorter than n = {n}",
            tokens.len()
        )));
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let total = (tokens.len() - n + 1) as f64;
    // Sorted so the sum does not depend on hash order.
    let mut counts: Vec<usize> = counts.into_values().collect();
    counts.sort_unstable();
    let h = counts
        .into_iter()
        .map(|c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluencyScore {
    pub bigram_entropy: f64,
    pub trigram_entropy: f64,
    pub weighted: f64,
}

pub const DEFAULT_W2: f64 = 2.0 / 3.0;
pub const DEFAULT_W3: f64 = 1.0 / 3.0;

/// `w2·H₂ + w3·H₃` with `w2 + w3 = 1`.
pub fn fluency<T: Eq + Hash>(tokens: &[T], w2: f64, w3: f64) -> Result<FluencyScore> {
    if tokens.len() < 3 {
        return Err(Error::InvalidArgument("fluency needs at least 3 tokens".into()));
    }
    if w2 < 0.0 || w3 < 0.0 || ((w2 + w3) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("fluency weights must be non-negative and sum to 1".into()));
    }
    let bigram_entropy = ngram_entropy(tokens, 2)?;
    let trigram_entropy = ngram_entropy(tokens, 3)?;
    Ok(FluencyScore {
        bigram_entropy,
        trigram_entropy,
        weighted: w2 * bigram_entropy + w3 * trigram_entropy,
    })
}

/// One row of a comparison table.
///
/// `judge_score` is always empty; it keeps the column layout of tables that
/// carry an external quality judgement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    /// Swept parameter name, empty for single runs.
    pub parameter: String,
    pub value: Option<f64>,
    pub n_problems: usize,
    pub accuracy: f64,
    pub stepwise_rate: f64,
    pub fluency: f64,
    pub perplexity: f64,
    pub mean_intervened_tokens: f64,
    pub judge_score: Option<f64>,
    pub traces: String,
    /// Set when the run failed; the metric columns are then meaningless.
    pub error: Option<String>,
}

impl ExperimentReport {
    pub fn failed(method: &str, parameter: &str, value: Option<f64>, error: &Error) -> Self {
        Self {
            method: method.into(),
            parameter: parameter.into(),
            value,
            n_problems: 0,
            accuracy: 0.0,
            stepwise_rate: 0.0,
            fluency: 0.0,
            perplexity: 0.0,
            mean_intervened_tokens: 0.0,
            judge_score: None,
            traces: String::new(),
            error: Some(error.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Column order of report CSVs.
pub const REPORT_COLUMNS: [&str; 12] = [
    "method",
    "parameter",
    "value",
    "n_problems",
    "accuracy",
    "stepwise_rate",
    "fluency",
    "perplexity",
    "mean_intervened_tokens",
    "judge_score",
    "traces",
    "error",
];

pub fn write_reports<W: Write>(w: W, reports: &[ExperimentReport]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(REPORT_COLUMNS)?;
    for r in reports {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_reports<R: Read>(r: R) -> Result<Vec<ExperimentReport>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::InvalidArgument(format!("unexpected report header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Runs `run` once per grid value. Failures become error rows; the sweep
/// continues.
pub fn run_sweep<F>(method: &str, parameter: &str, grid: &[f64], mut run: F) -> Result<Vec<ExperimentReport>>
where
    F: FnMut(f64) -> Result<ExperimentReport>,
{
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    Ok(grid
        .iter()
        .map(|&v| match run(v) {
            Ok(mut r) => {
                r.parameter = parameter.into();
                r.value = Some(v);
                r
            }
            Err(e) => ExperimentReport::failed(method, parameter, Some(v), &e),
        })
        .collect())
}
