//! Accuracy metrics over paired predicted/true heart rates, and ablation
//! batches that toggle pipeline stages.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{estimate, PipelineConfig, SourceInput, StageToggles};

pub const DEFAULT_WITHIN_BPM: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no results")]
    Empty,
    #[error("source {0}: truth must be > 0")]
    NonPositiveTruth(String),
    #[error("duplicate source id {0}")]
    DuplicateSource(String),
    #[error("pearson correlation undefined: {0}")]
    PearsonUndefined(&'static str),
    #[error("bin edges must be strictly increasing")]
    InvalidEdges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEntry {
    pub source_id: String,
    pub predicted_bpm: f64,
    pub truth_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairedResults {
    entries: Vec<PairedEntry>,
}

impl PairedResults {
    pub fn new(entries: Vec<PairedEntry>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !(e.truth_bpm > 0.0) {
                return Err(EvalError::NonPositiveTruth(e.source_id.clone()));
            }
            if !seen.insert(e.source_id.as_str()) {
                return Err(EvalError::DuplicateSource(e.source_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, EvalError> {
        Self::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, &(p, t))| PairedEntry { source_id: i.to_string(), predicted_bpm: p, truth_bpm: t })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[PairedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.predicted_bpm - e.truth_bpm)
    }
}

/// Root mean square of the percentage relative error.
pub fn rmse_pct(results: &PairedResults) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let ms = results
        .entries
        .iter()
        .map(|e| ((e.predicted_bpm - e.truth_bpm) / e.truth_bpm * 100.0).powi(2))
        .sum::<f64>()
        / results.len() as f64;
    Ok(ms.sqrt())
}

pub fn mae(results: &PairedResults) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(results.errors().map(f64::abs).sum::<f64>() / results.len() as f64)
}

/// Percentage of absolute errors strictly below `threshold` bpm.
pub fn pct_within(results: &PairedResults, threshold: f64) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = results.errors().filter(|e| e.abs() < threshold).count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

pub fn pearson(results: &PairedResults) -> Result<f64, EvalError> {
    let n = results.len();
    if n < 2 {
        return Err(EvalError::PearsonUndefined("fewer than two pairs"));
    }
    let nf = n as f64;
    let mp = results.entries.iter().map(|e| e.predicted_bpm).sum::<f64>() / nf;
    let mt = results.entries.iter().map(|e| e.truth_bpm).sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for e in &results.entries {
        let (dx, dy) = (e.predicted_bpm - mp, e.truth_bpm - mt);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(EvalError::PearsonUndefined("predictions are constant"));
    }
    if syy == 0.0 {
        return Err(EvalError::PearsonUndefined("ground truth is constant"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub rmse_pct: f64,
    pub mae_bpm: f64,
    pub pct_within_5bpm: f64,
    /// `None` when the correlation is undefined (n < 2 or a constant series).
    pub pearson_r: Option<f64>,
    pub n: usize,
}

pub fn metric_suite(results: &PairedResults) -> Result<MetricSuite, EvalError> {
    Ok(MetricSuite {
        rmse_pct: rmse_pct(results)?,
        mae_bpm: mae(results)?,
        pct_within_5bpm: pct_within(results, DEFAULT_WITHIN_BPM)?,
        pearson_r: pearson(results).ok(),
        n: results.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// `counts[i]` covers `[edges[i], edges[i + 1])`.
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

/// Histogram of signed errors `predicted - truth`.
pub fn error_histogram(results: &PairedResults, bin_edges: &[f64]) -> Result<Histogram, EvalError> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EvalError::InvalidEdges);
    }
    let mut h = Histogram {
        edges: bin_edges.to_vec(),
        counts: vec![0; bin_edges.len() - 1],
        underflow: 0,
        overflow: 0,
    };
    let last = bin_edges[bin_edges.len() - 1];
    for err in results.errors() {
        if err < bin_edges[0] {
            h.underflow += 1;
        } else if err >= last {
            h.overflow += 1;
        } else {
            // partition_point gives the first edge > err.
            let i = bin_edges.partition_point(|&e| e <= err) - 1;
            h.counts[i] += 1;
        }
    }
    Ok(h)
}

/// Evenly spaced edges `lo, lo + width, ..., hi`.
pub fn uniform_edges(lo: f64, hi: f64, width: f64) -> Vec<f64> {
    let n = ((hi - lo) / width).round() as usize;
    (0..=n).map(|i| lo + i as f64 * width).collect()
}

/// One batch source with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalSource {
    pub source_id: String,
    pub input: SourceInput,
    pub truth_bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationConfig {
    /// Tracking and temporal filtering only.
    Baseline,
    WithRecovery,
    WithRectify,
    AllSteps,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 4] =
        [AblationConfig::Baseline, AblationConfig::WithRecovery, AblationConfig::WithRectify, AblationConfig::AllSteps];

    pub fn label(self) -> &'static str {
        match self {
            AblationConfig::Baseline => "baseline",
            AblationConfig::WithRecovery => "recovery",
            AblationConfig::WithRectify => "rectify",
            AblationConfig::AllSteps => "all_steps",
        }
    }

    pub fn toggles(self) -> StageToggles {
        match self {
            AblationConfig::Baseline => StageToggles { recovery: false, rectify: false },
            AblationConfig::WithRecovery => StageToggles { recovery: true, rectify: false },
            AblationConfig::WithRectify => StageToggles { recovery: false, rectify: true },
            AblationConfig::AllSteps => StageToggles { recovery: true, rectify: true },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub results: PairedResults,
    /// `None` when every source failed.
    pub metrics: Option<MetricSuite>,
    pub failures: Vec<SourceFailure>,
}

/// Runs every source through each stage configuration. Per-source failures
/// are collected, not propagated. Sources are processed in parallel on the
/// current rayon pool and merged in `source_id` order.
pub fn ablation_run(
    sources: &[EvalSource],
    base: &PipelineConfig,
    configs: &[AblationConfig],
) -> Result<Vec<AblationRow>, EvalError> {
    if sources.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<&EvalSource> = sources.iter().collect();
    order.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    if let Some(w) = order.windows(2).find(|w| w[0].source_id == w[1].source_id) {
        return Err(EvalError::DuplicateSource(w[0].source_id.clone()));
    }

    configs
        .iter()
        .map(|&config| {
            let cfg = PipelineConfig { stages: config.toggles(), ..base.clone() };
            let outcomes: Vec<Result<f64, String>> = order
                .par_iter()
                .map(|s| estimate(&s.input, &cfg).map(|e| e.report.average_bpm).map_err(|e| e.to_string()))
                .collect();
            let mut entries = Vec::new();
            let mut failures = Vec::new();
            for (s, outcome) in order.iter().zip(outcomes) {
                match outcome {
                    Ok(bpm) => entries.push(PairedEntry {
                        source_id: s.source_id.clone(),
                        predicted_bpm: bpm,
                        truth_bpm: s.truth_bpm,
                    }),
                    Err(error) => failures.push(SourceFailure { source_id: s.source_id.clone(), error }),
                }
            }
            let results = PairedResults::new(entries)?;
            let metrics = if results.is_empty() { None } else { Some(metric_suite(&results)?) };
            Ok(AblationRow { config, results, metrics, failures })
        })
        .collect()
}
