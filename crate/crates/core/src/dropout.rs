//! Training-set optimization: drop every sample whose total influence on the
//! validation reference is positive.
//!
//! Scoring is single-pass. All influences come from the same fixed model and
//! removals never feed back into later scores.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::influence::{resolve_reference, score_training_set, IhvpStrategy, LabeledSamples, ReferenceMode};
use crate::model::GradEngine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Drop,
}

/// Drop iff the influence is strictly positive.
pub fn threshold_policy(influence: f64) -> Decision {
    if influence > 0.0 {
        Decision::Drop
    } else {
        Decision::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub influence: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_in: usize,
    pub n_kept: usize,
    pub n_dropped: usize,
    pub strategy: IhvpStrategy,
    pub reference: ReferenceMode,
    pub n_reference: usize,
    pub damping: f64,
    pub seed: Option<u64>,
    pub checkpoint_digest: String,
    /// Always true: influences are computed once against the fixed model.
    pub single_pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub summary: ReportSummary,
    pub records: Vec<SampleRecord>,
}

impl InfluenceReport {
    /// JSON-lines: the summary, then one record per training sample.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.summary).expect("summary serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty influence report".into()))?;
        let summary: ReportSummary =
            serde_json::from_str(first).map_err(|e| Error::InvalidConfig(format!("report line 1: {e}")))?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::InvalidConfig(format!("report line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<SampleRecord>>>()?;
        Ok(InfluenceReport { summary, records })
    }

    pub fn dropped_ids(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.decision == Decision::Drop)
            .map(|r| r.id)
            .collect()
    }

    /// Decisions agree with the threshold rule and counts add up.
    pub fn is_consistent(&self) -> bool {
        let dropped = self
            .records
            .iter()
            .filter(|r| r.decision == Decision::Drop)
            .count();
        self.records.len() == self.summary.n_in
            && dropped == self.summary.n_dropped
            && self.summary.n_in == self.summary.n_kept + self.summary.n_dropped
            && self
                .records
                .iter()
                .all(|r| threshold_policy(r.influence) == r.decision)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutOptions {
    /// Abort when more than this fraction would be dropped.
    pub max_drop_fraction: f64,
    pub seed: Option<u64>,
    pub checkpoint_digest: String,
}

impl Default for DropoutOptions {
    fn default() -> Self {
        DropoutOptions {
            max_drop_fraction: 0.5,
            seed: None,
            checkpoint_digest: String::new(),
        }
    }
}

/// Score `train` with the pre-trained `engine` and remove positive-influence
/// samples. Kept samples retain their ids and relative order.
pub fn data_dropout<V: LabeledSamples + ?Sized>(
    engine: &GradEngine,
    train: &Dataset,
    val: &V,
    strategy: &IhvpStrategy,
    mode: ReferenceMode,
    options: &DropoutOptions,
) -> Result<(Dataset, InfluenceReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if train.dim() != engine.spec().input_dim {
        return Err(Error::DimensionMismatch {
            what: "training features vs model input",
            expected: engine.spec().input_dim,
            got: train.dim(),
        });
    }
    if train.num_classes() != engine.spec().num_classes {
        return Err(Error::DimensionMismatch {
            what: "training classes vs model classes",
            expected: engine.spec().num_classes,
            got: train.num_classes(),
        });
    }
    let reference = resolve_reference(val, mode)?;
    let scores = score_training_set(engine, train, val, &reference, strategy)?;

    let records: Vec<SampleRecord> = scores
        .values
        .iter()
        .enumerate()
        .map(|(i, &influence)| SampleRecord {
            id: train.id(i),
            influence,
            decision: threshold_policy(influence),
        })
        .collect();
    let keep: Vec<usize> = (0..train.len())
        .filter(|&i| records[i].decision == Decision::Keep)
        .collect();
    let n_dropped = train.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::AllDropped(train.len()));
    }
    if n_dropped as f64 > options.max_drop_fraction * train.len() as f64 {
        return Err(Error::DropFractionExceeded {
            dropped: n_dropped,
            total: train.len(),
            max_fraction: options.max_drop_fraction,
        });
    }

    let report = InfluenceReport {
        summary: ReportSummary {
            n_in: train.len(),
            n_kept: keep.len(),
            n_dropped,
            strategy: strategy.clone(),
            reference: mode,
            n_reference: reference.indices.len(),
            damping: strategy.damping,
            seed: options.seed,
            checkpoint_digest: options.checkpoint_digest.clone(),
            single_pass: true,
        },
        records,
    };
    Ok((train.subset(&keep), report))
}
