//! Subcommand implementations. Each reads the configuration, writes its
//! artifacts under `out_dir`, and returns what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ibtl_core::data::{load_csv, write_csv, Dataset};
use ibtl_core::dropout::InfluenceReport;
use ibtl_core::influence::{resolve_reference, score_training_set};
use ibtl_core::model::{GradEngine, ParameterVector};
use ibtl_core::transfer::{evaluate, Evaluation, TrainingHistory};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::loo::{LooOracle, NewtonOptions};
use crate::pipeline::{
    dataset_digest, ensure_dir, prepare_data, pretrain, resolve_strategy, run_dropout, run_finetune,
    run_pipeline, write_text, Comparison, ARMS,
};
use crate::{CliError, CliResult};

pub const PRETRAINED: &str = "pretrained.ckpt";
pub const PRETRAIN_HISTORY: &str = "pretrain_history.json";
pub const REPORT: &str = "influence_report.jsonl";
pub const OPTIMIZED: &str = "target_optimized.csv";
pub const LOO_DELTAS: &str = "loo_deltas.jsonl";
pub const COMPARISON: &str = "comparison.json";

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_history(path: &Path, h: &TrainingHistory) -> CliResult<()> {
    let mut text = h.to_json();
    text.push('\n');
    write_text(path, &text)
}

fn write_dataset(ds: &Dataset, path: &Path) -> CliResult<()> {
    Ok(write_csv(ds, path)?)
}

/// Writes the prepared datasets as CSV, plus the flipped ids.
pub fn cmd_generate(cfg: &PipelineConfig) -> CliResult<Vec<PathBuf>> {
    ensure_dir(&cfg.out_dir)?;
    let data = prepare_data(cfg)?;
    let mut written = Vec::new();
    for (name, ds) in [
        ("source_train.csv", &data.source_train),
        ("source_val.csv", &data.source_val),
        ("target_train.csv", &data.target_train),
        ("target_val.csv", &data.target_val),
        ("test.csv", &data.test),
    ] {
        let p = out(cfg, name);
        write_dataset(ds, &p)?;
        written.push(p);
    }
    let p = out(cfg, "flipped_ids.json");
    let ids: Vec<u64> = data.flipped.iter().copied().collect();
    write_text(
        &p,
        &format!("{}\n", serde_json::to_string(&ids).expect("ids serialize")),
    )?;
    written.push(p);
    Ok(written)
}

/// Source-domain training from Xavier initialization.
pub fn cmd_pretrain(cfg: &PipelineConfig) -> CliResult<(Checkpoint, TrainingHistory)> {
    ensure_dir(&cfg.out_dir)?;
    let data = prepare_data(cfg)?;
    let (ck, history) = pretrain(cfg, &data)?;
    ck.write(&out(cfg, PRETRAINED))?;
    write_history(&out(cfg, PRETRAIN_HISTORY), &history)?;
    Ok((ck, history))
}

fn checkpoint_or_default(cfg: &PipelineConfig, path: Option<&Path>) -> CliResult<Checkpoint> {
    let p = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out(cfg, PRETRAINED));
    Checkpoint::read(&p)
}

/// Influence scoring of the target training set and removal of
/// positive-influence samples.
pub fn cmd_dropout(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> CliResult<(Dataset, InfluenceReport)> {
    ensure_dir(&cfg.out_dir)?;
    let pre = checkpoint_or_default(cfg, checkpoint)?;
    let data = prepare_data(cfg)?;
    let (optimized, report) = run_dropout(cfg, &pre, &data.target_train, &data.target_val)?;
    write_text(&out(cfg, REPORT), &report.to_jsonl())?;
    write_dataset(&optimized, &out(cfg, OPTIMIZED))?;
    Ok((optimized, report))
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneArgs {
    /// Pre-trained checkpoint; `out_dir/pretrained.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
    pub from_scratch: bool,
    /// Training CSV; the configured target training set when absent.
    pub train: Option<PathBuf>,
    pub name: String,
}

pub fn cmd_finetune(cfg: &PipelineConfig, args: &FinetuneArgs) -> CliResult<(Checkpoint, TrainingHistory)> {
    ensure_dir(&cfg.out_dir)?;
    let data = prepare_data(cfg)?;
    let train = match &args.train {
        Some(p) => load_csv(p, Some(data.target_train.num_classes()))?,
        None => data.target_train.clone(),
    };
    let spec = data.spec(cfg);
    let pre = if args.from_scratch {
        None
    } else {
        Some(checkpoint_or_default(cfg, args.checkpoint.as_deref())?)
    };
    let (ck, history) = run_finetune(cfg, &spec, pre.as_ref(), &train, &data.target_val, &args.name)?;
    ck.write(&out(cfg, &format!("{}.ckpt", args.name)))?;
    write_history(&out(cfg, &format!("{}_history.json", args.name)), &history)?;
    Ok((ck, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoint_digest: String,
    pub data_digest: String,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Test-set metrics of `checkpoint`, or on `data` when given.
pub fn cmd_eval(cfg: &PipelineConfig, checkpoint: &Path, data: Option<&Path>) -> CliResult<Metrics> {
    let ck = Checkpoint::read(checkpoint)?;
    let ds = match data {
        Some(p) => load_csv(p, Some(ck.spec.num_classes))?,
        None => prepare_data(cfg)?.test,
    };
    let evaluation = evaluate(&ck.spec, &ck.params, &ds)?;
    Ok(Metrics {
        checkpoint_digest: ck.digest(),
        data_digest: dataset_digest(&ds),
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LooTarget {
    All,
    Ids(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRecord {
    pub id: u64,
    /// Actual `Σ_j [L(θ) − L(θ′)]` over the validation reference.
    pub delta: f64,
    /// Influence estimate at the same optimum; `n·delta` approximates it.
    pub influence: Option<f64>,
    pub newton_iterations: usize,
    pub grad_norm: f64,
}

/// Exact leave-one-out retraining on the target training set.
///
/// The model is the configured architecture, which must be convex. Newton
/// starts from `checkpoint` when given, otherwise from zero.
pub fn cmd_loo_oracle(
    cfg: &PipelineConfig,
    target: &LooTarget,
    checkpoint: Option<&Path>,
) -> CliResult<Vec<LooRecord>> {
    ensure_dir(&cfg.out_dir)?;
    let data = prepare_data(cfg)?;
    let spec = data.spec(cfg);
    let start = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            if ck.spec != spec {
                return Err(CliError::config(
                    p,
                    "checkpoint architecture differs from the configured model",
                ));
            }
            ck.params
        }
        None => ParameterVector::zeros(&spec)?,
    };
    let reference = resolve_reference(&data.target_val, cfg.influence.ref_mode)?;
    let oracle = LooOracle::new(
        &spec,
        &start,
        &data.target_train,
        &data.target_val,
        reference.clone(),
        NewtonOptions::default(),
    )?;
    let engine = GradEngine::new(spec, oracle.optimum().clone())?;
    let strategy = resolve_strategy(cfg, &engine, &data.target_train)?;
    let scores = score_training_set(
        &engine,
        &data.target_train,
        &data.target_val,
        &reference,
        &strategy,
    )?;
    let ids: Vec<u64> = match target {
        LooTarget::All => data.target_train.ids().to_vec(),
        LooTarget::Ids(ids) => ids.clone(),
    };
    let mut records = Vec::with_capacity(ids.len());
    let mut text = String::new();
    for id in ids {
        let d = oracle.delta(id)?;
        let influence = data.target_train.position_of(id).map(|i| scores.values[i]);
        let rec = LooRecord {
            id,
            delta: d.delta,
            influence,
            newton_iterations: d.newton_iterations,
            grad_norm: d.grad_norm,
        };
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push('\n');
        records.push(rec);
    }
    write_text(&out(cfg, LOO_DELTAS), &text)?;
    Ok(records)
}

/// All three arms end to end. Writes every intermediate artifact.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> CliResult<Comparison> {
    ensure_dir(&cfg.out_dir)?;
    let o = run_pipeline(cfg)?;
    o.pretrained.write(&out(cfg, PRETRAINED))?;
    write_history(&out(cfg, PRETRAIN_HISTORY), &o.pretrain_history)?;
    write_text(&out(cfg, REPORT), &o.report.to_jsonl())?;
    write_dataset(&o.optimized, &out(cfg, OPTIMIZED))?;
    for (name, (ck, hist)) in ARMS.iter().zip(&o.arms) {
        ck.write(&out(cfg, &format!("{name}.ckpt")))?;
        write_history(&out(cfg, &format!("{name}_history.json")), hist)?;
    }
    write_text(&out(cfg, COMPARISON), &o.comparison.to_json())?;
    Ok(o.comparison)
}

/// Byte contents of every regular file directly under `dir`, by name.
pub fn snapshot_dir(dir: &Path) -> CliResult<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| crate::io_err(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| crate::io_err(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let bytes = std::fs::read(&path).map_err(|e| crate::io_err(&path, e))?;
            files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
        }
    }
    Ok(files)
}
