//! Pipeline stages shared by the subcommands.

use std::collections::BTreeSet;
use std::path::Path;

use ibtl_core::data::{
    corrupt_labels, gen_domain_pair_with_test, load_csv, load_idx, split_validation, Dataset,
};
use ibtl_core::dropout::{data_dropout, DropoutOptions, InfluenceReport};
use ibtl_core::influence::{spectral_norm_bound, IhvpStrategy};
use ibtl_core::model::{init_xavier, ArchitectureSpec, GradEngine};
use ibtl_core::numkit::RngStream;
use ibtl_core::transfer::{
    evaluate, fine_tune, transfer_parameters, Evaluation, TrainingHistory, TransferPlan,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, DataSource, IhvpChoice, PipelineConfig};
use crate::{CliError, CliResult};

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Data = 0,
    Corruption = 1,
    TargetSplit = 2,
    SourceSplit = 3,
    PretrainInit = 4,
    PretrainShuffle = 5,
    FinetuneInit = 6,
    FinetuneShuffle = 7,
    Lissa = 8,
    PowerIteration = 9,
}

pub fn stream(seed: u64, s: Stream) -> RngStream {
    RngStream::derive(seed, s as u64)
}

pub fn stream_seed(seed: u64, s: Stream) -> u64 {
    stream(seed, s).next_u64()
}

/// Every dataset a run touches.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub test: Dataset,
    /// Ids whose labels the generator flipped (empty for file data).
    pub flipped: BTreeSet<u64>,
}

impl Prepared {
    pub fn spec(&self, cfg: &PipelineConfig) -> ArchitectureSpec {
        cfg.model
            .spec(self.target_train.dim(), self.target_train.num_classes())
    }
}

fn load_source(src: &DataSource, num_classes: usize) -> CliResult<Dataset> {
    Ok(match src {
        DataSource::Csv(p) => load_csv(p, Some(num_classes))?,
        DataSource::Idx { images, labels } => load_idx(images, labels, Some(num_classes))?,
    })
}

/// Generated or loaded data, split into train and validation parts.
pub fn prepare_data(cfg: &PipelineConfig) -> CliResult<Prepared> {
    let seed = cfg.seed;
    let (source, target, test, corruption, val_fraction, given_val) = match &cfg.data {
        DataConfig::Generator(g) => {
            let (pair, test) = gen_domain_pair_with_test(
                &g.blob_params(),
                &g.shift(),
                g.n_source,
                g.n_target,
                g.n_test,
                &mut stream(seed, Stream::Data),
            )?;
            (
                pair.source,
                pair.target,
                test,
                g.target_corruption,
                g.val_fraction,
                None,
            )
        }
        DataConfig::Files(f) => {
            let k = f.num_classes;
            let val = f.validation.as_ref().map(|v| load_source(v, k)).transpose()?;
            (
                load_source(&f.source, k)?,
                load_source(&f.target, k)?,
                load_source(&f.test, k)?,
                0.0,
                f.val_fraction,
                val,
            )
        }
    };
    let (source_train, source_val) =
        split_validation(&source, val_fraction, &mut stream(seed, Stream::SourceSplit))?;
    let (target_train, target_val) = match given_val {
        Some(v) => (target, v),
        None => split_validation(&target, val_fraction, &mut stream(seed, Stream::TargetSplit))?,
    };
    // validation stays clean
    let (target_train, flipped) = if corruption > 0.0 {
        corrupt_labels(&target_train, corruption, &mut stream(seed, Stream::Corruption))?
    } else {
        (target_train, BTreeSet::new())
    };
    Ok(Prepared {
        source_train,
        source_val,
        target_train,
        target_val,
        test,
        flipped,
    })
}

/// Content digest of a dataset (ids, labels, features, class count).
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.num_classes() as u64).to_le_bytes());
    h.update((ds.dim() as u64).to_le_bytes());
    for i in 0..ds.len() {
        h.update(ds.id(i).to_le_bytes());
        h.update((ds.label(i) as u64).to_le_bytes());
        for v in ds.row(i) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Train on the source domain from Xavier initialization.
pub fn pretrain(cfg: &PipelineConfig, data: &Prepared) -> CliResult<(Checkpoint, TrainingHistory)> {
    let spec = data.spec(cfg);
    let p0 = init_xavier(&spec, &mut stream(cfg.seed, Stream::PretrainInit))?;
    let ft = cfg
        .pretrain
        .fine_tune_config(stream_seed(cfg.seed, Stream::PretrainShuffle));
    let plan = TransferPlan::full_load();
    let (params, history) = fine_tune(&spec, &p0, &data.source_train, &data.source_val, &ft, &plan)?;
    let ck = Checkpoint::new(spec, params)
        .with_meta("stage", "pretrain")
        .with_meta("seed", cfg.seed)
        .with_meta("train_digest", dataset_digest(&data.source_train));
    Ok((ck, history))
}

/// The configured inverse-HVP strategy for `engine` over `train`.
pub fn resolve_strategy(
    cfg: &PipelineConfig,
    engine: &GradEngine,
    train: &Dataset,
) -> CliResult<IhvpStrategy> {
    let inf = &cfg.influence;
    let damping = inf
        .damping
        .unwrap_or_else(|| IhvpStrategy::default_damping(engine));
    let scale = if inf.ihvp == IhvpChoice::Lissa && inf.lissa_scale.is_none() {
        spectral_norm_bound(
            engine,
            &train.samples(),
            damping,
            50,
            2.0,
            &mut stream(cfg.seed, Stream::PowerIteration),
        )?
    } else {
        0.0
    };
    Ok(inf.strategy(damping, scale, stream_seed(cfg.seed, Stream::Lissa)))
}

/// Score `train` against `val` with the pre-trained model and drop
/// positive-influence samples.
pub fn run_dropout(
    cfg: &PipelineConfig,
    pretrained: &Checkpoint,
    train: &Dataset,
    val: &Dataset,
) -> CliResult<(Dataset, InfluenceReport)> {
    let engine = GradEngine::new(pretrained.spec.clone(), pretrained.params.clone())?;
    let strategy = resolve_strategy(cfg, &engine, train)?;
    let options = DropoutOptions {
        max_drop_fraction: cfg.influence.max_drop_fraction,
        seed: Some(cfg.seed),
        checkpoint_digest: pretrained.digest(),
    };
    Ok(data_dropout(
        &engine,
        train,
        val,
        &strategy,
        cfg.influence.ref_mode,
        &options,
    )?)
}

/// Fine-tune from `pretrained` under the configured transfer plan, or from
/// Xavier initialization when `pretrained` is `None`.
pub fn run_finetune(
    cfg: &PipelineConfig,
    spec: &ArchitectureSpec,
    pretrained: Option<&Checkpoint>,
    train: &Dataset,
    val: &Dataset,
    stage: &str,
) -> CliResult<(Checkpoint, TrainingHistory)> {
    let init_seed = stream_seed(cfg.seed, Stream::FinetuneInit);
    let ft = cfg
        .finetune
        .train_config()
        .fine_tune_config(stream_seed(cfg.seed, Stream::FinetuneShuffle));
    let (params0, plan) = match pretrained {
        Some(pre) => {
            let plan = cfg.finetune.plan(init_seed);
            (transfer_parameters(&pre.spec, &pre.params, spec, &plan)?, plan)
        }
        None => {
            let plan = TransferPlan::from_scratch(init_seed);
            (init_xavier(spec, &mut RngStream::new(init_seed))?, plan)
        }
    };
    let (params, history) = fine_tune(spec, &params0, train, val, &ft, &plan)?;
    let mut ck = Checkpoint::new(spec.clone(), params)
        .with_meta("stage", stage)
        .with_meta("seed", cfg.seed)
        .with_meta("train_digest", dataset_digest(train));
    if let Some(pre) = pretrained {
        ck = ck.with_meta("pretrained_digest", pre.digest());
    }
    Ok((ck, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub n_train: usize,
    pub error_rate: f64,
    pub test_digest: String,
    pub checkpoint_digest: String,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub n_test: usize,
    pub n_dropped: usize,
    pub arms: Vec<ArmResult>,
}

impl Comparison {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparison serializes");
        s.push('\n');
        s
    }
}

pub const ARMS: [&str; 3] = ["from_scratch", "model_based", "instance_based"];

/// Everything a pipeline run produces, before it is written out.
pub struct PipelineOutputs {
    pub data: Prepared,
    pub pretrained: Checkpoint,
    pub pretrain_history: TrainingHistory,
    pub report: InfluenceReport,
    pub optimized: Dataset,
    /// Checkpoint and history per arm, in `ARMS` order.
    pub arms: Vec<(Checkpoint, TrainingHistory)>,
    pub comparison: Comparison,
}

/// Pre-train, then train the three arms and evaluate them on one test set.
pub fn run_pipeline(cfg: &PipelineConfig) -> CliResult<PipelineOutputs> {
    let data = prepare_data(cfg)?;
    let spec = data.spec(cfg);
    let (pretrained, pretrain_history) = pretrain(cfg, &data)?;
    let (optimized, report) = run_dropout(cfg, &pretrained, &data.target_train, &data.target_val)?;

    let runs = [
        (ARMS[0], None, &data.target_train),
        (ARMS[1], Some(&pretrained), &data.target_train),
        (ARMS[2], Some(&pretrained), &optimized),
    ];
    let test_digest = dataset_digest(&data.test);
    let mut arms = Vec::new();
    let mut results = Vec::new();
    for (name, pre, train) in runs {
        let (ck, hist) = run_finetune(cfg, &spec, pre, train, &data.target_val, name)?;
        let evaluation = evaluate(&ck.spec, &ck.params, &data.test)?;
        results.push(ArmResult {
            name: name.to_string(),
            n_train: train.len(),
            error_rate: evaluation.error_rate,
            test_digest: test_digest.clone(),
            checkpoint_digest: ck.digest(),
            evaluation,
        });
        arms.push((ck, hist));
    }
    let comparison = Comparison {
        seed: cfg.seed,
        n_test: data.test.len(),
        n_dropped: report.summary.n_dropped,
        arms: results,
    };
    Ok(PipelineOutputs {
        data,
        pretrained,
        pretrain_history,
        report,
        optimized,
        arms,
        comparison,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| crate::io_err(path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::config(path, e.to_string()))
}
