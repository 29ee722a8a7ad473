//! Pipeline configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use ibtl_core::data::{BlobParams, DomainShift};
use ibtl_core::influence::{IhvpKind, IhvpStrategy, LissaParams, ReferenceMode};
use ibtl_core::model::{Activation, ArchitectureSpec};
use ibtl_core::transfer::{FineTuneConfig, Optimizer, TransferMode, TransferPlan};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub influence: InfluenceConfig,
    pub pretrain: TrainConfig,
    pub finetune: FineTuneSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Generator(GeneratorConfig),
    Files(FilesConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub noise: f64,
    #[serde(default)]
    pub mean_offset: f64,
    #[serde(default)]
    pub rotation: f64,
    #[serde(default = "one")]
    pub noise_scale: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    /// Fraction of target training labels flipped after the validation split;
    /// the validation part stays clean.
    #[serde(default)]
    pub target_corruption: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn one() -> f64 {
    1.0
}

fn default_val_fraction() -> f64 {
    0.1
}

impl GeneratorConfig {
    pub fn blob_params(&self) -> BlobParams {
        BlobParams {
            num_classes: self.num_classes,
            dim: self.dim,
            spread: self.spread,
            noise: self.noise,
        }
    }

    pub fn shift(&self) -> DomainShift {
        DomainShift {
            mean_offset: self.mean_offset,
            rotation: self.rotation,
            noise_scale: self.noise_scale,
        }
    }
}

/// A CSV path, or an IDX image/label pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Csv(PathBuf),
    Idx { images: PathBuf, labels: PathBuf },
}

impl DataSource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Csv(p) => vec![p],
            DataSource::Idx { images, labels } => vec![images, labels],
        }
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Csv(p) => fix(p),
            DataSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    pub num_classes: usize,
    pub source: DataSource,
    pub target: DataSource,
    /// Split from `target` when absent.
    #[serde(default)]
    pub validation: Option<DataSource>,
    pub test: DataSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub l2_lambda: f64,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, num_classes: usize) -> ArchitectureSpec {
        ArchitectureSpec::mlp(
            input_dim,
            self.hidden_dims.clone(),
            self.activation,
            num_classes,
            self.l2_lambda,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum IhvpChoice {
    Explicit,
    Cg,
    Lissa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub ihvp: IhvpChoice,
    /// Defaults to 0 for convex models and 0.001 otherwise.
    pub damping: Option<f64>,
    pub ref_mode: ReferenceMode,
    pub max_drop_fraction: f64,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
    pub lissa_depth: usize,
    pub lissa_repeats: usize,
    pub lissa_batch_size: usize,
    /// Estimated by power iteration when absent.
    pub lissa_scale: Option<f64>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            ihvp: IhvpChoice::Cg,
            damping: None,
            ref_mode: ReferenceMode::All,
            max_drop_fraction: 0.5,
            cg_tol: 1e-10,
            cg_max_iter: None,
            lissa_depth: 5000,
            lissa_repeats: 10,
            lissa_batch_size: 20,
            lissa_scale: None,
        }
    }
}

impl InfluenceConfig {
    /// `scale` is used only for LiSSA when no explicit scale is configured.
    pub fn strategy(&self, damping: f64, scale: f64, seed: u64) -> IhvpStrategy {
        let kind = match self.ihvp {
            IhvpChoice::Explicit => IhvpKind::Explicit,
            IhvpChoice::Cg => IhvpKind::Cg {
                tol: self.cg_tol,
                max_iter: self.cg_max_iter,
            },
            IhvpChoice::Lissa => IhvpKind::Lissa(LissaParams {
                depth: self.lissa_depth,
                scale: self.lissa_scale.unwrap_or(scale),
                batch_size: self.lissa_batch_size,
                repeats: self.lissa_repeats,
                seed,
            }),
        };
        IhvpStrategy { kind, damping }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
}

fn default_optimizer() -> Optimizer {
    Optimizer::adam()
}

impl TrainConfig {
    pub fn fine_tune_config(&self, shuffle_seed: u64) -> FineTuneConfig {
        FineTuneConfig {
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            shuffle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    /// Layers loaded from the pre-trained model; all of them when absent.
    #[serde(default)]
    pub shallow_layers: Option<usize>,
    #[serde(default)]
    pub frozen_layers: Vec<usize>,
}

impl FineTuneSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }

    pub fn plan(&self, init_seed: u64) -> TransferPlan {
        let mode = match self.shallow_layers {
            None => TransferMode::FullLoad,
            Some(k) => TransferMode::Hybrid { shallow_layers: k },
        };
        TransferPlan {
            mode,
            frozen_layers: self.frozen_layers.iter().copied().collect(),
            seed: init_seed,
        }
    }
}

/// Values given on the command line take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ihvp: Option<IhvpChoice>,
    pub damping: Option<f64>,
    pub ref_mode: Option<ReferenceMode>,
    pub max_drop_fraction: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(origin, e.to_string()))
    }

    /// Reads `path`; relative data paths and `out_dir` resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::io_err(path, e))?;
        let mut cfg = PipelineConfig::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let DataConfig::Files(f) = &mut cfg.data {
            f.source.rebase(base);
            f.target.rebase(base);
            f.test.rebase(base);
            if let Some(v) = &mut f.validation {
                v.rebase(base);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.ihvp {
            self.influence.ihvp = k;
        }
        if let Some(d) = o.damping {
            self.influence.damping = Some(d);
        }
        if let Some(m) = o.ref_mode {
            self.influence.ref_mode = m;
        }
        if let Some(f) = o.max_drop_fraction {
            self.influence.max_drop_fraction = f;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self, origin: &Path) -> CliResult<()> {
        let bad = |m: String| Err(CliError::config(origin, m));
        let inf = &self.influence;
        if !(inf.max_drop_fraction > 0.0 && inf.max_drop_fraction <= 1.0) {
            return bad(format!(
                "max_drop_fraction must be in (0, 1], got {}",
                inf.max_drop_fraction
            ));
        }
        if let Some(d) = inf.damping {
            if !(d >= 0.0) {
                return bad(format!("damping must be nonnegative, got {d}"));
            }
        }
        if !(self.model.l2_lambda >= 0.0) {
            return bad(format!(
                "l2_lambda must be nonnegative, got {}",
                self.model.l2_lambda
            ));
        }
        match &self.data {
            DataConfig::Generator(g) => {
                if !(g.target_corruption >= 0.0 && g.target_corruption < 1.0) {
                    return bad(format!(
                        "target_corruption must be in [0, 1), got {}",
                        g.target_corruption
                    ));
                }
            }
            DataConfig::Files(f) => {
                let mut sources = vec![&f.source, &f.target, &f.test];
                sources.extend(f.validation.as_ref());
                for src in sources {
                    for p in src.paths() {
                        if !p.is_file() {
                            return Err(CliError::config(p, "data file not found"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 11
out_dir = "run"

[data]
kind = "generator"
num_classes = 3
dim = 4
spread = 2.0
noise = 1.0
rotation = 0.5
n_source = 500
n_target = 100
n_test = 200
target_corruption = 0.1

[model]
hidden_dims = [8]
l2_lambda = 0.001

[influence]
ihvp = "cg"
damping = 0.01
ref_mode = "class:1"
max_drop_fraction = 0.4
cg_tol = 1e-10
lissa_depth = 100
lissa_repeats = 2
lissa_batch_size = 10

[pretrain]
epochs = 10
batch_size = 32

[finetune]
epochs = 6
batch_size = 16
shallow_layers = 1
frozen_layers = [0]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = PipelineConfig::from_toml(EXAMPLE, Path::new("c.toml")).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.influence.ref_mode, ReferenceMode::ClassRestricted(1));
        assert_eq!(cfg.pretrain.optimizer, Optimizer::adam());
        let DataConfig::Generator(g) = &cfg.data else {
            panic!()
        };
        assert_eq!(g.noise_scale, 1.0);
        assert_eq!(g.val_fraction, 0.1);
        let plan = cfg.finetune.plan(3);
        assert_eq!(plan.mode, TransferMode::Hybrid { shallow_layers: 1 });
        let again = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = EXAMPLE.replace("seed = 11", "");
        let err = PipelineConfig::from_toml(&text, Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("seed"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = PipelineConfig::from_toml(EXAMPLE, Path::new("c.toml")).unwrap();
        cfg.apply(&Overrides {
            seed: Some(5),
            ihvp: Some(IhvpChoice::Lissa),
            damping: Some(0.5),
            ref_mode: Some(ReferenceMode::All),
            max_drop_fraction: Some(0.9),
            out_dir: Some("elsewhere".into()),
        });
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.influence.ihvp, IhvpChoice::Lissa);
        assert_eq!(cfg.influence.damping, Some(0.5));
        assert_eq!(cfg.influence.ref_mode, ReferenceMode::All);
        assert_eq!(cfg.influence.max_drop_fraction, 0.9);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn missing_file_is_reported_with_path() {
        let text = r#"
seed = 1
out_dir = "o"
[data]
kind = "files"
num_classes = 2
source = "/nonexistent/src.csv"
target = "/nonexistent/tgt.csv"
test = { images = "/nonexistent/t-images", labels = "/nonexistent/t-labels" }
[model]
l2_lambda = 0.01
[pretrain]
epochs = 1
batch_size = 4
[finetune]
epochs = 1
batch_size = 4
"#;
        let cfg = PipelineConfig::from_toml(text, Path::new("c.toml")).unwrap();
        let err = cfg.validate(Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/src.csv"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = PipelineConfig::from_toml(EXAMPLE, Path::new("c.toml")).unwrap();
        cfg.influence.max_drop_fraction = 0.0;
        assert!(cfg.validate(Path::new("c.toml")).is_err());
        let text = EXAMPLE.replace("ref_mode = \"class:1\"", "ref_mode = \"class:x\"");
        assert!(PipelineConfig::from_toml(&text, Path::new("c.toml")).is_err());
    }
}
