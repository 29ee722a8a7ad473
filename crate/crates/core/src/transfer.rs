//! Parameter transfer, layer freezing, fine-tuning and evaluation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_xavier, ArchitectureSpec, GradEngine, ParameterVector};
use crate::numkit::{all_finite, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TransferMode {
    /// Every layer comes from the source; architectures must match.
    FullLoad,
    /// The first `shallow_layers` layers are loaded, the rest Xavier-initialized.
    Hybrid { shallow_layers: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    #[serde(flatten)]
    pub mode: TransferMode,
    #[serde(default)]
    pub frozen_layers: BTreeSet<usize>,
    /// Seed for the randomly initialized layers.
    #[serde(default)]
    pub seed: u64,
}

impl TransferPlan {
    pub fn full_load() -> Self {
        TransferPlan {
            mode: TransferMode::FullLoad,
            frozen_layers: BTreeSet::new(),
            seed: 0,
        }
    }

    pub fn hybrid(shallow_layers: usize, seed: u64) -> Self {
        TransferPlan {
            mode: TransferMode::Hybrid { shallow_layers },
            frozen_layers: BTreeSet::new(),
            seed,
        }
    }

    /// Nothing loaded: plain Xavier initialization.
    pub fn from_scratch(seed: u64) -> Self {
        TransferPlan::hybrid(0, seed)
    }

    pub fn with_frozen(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.frozen_layers.extend(layers);
        self
    }

    pub fn validate(&self, target: &ArchitectureSpec) -> Result<()> {
        let n = target.num_layers();
        if let Some(&bad) = self.frozen_layers.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidConfig(format!(
                "frozen layer {bad} does not exist (model has {n} layers)"
            )));
        }
        if let TransferMode::Hybrid { shallow_layers: k } = self.mode {
            if k > n {
                return Err(Error::InvalidConfig(format!(
                    "cannot load {k} shallow layers into a {n}-layer model"
                )));
            }
            if let Some(&bad) = self.frozen_layers.iter().find(|&&l| l >= k) {
                return Err(Error::InvalidConfig(format!(
                    "frozen layer {bad} is not among the {k} loaded layers"
                )));
            }
        }
        Ok(())
    }
}

/// Initial parameters for `target` under `plan`, loading from `source`.
pub fn transfer_parameters(
    source_spec: &ArchitectureSpec,
    source: &ParameterVector,
    target_spec: &ArchitectureSpec,
    plan: &TransferPlan,
) -> Result<ParameterVector> {
    target_spec.validate()?;
    plan.validate(target_spec)?;
    let src_shapes = source_spec.layer_shapes();
    let dst_shapes = target_spec.layer_shapes();
    let check_layer = |l: usize| -> Result<()> {
        match (src_shapes.get(l), dst_shapes.get(l)) {
            (Some(a), Some(b)) if a == b => Ok(()),
            (Some(a), Some(b)) => Err(Error::IncompatibleArchitecture {
                layer: l,
                reason: format!("source shape {}x{} vs target {}x{}", a.1, a.0, b.1, b.0),
            }),
            _ => Err(Error::IncompatibleArchitecture {
                layer: l,
                reason: "layer missing in source".into(),
            }),
        }
    };
    if source.len() != source_spec.num_params() {
        return Err(Error::DimensionMismatch {
            what: "source parameters",
            expected: source_spec.num_params(),
            got: source.len(),
        });
    }

    match plan.mode {
        TransferMode::FullLoad => {
            if src_shapes.len() != dst_shapes.len() {
                return Err(Error::IncompatibleArchitecture {
                    layer: src_shapes.len().min(dst_shapes.len()),
                    reason: format!(
                        "source has {} layers, target {}",
                        src_shapes.len(),
                        dst_shapes.len()
                    ),
                });
            }
            for l in 0..dst_shapes.len() {
                check_layer(l)?;
            }
            if dst_shapes.len() > 1 && source_spec.activation != target_spec.activation {
                return Err(Error::IncompatibleArchitecture {
                    layer: 0,
                    reason: "activation differs".into(),
                });
            }
            ParameterVector::new(target_spec, source.as_slice().to_vec())
        }
        TransferMode::Hybrid { shallow_layers } => {
            let mut out = init_xavier(target_spec, &mut RngStream::new(plan.seed))?;
            for l in 0..shallow_layers {
                check_layer(l)?;
                out.layer_mut(l).copy_from_slice(source.layer(l));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
    },
}

impl Optimizer {
    /// Adam with its usual defaults (lr 0.001, β = (0.9, 0.999), ε = 1e-8).
    pub fn adam() -> Self {
        Optimizer::Adam {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => lr,
        }
    }
}

/// Mutable optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, num_params: usize) -> Self {
        OptimizerState {
            kind,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
        }
    }

    /// One update at learning rate `lr`. Coordinates with `trainable[i] == false`
    /// are left untouched, state included.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, trainable: &[bool]) {
        self.steps += 1;
        match self.kind {
            Optimizer::Adam {
                beta1, beta2, eps, ..
            } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for i in 0..theta.len() {
                    if !trainable[i] {
                        continue;
                    }
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            Optimizer::Sgd { momentum, .. } => {
                for i in 0..theta.len() {
                    if !trainable[i] {
                        continue;
                    }
                    self.m[i] = momentum * self.m[i] + grad[i];
                    theta[i] -= lr * self.m[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl FineTuneConfig {
    pub fn adam(epochs: usize, batch_size: usize, shuffle_seed: u64) -> Self {
        FineTuneConfig {
            optimizer: Optimizer::adam(),
            epochs,
            batch_size,
            shuffle_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr()
            )));
        }
        Ok(())
    }

    /// First epoch running at the reduced rate: `⌈epochs/2⌉`.
    pub fn drop_epoch(&self) -> usize {
        self.epochs.div_ceil(2)
    }

    /// Base rate before [`Self::drop_epoch`], a tenth of it from then on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let lr = self.optimizer.lr();
        if epoch < self.drop_epoch() {
            lr
        } else {
            lr / 10.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-batch regularized training objective after the epoch.
    pub train_loss: f64,
    /// Mean validation cross-entropy after the epoch.
    pub val_loss: f64,
    pub val_error: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

fn check_compatible(spec: &ArchitectureSpec, ds: &Dataset, what: &'static str) -> Result<()> {
    if ds.dim() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what,
            expected: spec.input_dim,
            got: ds.dim(),
        });
    }
    if ds.num_classes() != spec.num_classes {
        return Err(Error::DimensionMismatch {
            what,
            expected: spec.num_classes,
            got: ds.num_classes(),
        });
    }
    Ok(())
}

/// Mini-batch training of `params0` on `train`, with the learning rate cut
/// tenfold at `⌈epochs/2⌉` and `plan.frozen_layers` held fixed.
pub fn fine_tune(
    spec: &ArchitectureSpec,
    params0: &ParameterVector,
    train: &Dataset,
    val: &Dataset,
    config: &FineTuneConfig,
    plan: &TransferPlan,
) -> Result<(ParameterVector, TrainingHistory)> {
    config.validate()?;
    plan.validate(spec)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning validation set"));
    }
    check_compatible(spec, train, "training set vs model")?;
    check_compatible(spec, val, "validation set vs model")?;

    let p = spec.num_params();
    let mut trainable = vec![true; p];
    for &l in &plan.frozen_layers {
        let (s, e) = params0.layer_offsets()[l];
        trainable[s..e].iter_mut().for_each(|t| *t = false);
    }

    let mut engine = GradEngine::new(spec.clone(), params0.clone())?;
    let mut opt = OptimizerState::new(config.optimizer, p);
    let mut rng = RngStream::new(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainingHistory::default();
    let all = train.samples();
    let val_samples = val.samples();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        rng.shuffle(&mut order);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| all[i]).collect();
            let loss = engine.mean_loss(&batch, true)?;
            let grad = engine.mean_grad(&batch, true)?;
            if !loss.is_finite() || !all_finite(&grad) {
                return Err(Error::Divergence { epoch, batch: b });
            }
            opt.step(engine.params_mut().as_mut_slice(), &grad, lr, &trainable);
        }
        let train_loss = engine.mean_loss(&all, true)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
            });
        }
        let val_loss = engine.mean_loss(&val_samples, false)?;
        let val_error = evaluate_engine(&engine, val)?.error_rate;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_error,
            lr,
        });
    }
    Ok((engine.into_params(), history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    /// Error rate restricted to samples whose true label is `class`.
    pub fn class_error_rate(&self, class: usize) -> Option<f64> {
        let row = self.confusion.get(class)?;
        let total: usize = row.iter().sum();
        (total > 0).then(|| (total - row[class]) as f64 / total as f64)
    }
}

/// Argmax error rate (ties to the lowest class) and confusion counts.
pub fn evaluate(spec: &ArchitectureSpec, params: &ParameterVector, test: &Dataset) -> Result<Evaluation> {
    let engine = GradEngine::new(spec.clone(), params.clone())?;
    evaluate_engine(&engine, test)
}

pub fn evaluate_engine(engine: &GradEngine, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    check_compatible(engine.spec(), test, "test set vs model")?;
    let preds = (0..test.len())
        .into_par_iter()
        .map(|i| engine.predict(test.row(i)))
        .collect::<Result<Vec<usize>>>()?;
    let k = engine.spec().num_classes;
    let mut confusion = vec![vec![0; k]; k];
    let mut errors = 0;
    for (i, &p) in preds.iter().enumerate() {
        let y = test.label(i);
        confusion[y][p] += 1;
        if p != y {
            errors += 1;
        }
    }
    Ok(Evaluation {
        n: test.len(),
        errors,
        error_rate: errors as f64 / test.len() as f64,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobParams};
    use crate::model::Activation;
    use crate::numkit::Matrix;

    fn mlp3() -> ArchitectureSpec {
        ArchitectureSpec::mlp(4, vec![6, 5], Activation::Tanh, 3, 0.01)
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let p = BlobParams {
            num_classes: 3,
            dim: 4,
            spread: 2.0,
            noise: 0.7,
        };
        gen_blobs(&p, n, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn hybrid_all_layers_is_source() {
        let spec = mlp3();
        let src = init_xavier(&spec, &mut RngStream::new(1)).unwrap();
        let out = transfer_parameters(&spec, &src, &spec, &TransferPlan::hybrid(3, 99)).unwrap();
        assert_eq!(out, src);
        let full = transfer_parameters(&spec, &src, &spec, &TransferPlan::full_load()).unwrap();
        assert_eq!(full, src);
    }

    #[test]
    fn hybrid_zero_is_fresh_xavier() {
        let spec = mlp3();
        let src = init_xavier(&spec, &mut RngStream::new(1)).unwrap();
        let out = transfer_parameters(&spec, &src, &spec, &TransferPlan::hybrid(0, 5)).unwrap();
        assert_eq!(out, init_xavier(&spec, &mut RngStream::new(5)).unwrap());
    }

    #[test]
    fn hybrid_one_layer_slices() {
        let spec = mlp3();
        let src = init_xavier(&spec, &mut RngStream::new(1)).unwrap();
        let fresh = init_xavier(&spec, &mut RngStream::new(8)).unwrap();
        let out = transfer_parameters(&spec, &src, &spec, &TransferPlan::hybrid(1, 8)).unwrap();
        assert_eq!(out.layer(0), src.layer(0));
        assert_eq!(out.layer(1), fresh.layer(1));
        assert_eq!(out.layer(2), fresh.layer(2));
    }

    #[test]
    fn hybrid_into_different_head() {
        // source has 5 classes, target 3: only the first layer can load
        let src_spec = ArchitectureSpec::mlp(4, vec![6], Activation::Tanh, 5, 0.01);
        let dst_spec = ArchitectureSpec::mlp(4, vec![6], Activation::Tanh, 3, 0.01);
        let src = init_xavier(&src_spec, &mut RngStream::new(1)).unwrap();
        let out = transfer_parameters(&src_spec, &src, &dst_spec, &TransferPlan::hybrid(1, 2)).unwrap();
        assert_eq!(out.layer(0), src.layer(0));
        match transfer_parameters(&src_spec, &src, &dst_spec, &TransferPlan::hybrid(2, 2)) {
            Err(Error::IncompatibleArchitecture { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected incompatible layer 1, got {other:?}"),
        }
        assert!(transfer_parameters(&src_spec, &src, &dst_spec, &TransferPlan::full_load()).is_err());
    }

    #[test]
    fn plan_validation() {
        let spec = mlp3();
        assert!(TransferPlan::hybrid(4, 0).validate(&spec).is_err());
        assert!(TransferPlan::hybrid(1, 0)
            .with_frozen([1])
            .validate(&spec)
            .is_err());
        assert!(TransferPlan::hybrid(2, 0)
            .with_frozen([1])
            .validate(&spec)
            .is_ok());
        assert!(TransferPlan::full_load()
            .with_frozen([3])
            .validate(&spec)
            .is_err());
    }

    #[test]
    fn lr_schedule_halves() {
        let cfg = FineTuneConfig::adam(100, 8, 0);
        for e in 0..50 {
            assert_eq!(cfg.lr_at(e), 0.001);
        }
        for e in 50..100 {
            assert_eq!(cfg.lr_at(e), 0.0001);
        }
        let odd = FineTuneConfig::adam(5, 8, 0);
        assert_eq!(odd.drop_epoch(), 3);
        assert_eq!(FineTuneConfig::adam(1, 8, 0).lr_at(0), 0.001);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = OptimizerState::new(Optimizer::adam(), 4);
        let mut theta = vec![0.0; 4];
        let g = [0.3, -2.0, 0.0, 1e-3];
        opt.step(&mut theta, &g, 0.001, &[true; 4]);
        for (t, gi) in theta.iter().zip(&g) {
            if *gi == 0.0 {
                assert_eq!(*t, 0.0);
            } else {
                assert!((t.abs() - 0.001).abs() < 1e-7, "{t}");
                assert_eq!(t.signum(), -gi.signum());
            }
        }
    }

    #[test]
    fn sgd_momentum_step() {
        let mut opt = OptimizerState::new(
            Optimizer::Sgd {
                lr: 0.1,
                momentum: 0.5,
            },
            1,
        );
        let mut theta = vec![1.0];
        opt.step(&mut theta, &[2.0], 0.1, &[true]);
        opt.step(&mut theta, &[2.0], 0.1, &[true]);
        // velocities 2 then 3
        assert!((theta[0] - (1.0 - 0.2 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn frozen_layers_unchanged_and_history_shape() {
        let spec = mlp3();
        let train = blobs(60, 2);
        let val = blobs(15, 3);
        let p0 = init_xavier(&spec, &mut RngStream::new(4)).unwrap();
        let plan = TransferPlan::full_load().with_frozen([0, 2]);
        let cfg = FineTuneConfig::adam(4, 16, 7);
        let (p, hist) = fine_tune(&spec, &p0, &train, &val, &cfg, &plan).unwrap();
        assert_eq!(p.layer(0), p0.layer(0));
        assert_eq!(p.layer(2), p0.layer(2));
        assert_ne!(p.layer(1), p0.layer(1));
        assert_eq!(hist.epochs.len(), 4);
        let lrs: Vec<f64> = hist.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![0.001, 0.001, 0.0001, 0.0001]);
        let json = hist.to_json();
        assert!(json.trim_start().starts_with('['));
    }

    #[test]
    fn all_frozen_is_identity() {
        let spec = mlp3();
        let p0 = init_xavier(&spec, &mut RngStream::new(4)).unwrap();
        let plan = TransferPlan::full_load().with_frozen([0, 1, 2]);
        let (p, _) = fine_tune(
            &spec,
            &p0,
            &blobs(30, 1),
            &blobs(9, 2),
            &FineTuneConfig::adam(2, 8, 0),
            &plan,
        )
        .unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let spec = ArchitectureSpec::softmax_linear(4, 3, 0.01);
        let ds = blobs(120, 5);
        let train = ds.subset(&(0..90).collect::<Vec<_>>());
        let val = ds.subset(&(90..120).collect::<Vec<_>>());
        let p0 = ParameterVector::zeros(&spec).unwrap();
        let mut cfg = FineTuneConfig::adam(20, 10, 3);
        cfg.optimizer = Optimizer::Adam {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let plan = TransferPlan::full_load();
        let (a, ha) = fine_tune(&spec, &p0, &train, &val, &cfg, &plan).unwrap();
        let (b, _) = fine_tune(&spec, &p0, &train, &val, &cfg, &plan).unwrap();
        assert_eq!(a, b);
        let initial = GradEngine::new(spec.clone(), p0)
            .unwrap()
            .mean_loss(&train.samples(), true)
            .unwrap();
        assert!(ha.epochs.last().unwrap().train_loss <= initial);
        let err = evaluate(&spec, &a, &val).unwrap().error_rate;
        assert!(err <= 0.1, "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let spec = ArchitectureSpec::softmax_linear(4, 3, 0.0);
        let mut cfg = FineTuneConfig::adam(3, 10, 0);
        cfg.optimizer = Optimizer::Sgd {
            lr: 1e300,
            momentum: 0.0,
        };
        let p0 = ParameterVector::zeros(&spec).unwrap();
        let err = fine_tune(
            &spec,
            &p0,
            &blobs(30, 1),
            &blobs(9, 2),
            &cfg,
            &TransferPlan::full_load(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn evaluate_tie_break_and_perfect() {
        let spec = ArchitectureSpec::softmax_linear(1, 2, 0.0);
        let ds = Dataset::with_sequential_ids(
            Matrix::from_vec(4, 1, vec![1.0, -1.0, 2.0, -2.0]).unwrap(),
            vec![1, 0, 1, 0],
            2,
            None,
        )
        .unwrap();
        let zero = ParameterVector::zeros(&spec).unwrap();
        let ev = evaluate(&spec, &zero, &ds).unwrap();
        assert_eq!(ev.error_rate, 0.5);
        assert_eq!(ev.confusion, vec![vec![2, 0], vec![2, 0]]);
        assert_eq!(ev.class_error_rate(1), Some(1.0));
        let good = ParameterVector::new(&spec, vec![5.0, 0.0]).unwrap();
        assert_eq!(evaluate(&spec, &good, &ds).unwrap().error_rate, 0.0);
        let empty = ds.subset(&[]);
        assert!(matches!(
            evaluate(&spec, &good, &empty),
            Err(Error::EmptyDataset(_))
        ));
    }
}
