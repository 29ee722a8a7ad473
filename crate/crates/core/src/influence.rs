//! Influence of training samples on validation loss.
//!
//! For a training sample `x` and validation sample `x_j`,
//!
//! ```text
//! I(x, x_j) = −∇L(x_j)ᵀ (H + λ_d I)⁻¹ ∇L(x)
//! ```
//!
//! where `H` is the mean Hessian of the regularized training objective at the
//! current parameters and `∇L` is the per-sample data-loss gradient (no
//! penalty). A positive total over the validation reference means removing
//! `x` is predicted to lower validation loss. Values are unscaled: the `1/n`
//! factor linking removal to up-weighting is omitted, which never changes a
//! sign.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{GradEngine, Sample, EXPLICIT_HESSIAN_LIMIT};
use crate::numkit::{self, cg_solve, cholesky_solve, CgOptions, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LissaParams {
    /// Recursion depth `T`.
    pub depth: usize,
    /// Scale `σ`; must bound the spectral norm of `H + λ_d I`.
    pub scale: f64,
    pub batch_size: usize,
    /// Independent recursions averaged, `R`.
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IhvpKind {
    Explicit,
    Cg { tol: f64, max_iter: Option<usize> },
    Lissa(LissaParams),
}

/// How `(H + λ_d I)⁻¹ b` is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhvpStrategy {
    #[serde(flatten)]
    pub kind: IhvpKind,
    pub damping: f64,
}

impl IhvpStrategy {
    pub fn explicit(damping: f64) -> Self {
        IhvpStrategy {
            kind: IhvpKind::Explicit,
            damping,
        }
    }

    pub fn cg(damping: f64) -> Self {
        IhvpStrategy {
            kind: IhvpKind::Cg {
                tol: 1e-10,
                max_iter: None,
            },
            damping,
        }
    }

    pub fn lissa(damping: f64, params: LissaParams) -> Self {
        IhvpStrategy {
            kind: IhvpKind::Lissa(params),
            damping,
        }
    }

    /// 0 for regularized softmax-linear models, 0.001 otherwise.
    pub fn default_damping(engine: &GradEngine) -> f64 {
        if engine.spec().is_convex() {
            0.0
        } else {
            0.001
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            IhvpKind::Explicit => "explicit",
            IhvpKind::Cg { .. } => "cg",
            IhvpKind::Lissa(_) => "lissa",
        }
    }

    pub fn validate(&self, engine: &GradEngine) -> Result<()> {
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "damping must be finite and nonnegative, got {}",
                self.damping
            )));
        }
        if !engine.spec().is_convex() && self.damping <= 0.0 {
            return Err(Error::InvalidConfig(
                "a non-convex model needs positive damping for its Hessian".into(),
            ));
        }
        match &self.kind {
            IhvpKind::Explicit if engine.num_params() > EXPLICIT_HESSIAN_LIMIT => {
                Err(Error::HessianTooLarge {
                    params: engine.num_params(),
                    limit: EXPLICIT_HESSIAN_LIMIT,
                })
            }
            IhvpKind::Cg { tol, .. } if !(*tol > 0.0) => Err(Error::InvalidConfig(format!(
                "cg tolerance must be positive, got {tol}"
            ))),
            IhvpKind::Lissa(p) if p.depth == 0 || p.repeats == 0 || p.batch_size == 0 => Err(
                Error::InvalidConfig("lissa depth, repeats and batch_size must be positive".into()),
            ),
            IhvpKind::Lissa(p) if !(p.scale > 0.0) => Err(Error::InvalidConfig(format!(
                "lissa scale must be positive, got {}",
                p.scale
            ))),
            _ => Ok(()),
        }
    }
}

/// Solve `(H + λ_d I) s = b` with `H` the mean regularized Hessian over `train`.
pub fn ihvp(
    engine: &GradEngine,
    train: &[Sample<'_>],
    b: &[f64],
    strategy: &IhvpStrategy,
) -> Result<Vec<f64>> {
    strategy.validate(engine)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set for the Hessian"));
    }
    if b.len() != engine.num_params() {
        return Err(Error::DimensionMismatch {
            what: "ihvp right-hand side",
            expected: engine.num_params(),
            got: b.len(),
        });
    }
    let damping = strategy.damping;
    match &strategy.kind {
        IhvpKind::Explicit => {
            let h = engine.build_hessian(train, damping)?;
            cholesky_solve(&h, b)
        }
        IhvpKind::Cg { tol, max_iter } => {
            // validate the batch once; the operator below cannot fail
            engine.hvp(train, b, true)?;
            let out = cg_solve(
                |v| {
                    let mut hv = engine.hvp_unchecked(train, v, true);
                    numkit::axpy(damping, v, &mut hv);
                    hv
                },
                b,
                CgOptions {
                    tol: *tol,
                    max_iter: *max_iter,
                },
            )?;
            if !out.converged {
                log::warn!(
                    "cg stopped after {} iterations at relative residual {:e}",
                    out.iterations,
                    out.rel_residual
                );
            }
            Ok(out.x)
        }
        IhvpKind::Lissa(p) => lissa(engine, train, b, damping, p),
    }
}

/// Averaged truncated Neumann recursions
/// `s₀ = b`, `s_{t+1} = b + (I − (H_batch + λ_d I)/σ) s_t`, returning `s_T / σ`.
fn lissa(
    engine: &GradEngine,
    train: &[Sample<'_>],
    b: &[f64],
    damping: f64,
    p: &LissaParams,
) -> Result<Vec<f64>> {
    engine.hvp(train, b, true)?;
    let n = train.len();
    let bs = p.batch_size.min(n);
    let b_norm = numkit::norm(b).max(f64::MIN_POSITIVE);
    let mut total = vec![0.0; b.len()];
    let mut batch = Vec::with_capacity(bs);
    for r in 0..p.repeats {
        let mut rng = RngStream::derive(p.seed, r as u64);
        let mut s = b.to_vec();
        for step in 0..p.depth {
            batch.clear();
            batch.extend(rng.sample_indices(n, bs).into_iter().map(|i| train[i]));
            let hs = engine.hvp_unchecked(&batch, &s, true);
            for i in 0..s.len() {
                s[i] = b[i] + s[i] - (hs[i] + damping * s[i]) / p.scale;
            }
            let growth = numkit::norm(&s) / b_norm;
            if !growth.is_finite() || growth > 1e6 {
                return Err(Error::LissaDivergence { step, growth });
            }
        }
        numkit::axpy(1.0, &s, &mut total);
    }
    let norm = 1.0 / (p.repeats as f64 * p.scale);
    numkit::scale(norm, &mut total);
    Ok(total)
}

/// Upper bound on the spectral norm of `H + λ_d I` by power iteration,
/// inflated by `margin`. Suitable for choosing a LiSSA scale.
pub fn spectral_norm_bound(
    engine: &GradEngine,
    train: &[Sample<'_>],
    damping: f64,
    iterations: usize,
    margin: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let p = engine.num_params();
    let mut v: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let nv = numkit::norm(&v);
        numkit::scale(1.0 / nv, &mut v);
        let mut hv = engine.hvp(train, &v, true)?;
        numkit::axpy(damping, &v, &mut hv);
        estimate = numkit::norm(&hv);
        v = hv;
    }
    Ok(estimate * margin)
}

/// Which validation samples act as the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ReferenceMode {
    All,
    ClassRestricted(usize),
}

impl fmt::Display for ReferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceMode::All => write!(f, "all"),
            ReferenceMode::ClassRestricted(k) => write!(f, "class:{k}"),
        }
    }
}

impl FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ReferenceMode::All);
        }
        s.strip_prefix("class:")
            .and_then(|k| k.parse().ok())
            .map(ReferenceMode::ClassRestricted)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("reference mode must be `all` or `class:<k>`, got `{s}`"))
            })
    }
}

impl From<ReferenceMode> for String {
    fn from(m: ReferenceMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for ReferenceMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Labelled sample access. Lets tests observe exactly which validation
/// samples are read while scoring.
pub trait LabeledSamples: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn sample(&self, i: usize) -> Sample<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabeledSamples for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn label(&self, i: usize) -> usize {
        Dataset::label(self, i)
    }

    fn sample(&self, i: usize) -> Sample<'_> {
        Dataset::sample(self, i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReference {
    pub mode: ReferenceMode,
    /// Ascending indices into the validation set.
    pub indices: Vec<usize>,
}

pub fn resolve_reference<V: LabeledSamples + ?Sized>(
    val: &V,
    mode: ReferenceMode,
) -> Result<ValidationReference> {
    if val.is_empty() {
        return Err(Error::EmptyReference("validation set is empty".into()));
    }
    let indices: Vec<usize> = match mode {
        ReferenceMode::All => (0..val.len()).collect(),
        ReferenceMode::ClassRestricted(a) => (0..val.len()).filter(|&i| val.label(i) == a).collect(),
    };
    if indices.is_empty() {
        return Err(Error::EmptyReference(format!(
            "no validation samples of class {}",
            match mode {
                ReferenceMode::ClassRestricted(a) => a,
                ReferenceMode::All => unreachable!(),
            }
        )));
    }
    Ok(ValidationReference { mode, indices })
}

/// Sum of data-loss gradients over the referenced validation samples.
pub fn reference_gradient<V: LabeledSamples + ?Sized>(
    engine: &GradEngine,
    val: &V,
    reference: &ValidationReference,
) -> Result<Vec<f64>> {
    if reference.indices.is_empty() {
        return Err(Error::EmptyReference("reference has no indices".into()));
    }
    let batch: Vec<Sample<'_>> = reference.indices.iter().map(|&i| val.sample(i)).collect();
    engine.sum_grad(&batch)
}

/// `I(x, x_j) = −∇L(x_j)ᵀ (H + λ_d I)⁻¹ ∇L(x)`.
pub fn influence_pair(
    engine: &GradEngine,
    train: &[Sample<'_>],
    x: Sample<'_>,
    x_val: Sample<'_>,
    strategy: &IhvpStrategy,
) -> Result<f64> {
    let g_val = engine.grad(x_val.x, x_val.y, false)?;
    let g_train = engine.grad(x.x, x.y, false)?;
    let s = ihvp(engine, train, &g_val, strategy)?;
    Ok(-numkit::dot(&s, &g_train))
}

/// `Σ_j I(x, x_j)` over the reference, via one solve against the summed
/// validation gradient.
pub fn influence_total<V: LabeledSamples + ?Sized>(
    engine: &GradEngine,
    train: &[Sample<'_>],
    x: Sample<'_>,
    val: &V,
    reference: &ValidationReference,
    strategy: &IhvpStrategy,
) -> Result<f64> {
    let g_ref = reference_gradient(engine, val, reference)?;
    let s = ihvp(engine, train, &g_ref, strategy)?;
    let g_train = engine.grad(x.x, x.y, false)?;
    Ok(-numkit::dot(&s, &g_train))
}

/// `Σ_j I(x, x_j)` as a literal sum of per-pair solves. Quadratic cost; kept
/// as a cross-check for the shared-solve path.
pub fn influence_total_naive<V: LabeledSamples + ?Sized>(
    engine: &GradEngine,
    train: &[Sample<'_>],
    x: Sample<'_>,
    val: &V,
    reference: &ValidationReference,
    strategy: &IhvpStrategy,
) -> Result<f64> {
    let mut total = 0.0;
    for &j in &reference.indices {
        total += influence_pair(engine, train, x, val.sample(j), strategy)?;
    }
    Ok(total)
}

/// Total influence of every training sample, in training order.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceScores {
    pub values: Vec<f64>,
    /// The solved vector `(H + λ_d I)⁻¹ Σ_j ∇L(x_j)`.
    pub solution: Vec<f64>,
}

pub fn score_training_set<V: LabeledSamples + ?Sized>(
    engine: &GradEngine,
    train: &Dataset,
    val: &V,
    reference: &ValidationReference,
    strategy: &IhvpStrategy,
) -> Result<InfluenceScores> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let samples = train.samples();
    let g_ref = reference_gradient(engine, val, reference)?;
    let s = ihvp(engine, &samples, &g_ref, strategy)?;
    let values = samples
        .par_iter()
        .map(|x| engine.grad(x.x, x.y, false).map(|g| -numkit::dot(&s, &g)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(InfluenceScores { values, solution: s })
}
