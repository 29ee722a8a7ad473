//! Exact leave-one-out retraining for convex models.
//!
//! The training objective over `n` samples is `(1/n) Σ L_i + (λ/2)‖W‖²`.
//! Removing one sample keeps the `1/n` normalizer, so the leave-one-out
//! minimizer is the mean-loss minimizer over the remaining `n − 1` samples
//! with the penalty rescaled to `λ·n/(n−1)`.

use ibtl_core::data::Dataset;
use ibtl_core::influence::ValidationReference;
use ibtl_core::model::{ArchitectureSpec, GradEngine, ParameterVector, Sample};
use ibtl_core::numkit::{self, cholesky_solve};
use ibtl_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            grad_tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonFit {
    pub params: ParameterVector,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn require_convex(spec: &ArchitectureSpec) -> Result<()> {
    if !spec.is_convex() {
        return Err(Error::InvalidConfig(
            "the leave-one-out oracle needs a strictly convex model (softmax-linear with l2_lambda > 0); \
             retraining a non-convex model does not have a unique minimizer to compare against"
                .into(),
        ));
    }
    Ok(())
}

/// Damped Newton on the mean regularized objective, from `start`, until the
/// gradient norm reaches `opts.grad_tol`.
pub fn newton_fit(
    spec: &ArchitectureSpec,
    start: &ParameterVector,
    batch: &[Sample<'_>],
    opts: NewtonOptions,
) -> Result<NewtonFit> {
    require_convex(spec)?;
    let mut engine = GradEngine::new(spec.clone(), start.clone())?;
    let mut f = engine.mean_loss(batch, true)?;
    for it in 0..=opts.max_iter {
        let g = engine.mean_grad(batch, true)?;
        let gn = numkit::norm(&g);
        if gn <= opts.grad_tol {
            return Ok(NewtonFit {
                params: engine.into_params(),
                iterations: it,
                grad_norm: gn,
            });
        }
        if it == opts.max_iter {
            return Err(Error::NumericalBreakdown(format!(
                "Newton did not converge in {} iterations (gradient norm {gn:e})",
                opts.max_iter
            )));
        }
        let h = engine.build_hessian(batch, 0.0)?;
        let step = cholesky_solve(&h, &g)?;
        let slope = numkit::dot(&g, &step);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = engine
                .params()
                .as_slice()
                .iter()
                .zip(&step)
                .map(|(p, s)| p - t * s)
                .collect();
            let trial = GradEngine::new(spec.clone(), ParameterVector::new(spec, cand)?)?;
            let ft = trial.mean_loss(batch, true)?;
            // near the optimum the decrease is below roundoff; accept full steps there
            if ft <= f - 1e-4 * t * slope || (t == 1.0 && ft <= f + 1e-14 * f.abs()) {
                engine = trial;
                f = ft;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::NumericalBreakdown(format!(
                    "Newton line search failed at iteration {it} (gradient norm {gn:e})"
                )));
            }
        }
    }
    unreachable!()
}

/// One leave-one-out measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooDelta {
    pub id: u64,
    /// `Σ_j [L(θ; x_j) − L(θ′; x_j)]` over the validation reference.
    pub delta: f64,
    pub newton_iterations: usize,
    pub grad_norm: f64,
}

/// Full-data optimum plus the machinery to retrain without single samples.
pub struct LooOracle<'a> {
    spec: ArchitectureSpec,
    train: &'a Dataset,
    full: ParameterVector,
    base_val_loss: Vec<f64>,
    val: &'a Dataset,
    reference: ValidationReference,
    opts: NewtonOptions,
}

impl<'a> LooOracle<'a> {
    /// Fits `θ = argmin` on all of `train`, warm-started from `start`.
    pub fn new(
        spec: &ArchitectureSpec,
        start: &ParameterVector,
        train: &'a Dataset,
        val: &'a Dataset,
        reference: ValidationReference,
        opts: NewtonOptions,
    ) -> Result<Self> {
        require_convex(spec)?;
        let fit = newton_fit(spec, start, &train.samples(), opts)?;
        let engine = GradEngine::new(spec.clone(), fit.params.clone())?;
        let base_val_loss = reference
            .indices
            .iter()
            .map(|&j| engine.loss(val.row(j), val.label(j), false))
            .collect::<Result<Vec<f64>>>()?;
        Ok(LooOracle {
            spec: spec.clone(),
            train,
            full: fit.params,
            base_val_loss,
            val,
            reference,
            opts,
        })
    }

    /// The full-data minimizer `θ`.
    pub fn optimum(&self) -> &ParameterVector {
        &self.full
    }

    /// Retrain without sample `id`. An id absent from the training set removes
    /// nothing, so `θ′ = θ` and the delta is exactly zero.
    pub fn delta(&self, id: u64) -> Result<LooDelta> {
        let Some(pos) = self.train.position_of(id) else {
            return Ok(LooDelta {
                id,
                delta: 0.0,
                newton_iterations: 0,
                grad_norm: 0.0,
            });
        };
        let n = self.train.len();
        if n < 2 {
            return Err(Error::InvalidDataset(
                "leave-one-out needs at least two training samples".into(),
            ));
        }
        let rest: Vec<Sample<'_>> = (0..n)
            .filter(|&i| i != pos)
            .map(|i| self.train.sample(i))
            .collect();
        let mut spec = self.spec.clone();
        spec.l2_lambda *= n as f64 / (n - 1) as f64;
        let fit = newton_fit(&spec, &self.full, &rest, self.opts)?;
        let engine = GradEngine::new(spec, fit.params)?;
        let mut delta = 0.0;
        for (k, &j) in self.reference.indices.iter().enumerate() {
            delta += self.base_val_loss[k] - engine.loss(self.val.row(j), self.val.label(j), false)?;
        }
        Ok(LooDelta {
            id,
            delta,
            newton_iterations: fit.iterations,
            grad_norm: fit.grad_norm,
        })
    }

    /// Deltas for every training sample, in training order.
    pub fn all_deltas(&self) -> Result<Vec<LooDelta>> {
        self.train.ids().iter().map(|&id| self.delta(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ibtl_core::data::{gen_blobs, BlobParams};
    use ibtl_core::influence::{resolve_reference, ReferenceMode};
    use ibtl_core::model::Activation;
    use ibtl_core::numkit::RngStream;

    fn setup() -> (ArchitectureSpec, Dataset, Dataset) {
        let p = BlobParams {
            num_classes: 3,
            dim: 3,
            spread: 1.0,
            noise: 1.0,
        };
        let ds = gen_blobs(&p, 80, &mut RngStream::new(3)).unwrap();
        let train = ds.subset(&(0..60).collect::<Vec<_>>());
        let val = ds.subset(&(60..80).collect::<Vec<_>>());
        (ArchitectureSpec::softmax_linear(3, 3, 0.05), train, val)
    }

    #[test]
    fn newton_reaches_tight_gradient() {
        let (spec, train, _) = setup();
        let fit = newton_fit(
            &spec,
            &ParameterVector::zeros(&spec).unwrap(),
            &train.samples(),
            NewtonOptions::default(),
        )
        .unwrap();
        assert!(fit.grad_norm <= 1e-10);
        assert!(fit.iterations < 30);
    }

    #[test]
    fn absent_sample_gives_exact_zero() {
        let (spec, train, val) = setup();
        let r = resolve_reference(&val, ReferenceMode::All).unwrap();
        let oracle = LooOracle::new(
            &spec,
            &ParameterVector::zeros(&spec).unwrap(),
            &train,
            &val,
            r,
            NewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(oracle.delta(999_999).unwrap().delta, 0.0);
        assert!(oracle.delta(train.id(0)).unwrap().delta != 0.0);
    }

    #[test]
    fn non_convex_refused() {
        let (_, train, val) = setup();
        let spec = ArchitectureSpec::mlp(3, vec![4], Activation::Tanh, 3, 0.05);
        let r = resolve_reference(&val, ReferenceMode::All).unwrap();
        let p0 = ParameterVector::zeros(&spec).unwrap();
        let err = LooOracle::new(&spec, &p0, &train, &val, r, NewtonOptions::default())
            .err()
            .unwrap();
        assert!(err.to_string().contains("convex"));
    }
}
