//! Smooth classifiers over a flat parameter vector.
//!
//! Both model families share one code path: a stack of affine layers with a
//! twice-differentiable activation between them, followed by a softmax head.
//! With no hidden layers this is multinomial (softmax-linear) regression.
//!
//! The output layer has `K − 1` units; class 0 is the reference class whose
//! logit is pinned at zero. This keeps softmax-linear regression identifiable,
//! so its regularized training Hessian is positive definite without damping.
//!
//! Per-layer parameter layout is the row-major `fan_out × fan_in` weight
//! matrix followed by `fan_out` biases. Layers are ordered shallow to deep.
//! The L2 penalty `(λ/2)‖W‖²` covers weights only.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Largest parameter count for which a dense Hessian is formed.
pub const EXPLICIT_HESSIAN_LIMIT: usize = 4096;

/// Fixed reduction chunk; results do not depend on the rayon pool size.
const REDUCE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// `(φ'(z), φ''(z))`
    fn derivs(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (d1, -2.0 * t * d1)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    /// Empty for softmax-linear regression.
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub num_classes: usize,
    pub l2_lambda: f64,
}

impl ArchitectureSpec {
    pub fn softmax_linear(input_dim: usize, num_classes: usize, l2_lambda: f64) -> Self {
        ArchitectureSpec {
            input_dim,
            hidden_dims: Vec::new(),
            activation: Activation::Tanh,
            num_classes,
            l2_lambda,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        activation: Activation,
        num_classes: usize,
        l2_lambda: f64,
    ) -> Self {
        ArchitectureSpec {
            input_dim,
            hidden_dims,
            activation,
            num_classes,
            l2_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if let Some(k) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!("hidden layer {k} has width 0")));
        }
        if !(self.l2_lambda >= 0.0) || !self.l2_lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "l2_lambda must be finite and nonnegative, got {}",
                self.l2_lambda
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` per layer, shallow to deep.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            shapes.push((fan_in, h));
            fan_in = h;
        }
        shapes.push((fan_in, self.num_classes - 1));
        shapes
    }

    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let end = start + (fan_in + 1) * fan_out;
                let r = (start, end);
                start = end;
                r
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_offsets().last().map_or(0, |&(_, e)| e)
    }

    /// Ranges of weight (non-bias) coordinates.
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        self.layer_shapes()
            .into_iter()
            .zip(self.layer_offsets())
            .map(|((fan_in, fan_out), (start, _))| start..start + fan_in * fan_out)
            .collect()
    }

    /// Softmax-linear with a positive L2 penalty: the training objective is
    /// strictly convex.
    pub fn is_convex(&self) -> bool {
        self.hidden_dims.is_empty() && self.l2_lambda > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layer_offsets: Vec<(usize, usize)>,
}

impl ParameterVector {
    pub fn new(spec: &ArchitectureSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let p = spec.num_params();
        if values.len() != p {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: p,
                got: values.len(),
            });
        }
        Ok(ParameterVector {
            values,
            layer_offsets: spec.layer_offsets(),
        })
    }

    pub fn zeros(spec: &ArchitectureSpec) -> Result<Self> {
        ParameterVector::new(spec, vec![0.0; spec.num_params()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn layer_offsets(&self) -> &[(usize, usize)] {
        &self.layer_offsets
    }

    pub fn num_layers(&self) -> usize {
        self.layer_offsets.len()
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        let (s, e) = self.layer_offsets[k];
        &self.values[s..e]
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut [f64] {
        let (s, e) = self.layer_offsets[k];
        &mut self.values[s..e]
    }
}

/// Uniform Xavier/Glorot weights in `±√(6/(fan_in+fan_out))`, zero biases.
pub fn init_xavier(spec: &ArchitectureSpec, rng: &mut RngStream) -> Result<ParameterVector> {
    let mut params = ParameterVector::zeros(spec)?;
    for (k, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let layer = params.layer_mut(k);
        for w in &mut layer[..fan_in * fan_out] {
            *w = rng.uniform_range(-limit, limit);
        }
    }
    Ok(params)
}

/// One labelled example, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: usize,
}

impl<'a> Sample<'a> {
    pub fn new(x: &'a [f64], y: usize) -> Self {
        Sample { x, y }
    }
}

struct Trace {
    /// `acts[l]` is the input to layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry holds the non-reference logits.
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

/// Evaluates loss, gradient and Hessian-vector products at fixed parameters.
#[derive(Debug, Clone)]
pub struct GradEngine {
    spec: ArchitectureSpec,
    params: ParameterVector,
    shapes: Vec<(usize, usize)>,
    weight_ranges: Vec<Range<usize>>,
}

impl GradEngine {
    pub fn new(spec: ArchitectureSpec, params: ParameterVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() || params.layer_offsets() != spec.layer_offsets() {
            return Err(Error::DimensionMismatch {
                what: "parameters for architecture",
                expected: spec.num_params(),
                got: params.len(),
            });
        }
        Ok(GradEngine {
            shapes: spec.layer_shapes(),
            weight_ranges: spec.weight_ranges(),
            spec,
            params,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterVector {
        self.params
    }

    fn check_sample(&self, x: &[f64], y: Option<usize>) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        if let Some(y) = y {
            if y >= self.spec.num_classes {
                return Err(Error::InvalidLabel {
                    label: y,
                    num_classes: self.spec.num_classes,
                });
            }
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let theta = self.params.as_slice();
        let last = self.shapes.len() - 1;
        let mut acts = Vec::with_capacity(self.shapes.len());
        let mut pre = Vec::with_capacity(self.shapes.len());
        let mut input = x.to_vec();
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            let (start, _) = self.params.layer_offsets()[l];
            let w = &theta[start..start + fan_in * fan_out];
            let b = &theta[start + fan_in * fan_out..start + (fan_in + 1) * fan_out];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(&input).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            let next = if l < last {
                z.iter().map(|&v| self.spec.activation.eval(v)).collect()
            } else {
                Vec::new()
            };
            acts.push(std::mem::replace(&mut input, next));
            pre.push(z);
        }
        let probs = softmax_with_reference(&pre[last]);
        Trace { acts, pre, probs }
    }

    /// Class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_sample(x, None)?;
        Ok(self.trace(x).probs)
    }

    /// Logits including the pinned reference logit 0 for class 0.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_sample(x, None)?;
        let t = self.trace(x);
        let mut out = Vec::with_capacity(self.spec.num_classes);
        out.push(0.0);
        out.extend_from_slice(t.pre.last().unwrap());
        Ok(out)
    }

    /// Index of the most probable class, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn reg_value(&self) -> f64 {
        let theta = self.params.as_slice();
        let sq: f64 = self
            .weight_ranges
            .iter()
            .flat_map(|r| theta[r.clone()].iter())
            .map(|w| w * w)
            .sum();
        0.5 * self.spec.l2_lambda * sq
    }

    /// Cross-entropy `−ln p_y`, plus `(λ/2)‖W‖²` when `include_reg`.
    pub fn loss(&self, x: &[f64], y: usize, include_reg: bool) -> Result<f64> {
        self.check_sample(x, Some(y))?;
        let t = self.trace(x);
        let logits = t.pre.last().unwrap();
        let lse = log_sum_exp_with_reference(logits);
        let zy = if y == 0 { 0.0 } else { logits[y - 1] };
        let mut l = lse - zy;
        if include_reg {
            l += self.reg_value();
        }
        Ok(l)
    }

    pub fn grad(&self, x: &[f64], y: usize, include_reg: bool) -> Result<Vec<f64>> {
        self.check_sample(x, Some(y))?;
        let mut g = vec![0.0; self.num_params()];
        self.accumulate_grad(x, y, 1.0, &mut g);
        if include_reg {
            self.add_reg_grad(&mut g, 1.0);
        }
        Ok(g)
    }

    fn add_reg_grad(&self, g: &mut [f64], weight: f64) {
        let lambda = self.spec.l2_lambda * weight;
        if lambda == 0.0 {
            return;
        }
        let theta = self.params.as_slice();
        for r in &self.weight_ranges {
            for i in r.clone() {
                g[i] += lambda * theta[i];
            }
        }
    }

    fn add_reg_hvp(&self, v: &[f64], out: &mut [f64]) {
        let lambda = self.spec.l2_lambda;
        if lambda == 0.0 {
            return;
        }
        for r in &self.weight_ranges {
            for i in r.clone() {
                out[i] += lambda * v[i];
            }
        }
    }

    /// `g += weight · ∇θ(−ln p_y)`
    fn accumulate_grad(&self, x: &[f64], y: usize, weight: f64, g: &mut [f64]) {
        let t = self.trace(x);
        let theta = self.params.as_slice();
        let offsets = self.params.layer_offsets();
        let mut delta = output_delta(&t.probs, y);
        for l in (0..self.shapes.len()).rev() {
            let (fan_in, fan_out) = self.shapes[l];
            let (start, _) = offsets[l];
            let a = &t.acts[l];
            for o in 0..fan_out {
                let d = weight * delta[o];
                if d != 0.0 {
                    let gw = &mut g[start + o * fan_in..start + (o + 1) * fan_in];
                    for (gi, ai) in gw.iter_mut().zip(a) {
                        *gi += d * ai;
                    }
                }
                g[start + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let w = &theta[start..start + fan_in * fan_out];
                let z_prev = &t.pre[l - 1];
                delta = (0..fan_in)
                    .map(|i| {
                        let back: f64 = (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                        self.spec.activation.derivs(z_prev[i]).0 * back
                    })
                    .collect();
            }
        }
    }

    /// `out += weight · ∇²θ(−ln p_y) · v` by forward-over-reverse (R-operator).
    #[allow(clippy::needless_range_loop)]
    fn accumulate_hvp(&self, x: &[f64], y: usize, v: &[f64], weight: f64, out: &mut [f64]) {
        let t = self.trace(x);
        let theta = self.params.as_slice();
        let offsets = self.params.layer_offsets();
        let n_layers = self.shapes.len();
        let act = self.spec.activation;

        // forward R-pass: r_acts[l] = R(input of layer l), r_pre[l] = R(z_l)
        let mut r_acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut r_in = vec![0.0; x.len()];
        for l in 0..n_layers {
            let (fan_in, fan_out) = self.shapes[l];
            let (start, _) = offsets[l];
            let w = &theta[start..start + fan_in * fan_out];
            let vw = &v[start..start + fan_in * fan_out];
            let vb = &v[start + fan_in * fan_out..start + (fan_in + 1) * fan_out];
            let a = &t.acts[l];
            let rz: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let mut s = vb[o];
                    for i in 0..fan_in {
                        s += vw[o * fan_in + i] * a[i] + w[o * fan_in + i] * r_in[i];
                    }
                    s
                })
                .collect();
            let next = if l + 1 < n_layers {
                rz.iter()
                    .zip(&t.pre[l])
                    .map(|(r, &z)| act.derivs(z).0 * r)
                    .collect()
            } else {
                Vec::new()
            };
            r_acts.push(std::mem::replace(&mut r_in, next));
            r_pre.push(rz);
        }

        // softmax head: R(p) = p ⊙ (R(z̃) − pᵀR(z̃)) with R(z̃_0) = 0
        let p = &t.probs;
        let rz_last = &r_pre[n_layers - 1];
        let mean: f64 = rz_last.iter().zip(&p[1..]).map(|(r, pk)| r * pk).sum();
        let mut r_delta: Vec<f64> = rz_last
            .iter()
            .zip(&p[1..])
            .map(|(r, pk)| pk * (r - mean))
            .collect();
        let mut delta = output_delta(p, y);

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = self.shapes[l];
            let (start, _) = offsets[l];
            let a = &t.acts[l];
            let ra = &r_acts[l];
            for o in 0..fan_out {
                let (d, rd) = (weight * delta[o], weight * r_delta[o]);
                let row = &mut out[start + o * fan_in..start + (o + 1) * fan_in];
                for i in 0..fan_in {
                    row[i] += rd * a[i] + d * ra[i];
                }
                out[start + fan_in * fan_out + o] += rd;
            }
            if l > 0 {
                let w = &theta[start..start + fan_in * fan_out];
                let vw = &v[start..start + fan_in * fan_out];
                let z_prev = &t.pre[l - 1];
                let rz_prev = &r_pre[l - 1];
                let mut nd = Vec::with_capacity(fan_in);
                let mut nrd = Vec::with_capacity(fan_in);
                for i in 0..fan_in {
                    let mut back = 0.0;
                    let mut r_back = 0.0;
                    for o in 0..fan_out {
                        back += w[o * fan_in + i] * delta[o];
                        r_back += vw[o * fan_in + i] * delta[o] + w[o * fan_in + i] * r_delta[o];
                    }
                    let (d1, d2) = act.derivs(z_prev[i]);
                    nd.push(d1 * back);
                    nrd.push(d2 * rz_prev[i] * back + d1 * r_back);
                }
                delta = nd;
                r_delta = nrd;
            }
        }
    }

    fn check_batch(&self, batch: &[Sample<'_>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for s in batch {
            self.check_sample(s.x, Some(s.y))?;
        }
        Ok(())
    }

    /// Mean per-sample gradient over `batch`, optionally with the penalty gradient.
    pub fn mean_grad(&self, batch: &[Sample<'_>], include_reg: bool) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let w = 1.0 / batch.len() as f64;
        let mut g = self.chunked_sum(batch, |chunk, acc| {
            for s in chunk {
                self.accumulate_grad(s.x, s.y, w, acc);
            }
        });
        if include_reg {
            self.add_reg_grad(&mut g, 1.0);
        }
        Ok(g)
    }

    /// Sum of per-sample data-loss gradients (no penalty), in sample order.
    pub fn sum_grad(&self, batch: &[Sample<'_>]) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        Ok(self.chunked_sum(batch, |chunk, acc| {
            for s in chunk {
                self.accumulate_grad(s.x, s.y, 1.0, acc);
            }
        }))
    }

    /// Mean batch loss, optionally with the penalty.
    pub fn mean_loss(&self, batch: &[Sample<'_>], include_reg: bool) -> Result<f64> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for s in batch {
            total += self.loss(s.x, s.y, false)?;
        }
        let mut l = total / batch.len() as f64;
        if include_reg {
            l += self.reg_value();
        }
        Ok(l)
    }

    /// `(1/|batch|) Σ ∇²L · v`, plus `λ·v` on weight coordinates when `include_reg`.
    pub fn hvp(&self, batch: &[Sample<'_>], v: &[f64], include_reg: bool) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        if v.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "hvp direction",
                expected: self.num_params(),
                got: v.len(),
            });
        }
        Ok(self.hvp_unchecked(batch, v, include_reg))
    }

    pub(crate) fn hvp_unchecked(&self, batch: &[Sample<'_>], v: &[f64], include_reg: bool) -> Vec<f64> {
        let w = 1.0 / batch.len() as f64;
        let mut out = self.chunked_sum(batch, |chunk, acc| {
            for s in chunk {
                self.accumulate_hvp(s.x, s.y, v, w, acc);
            }
        });
        if include_reg {
            self.add_reg_hvp(v, &mut out);
        }
        out
    }

    fn chunked_sum<F>(&self, batch: &[Sample<'_>], f: F) -> Vec<f64>
    where
        F: Fn(&[Sample<'_>], &mut [f64]) + Sync,
    {
        let p = self.num_params();
        let partials: Vec<Vec<f64>> = batch
            .par_chunks(REDUCE_CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; p];
                f(chunk, &mut acc);
                acc
            })
            .collect();
        let mut total = vec![0.0; p];
        for part in partials {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        total
    }

    /// Dense mean Hessian of the regularized objective plus `damping · I`.
    pub fn build_hessian(&self, batch: &[Sample<'_>], damping: f64) -> Result<Matrix> {
        let p = self.num_params();
        if p > EXPLICIT_HESSIAN_LIMIT {
            return Err(Error::HessianTooLarge {
                params: p,
                limit: EXPLICIT_HESSIAN_LIMIT,
            });
        }
        self.check_batch(batch)?;
        let columns: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                let mut col = self.hvp_unchecked(batch, &e, true);
                col[j] += damping;
                col
            })
            .collect();
        let mut h = Matrix::zeros(p, p);
        for (j, col) in columns.iter().enumerate() {
            h.set_column(j, col);
        }
        // exact-arithmetic symmetric; average out roundoff
        for i in 0..p {
            for j in (i + 1)..p {
                let m = 0.5 * (h[(i, j)] + h[(j, i)]);
                h[(i, j)] = m;
                h[(j, i)] = m;
            }
        }
        Ok(h)
    }
}

fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(logits.len() + 1);
    out.push((-m).exp());
    out.extend(logits.iter().map(|z| (z - m).exp()));
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

fn log_sum_exp_with_reference(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(0.0f64, f64::max);
    let s: f64 = (-m).exp() + logits.iter().map(|z| (z - m).exp()).sum::<f64>();
    m + s.ln()
}

/// `∂(−ln p_y)/∂z_k = p_k − [y = k]` for the non-reference classes.
fn output_delta(probs: &[f64], y: usize) -> Vec<f64> {
    probs[1..]
        .iter()
        .enumerate()
        .map(|(k, &p)| if k + 1 == y { p - 1.0 } else { p })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{dot, finite_diff_grad, rel_err};

    fn engine(spec: &ArchitectureSpec, theta: Vec<f64>) -> GradEngine {
        GradEngine::new(spec.clone(), ParameterVector::new(spec, theta).unwrap()).unwrap()
    }

    fn random_engine(spec: &ArchitectureSpec, rng: &mut RngStream, scale: f64) -> GradEngine {
        let theta = (0..spec.num_params()).map(|_| scale * rng.normal()).collect();
        engine(spec, theta)
    }

    fn binary() -> ArchitectureSpec {
        ArchitectureSpec::softmax_linear(1, 2, 0.0)
    }

    #[test]
    fn parameter_counts_and_offsets() {
        let spec = ArchitectureSpec::mlp(4, vec![3, 5], Activation::Tanh, 3, 0.1);
        assert_eq!(spec.layer_shapes(), vec![(4, 3), (3, 5), (5, 2)]);
        assert_eq!(spec.layer_offsets(), vec![(0, 15), (15, 35), (35, 47)]);
        assert_eq!(spec.num_params(), 47);
        assert_eq!(spec.weight_ranges(), vec![0..12, 15..30, 35..45]);
        assert!(!spec.is_convex());
        assert!(ArchitectureSpec::softmax_linear(3, 4, 0.1).is_convex());
        assert!(!ArchitectureSpec::softmax_linear(3, 4, 0.0).is_convex());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ArchitectureSpec::softmax_linear(0, 3, 0.1).validate().is_err());
        assert!(ArchitectureSpec::softmax_linear(2, 1, 0.1).validate().is_err());
        assert!(ArchitectureSpec::softmax_linear(2, 3, -1.0).validate().is_err());
        assert!(ArchitectureSpec::mlp(2, vec![0], Activation::Tanh, 3, 0.1)
            .validate()
            .is_err());
    }

    #[test]
    fn xavier_biases_zero_and_bounds() {
        let spec = ArchitectureSpec::mlp(6, vec![4], Activation::Softplus, 3, 0.0);
        let p = init_xavier(&spec, &mut RngStream::new(1)).unwrap();
        for (k, (fi, fo)) in spec.layer_shapes().into_iter().enumerate() {
            let layer = p.layer(k);
            let limit = (6.0 / (fi + fo) as f64).sqrt();
            assert!(layer[..fi * fo].iter().all(|w| w.abs() <= limit));
            assert!(layer[fi * fo..].iter().all(|&b| b == 0.0));
        }
        let again = init_xavier(&spec, &mut RngStream::new(1)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn zero_params_give_uniform_probs_and_ln_k_loss() {
        let spec = ArchitectureSpec::softmax_linear(3, 10, 0.5);
        let e = engine(&spec, vec![0.0; spec.num_params()]);
        let p = e.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let l = e.loss(&[0.3, -1.0, 2.0], 4, false).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let l_reg = e.loss(&[0.3, -1.0, 2.0], 4, true).unwrap();
        assert_eq!(l, l_reg);
    }

    #[test]
    fn binary_sigmoid_case() {
        let spec = ArchitectureSpec::softmax_linear(2, 2, 0.0);
        let e = engine(&spec, vec![1.0, 0.0, 0.0]);
        let p = e.forward(&[3f64.ln(), 5.0]).unwrap();
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_gradient_at_zero() {
        let e = engine(&binary(), vec![0.0, 0.0]);
        let g = e.grad(&[1.0], 1, false).unwrap();
        assert_eq!(g, vec![-0.5, -0.5]);
    }

    #[test]
    fn binary_hvp_at_zero() {
        let e = engine(&binary(), vec![0.0, 0.0]);
        let h = e.hvp(&[Sample::new(&[1.0], 1)], &[1.0, 0.0], false).unwrap();
        assert_eq!(h, vec![0.25, 0.25]);
    }

    #[test]
    fn saturated_sample_leaves_only_reg_gradient() {
        let spec = ArchitectureSpec::softmax_linear(2, 3, 0.3);
        let theta = vec![40.0, 0.0, 0.0, -40.0, 0.0, 0.0];
        let e = engine(&spec, theta.clone());
        // class 1 logit = 40·10 = 400, saturating p_1 → 1
        let g = e.grad(&[10.0, 0.0], 1, true).unwrap();
        for r in spec.weight_ranges() {
            for i in r {
                assert!((g[i] - 0.3 * theta[i]).abs() < 1e-12, "coord {i}");
            }
        }
    }

    #[test]
    fn pure_regularizer_hvp_and_hessian() {
        // a single sample deep in saturation contributes no curvature
        let spec = ArchitectureSpec::softmax_linear(1, 2, 0.7);
        let e = engine(&spec, vec![1e3, 0.0]);
        let batch = [Sample::new(&[1.0], 1)];
        let v = [2.0, 0.0];
        let hv = e.hvp(&batch, &v, true).unwrap();
        assert!((hv[0] - 1.4).abs() < 1e-12 && hv[1].abs() < 1e-12);
        let h = e.build_hessian(&batch, 1.0).unwrap();
        assert!((h[(0, 0)] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn hvp_errors() {
        let e = engine(&binary(), vec![0.0, 0.0]);
        assert!(matches!(e.hvp(&[], &[1.0, 0.0], true), Err(Error::EmptyBatch)));
        assert!(e.hvp(&[Sample::new(&[1.0], 1)], &[1.0], true).is_err());
        assert!(matches!(
            e.loss(&[1.0], 2, false),
            Err(Error::InvalidLabel { label: 2, .. })
        ));
        assert!(e.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = RngStream::new(77);
        let specs = [
            ArchitectureSpec::softmax_linear(4, 3, 0.05),
            ArchitectureSpec::mlp(3, vec![5], Activation::Tanh, 4, 0.02),
            ArchitectureSpec::mlp(3, vec![4, 3], Activation::Softplus, 3, 0.01),
        ];
        for spec in &specs {
            for _ in 0..20 {
                let e = random_engine(spec, &mut rng, 0.5);
                let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
                let y = rng.below(spec.num_classes);
                let g = e.grad(&x, y, true).unwrap();
                let fd = finite_diff_grad(
                    |t| engine(spec, t.to_vec()).loss(&x, y, true).unwrap(),
                    e.params().as_slice(),
                    1e-5,
                )
                .unwrap();
                assert!(rel_err(&g, &fd) <= 1e-6, "rel err {}", rel_err(&g, &fd));
            }
        }
    }

    #[test]
    fn hvp_matches_differenced_gradients_and_is_symmetric() {
        let mut rng = RngStream::new(78);
        let spec = ArchitectureSpec::mlp(3, vec![4], Activation::Tanh, 3, 0.1);
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let batch: Vec<Sample> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| Sample::new(x, i % 3))
            .collect();
        let e = random_engine(&spec, &mut rng, 0.7);
        let p = spec.num_params();
        let v: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let u: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let hv = e.hvp(&batch, &v, true).unwrap();
        let hu = e.hvp(&batch, &u, true).unwrap();
        let h = 1e-5;
        let shifted = |s: f64| {
            let t: Vec<f64> = e
                .params()
                .as_slice()
                .iter()
                .zip(&v)
                .map(|(a, b)| a + s * b)
                .collect();
            engine(&spec, t).mean_grad(&batch, true).unwrap()
        };
        let gp = shifted(h);
        let gm = shifted(-h);
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(rel_err(&hv, &fd) <= 1e-5);
        assert!((dot(&u, &hv) - dot(&v, &hu)).abs() <= 1e-10);

        let hv2 = e
            .hvp(&batch, &v.iter().map(|a| 3.5 * a).collect::<Vec<_>>(), true)
            .unwrap();
        let scaled: Vec<f64> = hv.iter().map(|a| 3.5 * a).collect();
        assert!(hv2.iter().zip(&scaled).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn explicit_hessian_matches_hvp_columns() {
        let mut rng = RngStream::new(5);
        let spec = ArchitectureSpec::softmax_linear(3, 3, 0.2);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let batch: Vec<Sample> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| Sample::new(x, i % 3))
            .collect();
        let e = random_engine(&spec, &mut rng, 0.5);
        let h = e.build_hessian(&batch, 0.01).unwrap();
        assert!(h.asymmetry() <= 1e-12);
        for j in 0..spec.num_params() {
            let mut ej = vec![0.0; spec.num_params()];
            ej[j] = 1.0;
            let mut col = e.hvp(&batch, &ej, true).unwrap();
            col[j] += 0.01;
            for i in 0..spec.num_params() {
                assert!((h[(i, j)] - col[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn explicit_hessian_size_limit() {
        let spec = ArchitectureSpec::mlp(64, vec![64], Activation::Tanh, 3, 0.0);
        assert!(spec.num_params() > EXPLICIT_HESSIAN_LIMIT);
        let e = engine(&spec, vec![0.0; spec.num_params()]);
        let x = vec![0.0; 64];
        assert!(matches!(
            e.build_hessian(&[Sample::new(&x, 0)], 0.0),
            Err(Error::HessianTooLarge { .. })
        ));
    }

    #[test]
    fn predict_ties_break_low() {
        let spec = ArchitectureSpec::softmax_linear(2, 3, 0.0);
        let e = engine(&spec, vec![0.0; spec.num_params()]);
        assert_eq!(e.predict(&[1.0, 1.0]).unwrap(), 0);
    }
}
