//! Fully connected network with optional batch norm per layer.
//!
//! Each layer computes `z = a·Wᵀ + b`, optionally batch-normalizes `z`, then
//! applies its activation. The post-activation output of
//! `feature_tap` is exposed as the feature representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `out × in`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub bn: Option<BnState>,
    pub activation: Activation,
}

impl LinearLayer {
    pub fn in_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn has_bn(&self) -> bool {
        self.bn.is_some()
    }
}

/// Layer widths plus BN/tap placement; enough to rebuild a model skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[input, hidden..., output]`
    pub widths: Vec<usize>,
    /// BN after every hidden linear layer.
    pub batch_norm: bool,
    pub feature_tap: usize,
}

impl Architecture {
    /// 2 → 100 → 500 → 3, features taken after the 500-wide layer.
    pub fn toy_classifier(batch_norm: bool) -> Self {
        Self {
            widths: vec![2, 100, 500, 3],
            batch_norm,
            feature_tap: 1,
        }
    }

    pub fn toy_generator(noise_dim: usize) -> Self {
        Self {
            widths: vec![noise_dim, 64, 64, 2],
            batch_norm: false,
            feature_tap: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<LinearLayer>,
    feature_tap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    pre: DenseMatrix,
    /// Normalized pre-activations and the inverse std used, BN layers only.
    xhat: Option<DenseMatrix>,
    inv_std: Option<Vec<f64>>,
    act_in: DenseMatrix,
    out: DenseMatrix,
}

/// Intermediate values of one forward pass, consumed by [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    input: DenseMatrix,
    layers: Vec<LayerCache>,
    /// Observed batch mean/var of pre-BN activations, `Some` exactly for BN layers.
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &DenseMatrix {
        &self.input
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.layers.last().expect("non-empty model").out
    }

    pub fn layer_output(&self, layer: usize) -> &DenseMatrix {
        &self.layers[layer].out
    }

    pub fn pre_activation(&self, layer: usize) -> &DenseMatrix {
        &self.layers[layer].pre
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: DenseMatrix,
    pub features: DenseMatrix,
    pub trace: ForwardTrace,
}

/// Upstream gradients fed into [`MlpModel::backward`]. Any part may be absent.
#[derive(Debug, Clone, Default)]
pub struct Cotangents {
    pub logits: Option<DenseMatrix>,
    pub features: Option<DenseMatrix>,
    /// Per layer; gradient w.r.t. the recorded batch mean / variance.
    pub batch_mean: Vec<Option<Vec<f64>>>,
    pub batch_var: Vec<Option<Vec<f64>>>,
}

impl Cotangents {
    pub fn logits(d: DenseMatrix) -> Self {
        Self {
            logits: Some(d),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

impl ModelGrads {
    /// Flat views in the same order as [`MlpModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for g in &self.layers {
            out.push(g.weight.as_slice());
            out.push(g.bias.as_slice());
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push(gm.as_slice());
                out.push(bt.as_slice());
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(1.0, &b.weight).expect("same model");
            add_vec(&mut a.bias, &b.bias);
            if let (Some(x), Some(y)) = (a.gamma.as_mut(), b.gamma.as_ref()) {
                add_vec(x, y);
            }
            if let (Some(x), Some(y)) = (a.beta.as_mut(), b.beta.as_ref()) {
                add_vec(x, y);
            }
        }
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl MlpModel {
    pub fn new(layers: Vec<LinearLayer>, feature_tap: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        if feature_tap >= layers.len() {
            return Err(Error::InvalidArgument(format!(
                "feature tap {feature_tap} out of range for {} layers",
                layers.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::shape(
                    "MlpModel::new",
                    format!("layer {} input width {}", i + 1, pair[0].out_width()),
                    pair[1].in_width(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_width() {
                return Err(Error::shape("MlpModel::new", l.out_width(), l.bias.len()));
            }
            if let Some(bn) = &l.bn {
                let w = l.out_width();
                if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                    .iter()
                    .any(|v| v.len() != w)
                {
                    return Err(Error::shape("MlpModel::new", format!("bn width {w}"), i));
                }
                if bn.running_var.iter().any(|&v| v <= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i}: running variance must be positive"
                    )));
                }
            }
        }
        let last = layers.last().unwrap();
        if last.activation != Activation::None || last.has_bn() {
            return Err(Error::InvalidArgument(
                "final layer must be linear without batch norm".into(),
            ));
        }
        Ok(Self {
            layers,
            feature_tap,
        })
    }

    /// Uniform(±1/√fan_in) weights and biases, identity BN.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.widths.len() < 2 {
            return Err(Error::InvalidArgument("architecture needs ≥ 2 widths".into()));
        }
        let n_layers = arch.widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, w) in arch.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let hidden = i + 1 < n_layers;
            layers.push(LinearLayer {
                weight: DenseMatrix::from_vec(fan_out, fan_in, weight)?,
                bias,
                bn: (hidden && arch.batch_norm).then(|| BnState::new(fan_out)),
                activation: if hidden { Activation::Relu } else { Activation::None },
            });
        }
        Self::new(layers, arch.feature_tap)
    }

    pub fn architecture(&self) -> Architecture {
        let mut widths = vec![self.input_width()];
        widths.extend(self.layers.iter().map(LinearLayer::out_width));
        Architecture {
            widths,
            batch_norm: self.layers.iter().any(LinearLayer::has_bn),
            feature_tap: self.feature_tap,
        }
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    pub fn has_bn(&self) -> bool {
        self.layers.iter().any(LinearLayer::has_bn)
    }

    /// Trainable parameter buffers: per layer weight, bias, then gamma, beta if BN.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            if let Some(bn) = &mut l.bn {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
            if let Some(bn) = &l.bn {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Forward pass. Train mode normalizes BN layers with batch statistics and
    /// folds them into the running statistics.
    pub fn forward(&mut self, x: &DenseMatrix, mode: Mode) -> Result<Forward> {
        let out = self.forward_frozen(x, mode)?;
        if mode == Mode::Train {
            self.update_running_stats(&out.trace);
        }
        Ok(out)
    }

    /// Forward pass in either mode that leaves the running statistics alone.
    pub fn forward_frozen(&self, x: &DenseMatrix, mode: Mode) -> Result<Forward> {
        let trace = self.run(x, mode)?;
        Ok(self.package(trace))
    }

    /// Momentum update of BN running statistics from a train-mode trace.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        for (layer, stats) in self.layers.iter_mut().zip(&trace.batch_stats) {
            if let (Some(bn), Some(s)) = (layer.bn.as_mut(), stats) {
                let m = bn.momentum;
                for c in 0..bn.width() {
                    bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * s.mean[c];
                    bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * s.var[c];
                }
            }
        }
    }

    /// Eval-mode forward on a shared model.
    pub fn eval(&self, x: &DenseMatrix) -> Result<Forward> {
        self.forward_frozen(x, Mode::Eval)
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.eval(x)?.logits)
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    fn package(&self, trace: ForwardTrace) -> Forward {
        Forward {
            logits: trace.logits().clone(),
            features: trace.layers[self.feature_tap].out.clone(),
            trace,
        }
    }

    fn run(&self, x: &DenseMatrix, mode: Mode) -> Result<ForwardTrace> {
        if x.cols() != self.input_width() {
            return Err(Error::shape("forward", self.input_width(), x.cols()));
        }
        let n = x.rows();
        if mode == Mode::Train && self.has_bn() && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = caches.last().map_or(x, |c| &c.out);
            let mut pre = input.matmul_t(&layer.weight)?;
            pre.add_row_vector(&layer.bias);

            let (act_in, xhat, inv_std, stats) = match &layer.bn {
                None => (pre.clone(), None, None, None),
                Some(bn) => {
                    let mean = pre.col_means();
                    let var = pre.col_vars(&mean);
                    let (mu, v) = match mode {
                        Mode::Train => (&mean, &var),
                        Mode::Eval => (&bn.running_mean, &bn.running_var),
                    };
                    let inv: Vec<f64> = v.iter().map(|s| 1.0 / (s + bn.epsilon).sqrt()).collect();
                    let mut xh = pre.clone();
                    let mut y = DenseMatrix::zeros(n, layer.out_width());
                    for i in 0..n {
                        let xr = xh.row_mut(i);
                        for c in 0..xr.len() {
                            xr[c] = (xr[c] - mu[c]) * inv[c];
                        }
                        let yr = y.row_mut(i);
                        for c in 0..yr.len() {
                            yr[c] = bn.gamma[c] * xr[c] + bn.beta[c];
                        }
                    }
                    (y, Some(xh), Some(inv), Some(BatchStats { mean, var }))
                }
            };
            let out = match layer.activation {
                Activation::Relu => act_in.map(|v| v.max(0.0)),
                Activation::None => act_in.clone(),
            };
            batch_stats.push(stats);
            caches.push(LayerCache {
                pre,
                xhat,
                inv_std,
                act_in,
                out,
            });
        }
        Ok(ForwardTrace {
            mode,
            input: x.clone(),
            layers: caches,
            batch_stats,
        })
    }

    /// Reverse pass for the loss whose gradient w.r.t. logits is `d_logits`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: &DenseMatrix,
    ) -> Result<(ModelGrads, DenseMatrix)> {
        self.backward_with(trace, &Cotangents::logits(d_logits.clone()))
    }

    /// Reverse pass with cotangents on logits, features and recorded batch statistics.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        cot: &Cotangents,
    ) -> Result<(ModelGrads, DenseMatrix)> {
        let (grads, dx) = self.reverse(trace, cot, true)?;
        Ok((grads.expect("requested"), dx))
    }

    /// Gradient w.r.t. the input only; skips the weight-gradient products.
    pub fn input_gradient(&self, trace: &ForwardTrace, cot: &Cotangents) -> Result<DenseMatrix> {
        Ok(self.reverse(trace, cot, false)?.1)
    }

    fn reverse(
        &self,
        trace: &ForwardTrace,
        cot: &Cotangents,
        want_params: bool,
    ) -> Result<(Option<ModelGrads>, DenseMatrix)> {
        self.check_trace(trace)?;
        let n = trace.input.rows();
        let nf = n as f64;
        let last = self.layers.len() - 1;
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());

        let mut d_out = DenseMatrix::zeros(n, self.layers[last].out_width());
        if let Some(d) = &cot.logits {
            d_out.add_assign(d)?;
        }

        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let cache = &trace.layers[idx];
            if idx == self.feature_tap {
                if let Some(d) = &cot.features {
                    d_out.add_assign(d)?;
                }
            }
            let mut d_act_in = d_out;
            if layer.activation == Activation::Relu {
                for (g, &a) in d_act_in
                    .as_mut_slice()
                    .iter_mut()
                    .zip(cache.act_in.as_slice())
                {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }

            let (mut d_pre, gamma_grad, beta_grad) = match &layer.bn {
                None => (d_act_in, None, None),
                Some(bn) => {
                    let xhat = cache.xhat.as_ref().expect("bn cache");
                    let inv = cache.inv_std.as_ref().expect("bn cache");
                    let width = bn.width();
                    let mut dgamma = vec![0.0; width];
                    let dbeta = d_act_in.col_sums();
                    let mut d_xhat = d_act_in;
                    for i in 0..n {
                        let xr = xhat.row(i);
                        let dr = d_xhat.row_mut(i);
                        for c in 0..width {
                            dgamma[c] += dr[c] * xr[c];
                            dr[c] *= bn.gamma[c];
                        }
                    }
                    let mut d_pre = d_xhat;
                    match trace.mode {
                        Mode::Train => {
                            let sum_d = d_pre.col_sums();
                            let mut sum_dx = vec![0.0; width];
                            for i in 0..n {
                                let xr = xhat.row(i);
                                let dr = d_pre.row(i);
                                for c in 0..width {
                                    sum_dx[c] += dr[c] * xr[c];
                                }
                            }
                            for i in 0..n {
                                let xr = xhat.row(i);
                                let dr = d_pre.row_mut(i);
                                for c in 0..width {
                                    dr[c] = inv[c] / nf
                                        * (nf * dr[c] - sum_d[c] - xr[c] * sum_dx[c]);
                                }
                            }
                        }
                        Mode::Eval => {
                            for i in 0..n {
                                let dr = d_pre.row_mut(i);
                                for c in 0..width {
                                    dr[c] *= inv[c];
                                }
                            }
                        }
                    }
                    (d_pre, Some(dgamma), Some(dbeta))
                }
            };

            // Direct dependence of the recorded batch statistics on `pre`.
            let d_mean = cot.batch_mean.get(idx).and_then(Option::as_ref);
            let d_var = cot.batch_var.get(idx).and_then(Option::as_ref);
            if d_mean.is_some() || d_var.is_some() {
                let stats = trace.batch_stats[idx].as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {idx} has no batch statistics"))
                })?;
                for i in 0..n {
                    let zr = cache.pre.row(i);
                    let dr = d_pre.row_mut(i);
                    for c in 0..dr.len() {
                        if let Some(dm) = d_mean {
                            dr[c] += dm[c] / nf;
                        }
                        if let Some(dv) = d_var {
                            dr[c] += dv[c] * 2.0 * (zr[c] - stats.mean[c]) / nf;
                        }
                    }
                }
            }

            let input = if idx == 0 {
                &trace.input
            } else {
                &trace.layers[idx - 1].out
            };
            if want_params {
                grads.push(LayerGrads {
                    weight: d_pre.t_matmul(input)?,
                    bias: d_pre.col_sums(),
                    gamma: gamma_grad,
                    beta: beta_grad,
                });
            }
            d_out = d_pre.matmul(&layer.weight)?;
        }
        grads.reverse();
        Ok((want_params.then_some(ModelGrads { layers: grads }), d_out))
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.layers.len() != self.layers.len() || trace.input.cols() != self.input_width() {
            return Err(Error::shape(
                "backward",
                format!("trace of {} layers", self.layers.len()),
                trace.layers.len(),
            ));
        }
        for (i, (l, c)) in self.layers.iter().zip(&trace.layers).enumerate() {
            if c.pre.cols() != l.out_width() || c.xhat.is_some() != l.has_bn() {
                return Err(Error::shape(
                    "backward",
                    format!("layer {i} width {}", l.out_width()),
                    c.pre.cols(),
                ));
            }
        }
        Ok(())
    }

    /// Zero gradients shaped like this model.
    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: DenseMatrix::zeros(l.out_width(), l.in_width()),
                    bias: vec![0.0; l.out_width()],
                    gamma: l.bn.as_ref().map(|b| vec![0.0; b.width()]),
                    beta: l.bn.as_ref().map(|b| vec![0.0; b.width()]),
                })
                .collect(),
        }
    }

    /// FNV-1a over the bit patterns of every parameter and running statistic.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |vals: &[f64]| {
            for v in vals {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        for l in &self.layers {
            feed(l.weight.as_slice());
            feed(&l.bias);
            if let Some(bn) = &l.bn {
                feed(&bn.gamma);
                feed(&bn.beta);
                feed(&bn.running_mean);
                feed(&bn.running_var);
            }
        }
        h
    }
}
