//! Heteroscedastic regression network `y | x ~ N(mean(x), var(x) I)`.
//!
//! A rectifier trunk produces the penultimate features; two heads read them.
//! The mean head is a bias-free linear map so that `mean(x) = W features(x)`
//! exactly. The variance head emits a raw value mapped through
//! `softplus(raw) + floor`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_permutation, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    self, adam_step, fmt_f64, init_mlp_with_rng, next_line, numbered_lines, parse_num, Activation,
    AdamConfig, AdamState, Dense, ForwardTrace, InitConfig, InitScheme, MlpParams, ParamSet,
};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub variance_floor: f64,
    pub init: InitScheme,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 32],
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            init: InitScheme::He,
        }
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the base rate once by `factor` for the final `last_epochs`.
    DropOnce {
        factor: f64,
        last_epochs: usize,
    },
    /// Multiply by `factor` again in each of the final `last_epochs`.
    DropEach {
        factor: f64,
        last_epochs: usize,
    },
}

impl Schedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::DropOnce {
                factor,
                last_epochs,
            } => {
                if epoch >= epochs.saturating_sub(last_epochs) {
                    base * factor
                } else {
                    base
                }
            }
            Schedule::DropEach {
                factor,
                last_epochs,
            } => {
                let start = epochs.saturating_sub(last_epochs);
                if epoch >= start {
                    base * factor.powi((epoch - start + 1) as i32)
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    /// L2 strength, i.e. the prior precision.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            schedule: Schedule::DropOnce {
                factor: 0.1,
                last_epochs: 5,
            },
            lambda: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::config(format!(
                "batch size {} must lie in 1..={n}",
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.arch.hidden.is_empty() || self.arch.hidden.contains(&0) {
            return Err(Error::config(
                "need at least one hidden layer of positive width",
            ));
        }
        if !(self.arch.variance_floor > 0.0) {
            return Err(Error::config("variance floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroNet {
    trunk: MlpParams,
    mean_head: Dense,
    var_head: Dense,
    variance_floor: f64,
}

/// Point prediction at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Forward pass of a [`HeteroNet`] over a batch.
#[derive(Debug, Clone)]
pub struct HeteroTrace {
    trunk: ForwardTrace,
    /// `batch x p_y`
    pub mean: Vec<f64>,
    /// `batch`
    pub raw_variance: Vec<f64>,
    /// `batch`
    pub variance: Vec<f64>,
}

impl HeteroTrace {
    /// Penultimate features, `batch x p_feat`.
    pub fn features(&self) -> &[f64] {
        self.trunk.output()
    }

    pub fn trunk(&self) -> &ForwardTrace {
        &self.trunk
    }

    pub fn batch(&self) -> usize {
        self.trunk.batch()
    }
}

impl HeteroNet {
    pub fn from_parts(
        trunk: MlpParams,
        mean_head: Dense,
        var_head: Dense,
        variance_floor: f64,
    ) -> Result<Self> {
        let p = trunk.output_dim();
        if mean_head.in_dim() != p || var_head.in_dim() != p {
            return Err(Error::shape("heads must read the trunk output"));
        }
        if mean_head.bias().is_some() || mean_head.activation() != Activation::Identity {
            return Err(Error::config("mean head must be linear and bias-free"));
        }
        if var_head.out_dim() != 1 || var_head.activation() != Activation::Identity {
            return Err(Error::config("variance head must emit one raw value"));
        }
        if !(variance_floor > 0.0 && variance_floor.is_finite()) {
            return Err(Error::config("variance floor must be positive"));
        }
        Ok(Self {
            trunk,
            mean_head,
            var_head,
            variance_floor,
        })
    }

    /// Freshly initialised network; trunk, mean head and variance head draw
    /// from one stream in that order.
    pub fn init(p_x: usize, p_y: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![p_x];
        dims.extend_from_slice(&arch.hidden);
        let trunk_cfg = InitConfig {
            scheme: arch.init,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Relu,
            output_bias: true,
        };
        let trunk = init_mlp_with_rng(&dims, &trunk_cfg, &mut rng)?;
        let p = trunk.output_dim();
        let head_cfg = InitConfig {
            scheme: arch.init,
            hidden_activation: Activation::Identity,
            output_activation: Activation::Identity,
            output_bias: false,
        };
        let mean_head = init_mlp_with_rng(&[p, p_y], &head_cfg, &mut rng)?.layers()[0].clone();
        let var_cfg = InitConfig {
            output_bias: true,
            ..head_cfg
        };
        let var_head = init_mlp_with_rng(&[p, 1], &var_cfg, &mut rng)?.layers()[0].clone();
        Self::from_parts(trunk, mean_head, var_head, arch.variance_floor)
    }

    pub fn p_x(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn p_y(&self) -> usize {
        self.mean_head.out_dim()
    }

    /// Width of the penultimate layer.
    pub fn p_feat(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn trunk(&self) -> &MlpParams {
        &self.trunk
    }

    pub fn mean_head(&self) -> &Dense {
        &self.mean_head
    }

    pub fn mean_head_mut(&mut self) -> &mut Dense {
        &mut self.mean_head
    }

    pub fn var_head(&self) -> &Dense {
        &self.var_head
    }

    pub fn var_head_mut(&mut self) -> &mut Dense {
        &mut self.var_head
    }

    pub fn trunk_mut(&mut self) -> &mut MlpParams {
        &mut self.trunk
    }

    /// Row-major `p_y x p_feat` mean-head weights.
    pub fn mean_weights(&self) -> &[f64] {
        self.mean_head.weights()
    }

    pub fn variance_from_raw(&self, raw: f64) -> f64 {
        softplus(raw) + self.variance_floor
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Result<HeteroTrace> {
        let trunk = nn::forward(&self.trunk, x, batch)?;
        let feat = trunk.output();
        let mean = self.mean_head.affine_ordered(feat, batch);
        let raw_variance = self.var_head.affine_ordered(feat, batch);
        let variance = raw_variance
            .iter()
            .map(|&r| self.variance_from_raw(r))
            .collect();
        Ok(HeteroTrace {
            trunk,
            mean,
            raw_variance,
            variance,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let t = self.forward(x, 1)?;
        Ok(Prediction {
            mean: t.mean,
            variance: t.variance[0],
        })
    }

    /// Penultimate activations at one input.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(nn::forward(&self.trunk, x, 1)?.output().to_vec())
    }

    /// Zero-valued copy with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            mean_head: MlpParams::from_layers(vec![self.mean_head.clone()])
                .expect("single layer")
                .zeros_like()
                .layers()[0]
                .clone(),
            var_head: MlpParams::from_layers(vec![self.var_head.clone()])
                .expect("single layer")
                .zeros_like()
                .layers()[0]
                .clone(),
            variance_floor: self.variance_floor,
        }
    }
}

impl ParamSet for HeteroNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.trunk.tensors();
        t.extend(self.mean_head.tensors());
        t.extend(self.var_head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.trunk.tensors_mut();
        t.extend(self.mean_head.tensors_mut());
        t.extend(self.var_head.tensors_mut());
        t
    }
}

fn check_batch(net: &HeteroNet, x: &[f64], y: &[f64]) -> Result<usize> {
    if !x.len().is_multiple_of(net.p_x()) {
        return Err(Error::shape("input width mismatch"));
    }
    let n = x.len() / net.p_x();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    if y.len() != n * net.p_y() {
        return Err(Error::shape(format!(
            "{} targets for {} inputs with p_y = {}",
            y.len(),
            n,
            net.p_y()
        )));
    }
    Ok(n)
}

fn regularizer_scale(n: usize, n_total: usize, lambda: f64) -> Result<f64> {
    if n_total < n {
        return Err(Error::domain(format!(
            "batch of {n} exceeds the declared dataset size {n_total}"
        )));
    }
    Ok(n as f64 / n_total as f64 * lambda)
}

/// `½ Σ (‖y − mean‖² / var + p_y log var) + (|batch| / n_total) · (λ/2) ‖θ‖²`.
///
/// Summing over disjoint batches that cover the data once yields the
/// full-data loss with the penalty counted exactly once.
pub fn nll_loss(net: &HeteroNet, x: &[f64], y: &[f64], lambda: f64, n_total: usize) -> Result<f64> {
    let n = check_batch(net, x, y)?;
    let scale = regularizer_scale(n, n_total, lambda)?;
    let trace = net.forward(x, n)?;
    let loss = data_term(net.p_y(), &trace, y) + 0.5 * scale * net.squared_norm();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(loss)
}

fn data_term(p_y: usize, trace: &HeteroTrace, y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &var) in trace.variance.iter().enumerate() {
        let sq: f64 = trace.mean[i * p_y..(i + 1) * p_y]
            .iter()
            .zip(&y[i * p_y..(i + 1) * p_y])
            .map(|(m, t)| (t - m) * (t - m))
            .sum();
        total += sq / var + p_y as f64 * var.ln();
    }
    0.5 * total
}

/// Loss of [`nll_loss`] together with its gradient.
pub fn nll_loss_and_grad(
    net: &HeteroNet,
    x: &[f64],
    y: &[f64],
    lambda: f64,
    n_total: usize,
) -> Result<(f64, HeteroNet)> {
    let n = check_batch(net, x, y)?;
    let p_y = net.p_y();
    let scale = regularizer_scale(n, n_total, lambda)?;
    let trace = net.forward(x, n)?;
    let loss = data_term(p_y, &trace, y) + 0.5 * scale * net.squared_norm();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let mut d_mean = vec![0.0; n * p_y];
    let mut d_raw = vec![0.0; n];
    for i in 0..n {
        let var = trace.variance[i];
        let mut sq = 0.0;
        for r in 0..p_y {
            let resid = y[i * p_y + r] - trace.mean[i * p_y + r];
            sq += resid * resid;
            d_mean[i * p_y + r] = -resid / var;
        }
        let d_var = 0.5 * (p_y as f64 / var - sq / (var * var));
        d_raw[i] = d_var * sigmoid(trace.raw_variance[i]);
    }

    let feat = trace.features();
    let (mean_head, d_feat_mean) = head_backward(&net.mean_head, feat, &d_mean, n)?;
    let (var_head, d_feat_var) = head_backward(&net.var_head, feat, &d_raw, n)?;
    let d_feat: Vec<f64> = d_feat_mean
        .iter()
        .zip(&d_feat_var)
        .map(|(a, b)| a + b)
        .collect();
    let trunk = nn::backward(&trace.trunk, &net.trunk, &d_feat)?.grads;

    let mut grads = HeteroNet {
        trunk,
        mean_head,
        var_head,
        variance_floor: net.variance_floor,
    };
    if scale != 0.0 {
        for (g, p) in grads.tensors_mut().into_iter().zip(net.tensors()) {
            for (gi, pi) in g.iter_mut().zip(p) {
                *gi += scale * pi;
            }
        }
    }
    Ok((loss, grads))
}

fn head_backward(head: &Dense, feat: &[f64], d_out: &[f64], n: usize) -> Result<(Dense, Vec<f64>)> {
    let single = MlpParams::from_layers(vec![head.clone()])?;
    let trace = nn::forward(&single, feat, n)?;
    let back = nn::backward(&trace, &single, d_out)?;
    Ok((back.grads.layers()[0].clone(), back.input_grad))
}

/// Result of one MAP training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: HeteroNet,
    /// Sum of mini-batch losses in each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train one network to a MAP estimate with mini-batch Adam.
pub fn train_map(data: &Dataset, cfg: &TrainConfig) -> Result<HeteroNet> {
    train_map_with_history(data, cfg).map(|o| o.net)
}

pub fn train_map_with_history(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let net = HeteroNet::init(data.p_x(), data.p_y(), &cfg.arch, cfg.seed)?;
    train_from(net, data, cfg)
}

/// Continue training from `net`. Shuffles use stream `epoch + 1` of the
/// generator seeded with `cfg.seed`; initialisation uses stream 0.
pub fn train_from(mut net: HeteroNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let n = data.len();
    cfg.validate(n)?;
    if data.p_x() != net.p_x() || data.p_y() != net.p_y() {
        return Err(Error::shape("dataset dimensions do not match the network"));
    }
    let (p_x, p_y) = (data.p_x(), data.p_y());
    let mut adam = AdamState::new(&net, AdamConfig::default());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut bx = Vec::with_capacity(cfg.batch_size * p_x);
    let mut by = Vec::with_capacity(cfg.batch_size * p_y);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let order = epoch_permutation(n, &mut rng);
        let lr = cfg.schedule.rate(cfg.lr, epoch, cfg.epochs);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            bx.clear();
            by.clear();
            for &i in idx {
                bx.extend_from_slice(data.input(i));
                by.extend_from_slice(data.target(i));
            }
            let diverged = |reason: String| Error::Training {
                member: None,
                epoch,
                batch,
                reason,
            };
            let (loss, grads) = nll_loss_and_grad(&net, &bx, &by, cfg.lambda, n)
                .map_err(|e| diverged(e.to_string()))?;
            adam_step(&mut net, &grads, &mut adam, lr).map_err(|e| diverged(e.to_string()))?;
            epoch_loss += loss;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Training {
                member: None,
                epoch,
                batch: 0,
                reason: "non-finite epoch loss".into(),
            });
        }
        epoch_losses.push(epoch_loss);
    }
    if !net.is_finite_params() {
        return Err(Error::Training {
            member: None,
            epoch: cfg.epochs.saturating_sub(1),
            batch: 0,
            reason: "non-finite parameters after training".into(),
        });
    }
    Ok(TrainOutcome { net, epoch_losses })
}

impl HeteroNet {
    fn is_finite_params(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "hetero 1");
        let _ = writeln!(out, "floor {}", fmt_f64(self.variance_floor));
        self.trunk.write_text(out);
        MlpParams::from_layers(vec![self.mean_head.clone()])
            .expect("single layer")
            .write_text(out);
        MlpParams::from_layers(vec![self.var_head.clone()])
            .expect("single layer")
            .write_text(out);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = numbered_lines(text);
        let (row, header) = next_line(&mut lines, "hetero header")?;
        if header != "hetero 1" {
            return Err(Error::Format(format!("line {row}: expected `hetero 1`")));
        }
        let (row, floor_line) = next_line(&mut lines, "floor")?;
        let floor = match floor_line.split_whitespace().collect::<Vec<_>>()[..] {
            ["floor", v] => parse_num::<f64>(v, row, 2)?,
            _ => {
                return Err(Error::Format(format!(
                    "line {row}: expected `floor <value>`"
                )))
            }
        };
        let trunk = MlpParams::read_text(&mut lines)?;
        let mean = MlpParams::read_text(&mut lines)?;
        let var = MlpParams::read_text(&mut lines)?;
        if mean.layers().len() != 1 || var.layers().len() != 1 {
            return Err(Error::Format("heads must be single layers".into()));
        }
        Self::from_parts(
            trunk,
            mean.layers()[0].clone(),
            var.layers()[0].clone(),
            floor,
        )
    }
}
