//! Minimal dense network engine.
//!
//! Everything works on mini-batches stored row-major: a batch of `n` inputs of
//! width `d` is a `Vec<f64>` of length `n * d`. Layer weights are row-major
//! `(out, in)` matrices, so a layer computes `Z = X Wᵀ + b` for the whole batch.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Zeros,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform on `±sqrt(6 / fan_in)`.
    He,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub scheme: InitScheme,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub output_bias: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scheme: InitScheme::He,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            output_bias: false,
        }
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::shape(format!(
                "weight matrix has {} entries, expected {}x{}",
                weights.len(),
                out_dim,
                in_dim
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::shape(format!(
                    "bias has {} entries, expected {}",
                    b.len(),
                    out_dim
                )));
            }
        }
        let layer = Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        };
        if !layer.is_finite() {
            return Err(Error::Numeric("non-finite layer parameter".into()));
        }
        Ok(layer)
    }

    pub fn zeros(
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            bias.then(|| vec![0.0; out_dim]),
            activation,
        )
    }

    fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Activation,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim, bias, activation)?;
        let limit = match scheme {
            InitScheme::Zeros => return Ok(layer),
            InitScheme::Xavier => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            InitScheme::He => (6.0 / in_dim as f64).sqrt(),
        };
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        for w in &mut layer.weights {
            *w = dist.sample(rng);
        }
        Ok(layer)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    #[inline]
    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
            && self.bias.iter().flatten().all(|v| v.is_finite())
    }

    /// Pre-activations `X Wᵀ + b` for a batch of `n` rows.
    pub fn affine(&self, input: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), n * self.in_dim);
        let mut z = match &self.bias {
            Some(b) => {
                let mut z = Vec::with_capacity(n * self.out_dim);
                for _ in 0..n {
                    z.extend_from_slice(b);
                }
                z
            }
            None => vec![0.0; n * self.out_dim],
        };
        // Z (n x out) += X (n x in) * Wᵀ (in x out)
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            input,
            (self.in_dim, 1),
            &self.weights,
            (1, self.in_dim),
            &mut z,
            1.0,
        );
        z
    }

    /// Same as [`Dense::affine`], but every output is accumulated as
    /// `b + w_0 x_0 + w_1 x_1 + ...` in index order, so it equals a plain
    /// left-to-right dot product bit for bit. Meant for small head layers.
    pub fn affine_ordered(&self, input: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), n * self.in_dim);
        let mut z = Vec::with_capacity(n * self.out_dim);
        for row in input.chunks_exact(self.in_dim).take(n) {
            for o in 0..self.out_dim {
                let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias.as_ref().map_or(0.0, |b| b[o]);
                for (wi, xi) in w.iter().zip(row) {
                    acc += wi * xi;
                }
                z.push(acc);
            }
        }
        z
    }

    /// Gradient w.r.t. this layer's parameters and input, given the gradient
    /// w.r.t. its pre-activations.
    fn backward_affine(&self, input: &[f64], dz: &[f64], n: usize) -> (Dense, Vec<f64>) {
        let mut grad = Dense {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: vec![0.0; self.weights.len()],
            bias: self.bias.as_ref().map(|_| vec![0.0; self.out_dim]),
            activation: self.activation,
        };
        // dW (out x in) = dZᵀ (out x n) * X (n x in)
        gemm(
            self.out_dim,
            n,
            self.in_dim,
            dz,
            (1, self.out_dim),
            input,
            (self.in_dim, 1),
            &mut grad.weights,
            0.0,
        );
        if let Some(db) = grad.bias.as_mut() {
            for row in dz.chunks_exact(self.out_dim) {
                for (acc, g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
        }
        // dX (n x in) = dZ (n x out) * W (out x in)
        let mut dx = vec![0.0; n * self.in_dim];
        gemm(
            n,
            self.out_dim,
            self.in_dim,
            dz,
            (self.out_dim, 1),
            &self.weights,
            (self.in_dim, 1),
            &mut dx,
            0.0,
        );
        (grad, dx)
    }
}

/// `C (m x n) = A (m x k) * B (k x n) + beta * C`, with `C` dense row-major and
/// arbitrary (row, col) strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// An ordered chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// A copy with every parameter set to zero, keeping shapes and tags.
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                weights: vec![0.0; l.weights.len()],
                bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
                ..l.clone()
            })
            .collect();
        Self { layers }
    }
}

/// Initialise a network with the given layer widths.
///
/// Hidden layers get `cfg.hidden_activation` and a zero bias; the last layer
/// gets `cfg.output_activation` and a bias only when `cfg.output_bias` is set.
pub fn init_mlp(layer_dims: &[usize], cfg: &InitConfig, seed: u64) -> Result<MlpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_mlp_with_rng(layer_dims, cfg, &mut rng)
}

pub fn init_mlp_with_rng<R: Rng + ?Sized>(
    layer_dims: &[usize],
    cfg: &InitConfig,
    rng: &mut R,
) -> Result<MlpParams> {
    if layer_dims.len() < 2 {
        return Err(Error::config("need at least input and output dimensions"));
    }
    if let Some(pos) = layer_dims.iter().position(|&d| d == 0) {
        return Err(Error::config(format!("layer dimension {pos} is zero")));
    }
    let last = layer_dims.len() - 2;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (activation, bias) = if i == last {
                (cfg.output_activation, cfg.output_bias)
            } else {
                (cfg.hidden_activation, true)
            };
            Dense::random(w[0], w[1], bias, activation, cfg.scheme, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    MlpParams::from_layers(layers)
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn activations(&self, layer: usize) -> &[f64] {
        &self.post[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.post.len()
    }

    /// Output of the last layer, `batch x output_dim`.
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn forward(params: &MlpParams, x: &[f64], batch: usize) -> Result<ForwardTrace> {
    let in_dim = params.input_dim();
    if x.len() != batch * in_dim {
        return Err(Error::shape(format!(
            "input has {} values, expected {} rows of width {}",
            x.len(),
            batch,
            in_dim
        )));
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = post.last().map(Vec::as_slice).unwrap_or(x);
        let z = layer.affine(input, batch);
        let a = match layer.activation {
            Activation::Identity => z.clone(),
            act => z.iter().map(|&v| act.apply(v)).collect(),
        };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardTrace {
        batch,
        input: x.to_vec(),
        pre,
        post,
    })
}

/// Result of reverse accumulation through an [`MlpParams`].
#[derive(Debug, Clone)]
pub struct Backward {
    /// Same shape as the parameters.
    pub grads: MlpParams,
    /// Gradient w.r.t. the network input, `batch x input_dim`.
    pub input_grad: Vec<f64>,
}

/// Reverse-mode gradient of a scalar objective, given its gradient w.r.t. the
/// network output (`batch x output_dim`).
pub fn backward(trace: &ForwardTrace, params: &MlpParams, output_grad: &[f64]) -> Result<Backward> {
    if trace.num_layers() != params.layers.len() {
        return Err(Error::shape("trace was produced by a different network"));
    }
    let n = trace.batch;
    if output_grad.len() != n * params.output_dim() {
        return Err(Error::shape(format!(
            "output gradient has {} values, expected {}x{}",
            output_grad.len(),
            n,
            params.output_dim()
        )));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut upstream = output_grad.to_vec();
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        if trace.pre[idx].len() != n * layer.out_dim {
            return Err(Error::shape("trace does not match layer shapes"));
        }
        let mut dz = upstream;
        if layer.activation != Activation::Identity {
            for (g, &z) in dz.iter_mut().zip(&trace.pre[idx]) {
                *g *= layer.activation.derivative(z);
            }
        }
        let input = if idx == 0 {
            trace.input.as_slice()
        } else {
            trace.post[idx - 1].as_slice()
        };
        let (g, dx) = layer.backward_affine(input, &dz, n);
        grads.push(g);
        upstream = dx;
    }
    grads.reverse();
    Ok(Backward {
        grads: MlpParams { layers: grads },
        input_grad: upstream,
    })
}

/// Anything that exposes its trainable parameters as a fixed sequence of
/// flat tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }
}

impl ParamSet for Dense {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.weights.as_slice()];
        if let Some(b) = &self.bias {
            out.push(b.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.weights.as_mut_slice()];
        if let Some(b) = &mut self.bias {
            out.push(b.as_mut_slice());
        }
        out
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    shapes: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let shapes = params.shapes();
        let total = shapes.iter().sum();
        Self {
            config,
            shapes,
            m: vec![0.0; total],
            v: vec![0.0; total],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One bias-corrected Adam update, in place.
///
/// Nothing is modified when the gradient contains a non-finite entry.
pub fn adam_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let grad_tensors = grads.tensors();
    let shapes: Vec<usize> = grad_tensors.iter().map(|t| t.len()).collect();
    if shapes != state.shapes || params.shapes() != state.shapes {
        return Err(Error::shape(
            "optimizer state does not match parameter shapes",
        ));
    }
    if grad_tensors
        .iter()
        .flat_map(|t| t.iter())
        .any(|g| !g.is_finite())
    {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut offset = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grad_tensors) {
        let m = &mut state.m[offset..offset + g.len()];
        let v = &mut state.v[offset..offset + g.len()];
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        offset += g.len();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Text serialization
//
//   mlp <num_layers>
//   layer <in> <out> <activation> <bias|nobias>
//   <out lines of `in` weights>
//   [one line of `out` biases]
//
// Values use 17 significant digits so a round trip is bit-exact.
// ---------------------------------------------------------------------------

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

impl MlpParams {
    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "mlp {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(
                out,
                "layer {} {} {} {}",
                l.in_dim,
                l.out_dim,
                l.activation.tag(),
                if l.bias.is_some() { "bias" } else { "nobias" }
            );
            for row in l.weights.chunks_exact(l.in_dim) {
                write_row(out, row);
            }
            if let Some(b) = &l.bias {
                write_row(out, b);
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn read_text<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let (row, header) = next_line(lines, "mlp header")?;
        let count: usize = match header.split_whitespace().collect::<Vec<_>>()[..] {
            ["mlp", n] => parse_num(n, row, 2)?,
            _ => return Err(Error::Format(format!("line {row}: expected `mlp <count>`"))),
        };
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (row, spec) = next_line(lines, "layer header")?;
            let fields: Vec<&str> = spec.split_whitespace().collect();
            let (in_dim, out_dim, act, has_bias) = match fields[..] {
                ["layer", i, o, a, b] => {
                    let act = Activation::from_tag(a).ok_or_else(|| {
                        Error::Format(format!("line {row}: unknown activation `{a}`"))
                    })?;
                    let has_bias = match b {
                        "bias" => true,
                        "nobias" => false,
                        _ => return Err(Error::Format(format!("line {row}: bad bias tag `{b}`"))),
                    };
                    (parse_num(i, row, 2)?, parse_num(o, row, 3)?, act, has_bias)
                }
                _ => return Err(Error::Format(format!("line {row}: malformed layer header"))),
            };
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                weights.extend(read_row(lines, in_dim)?);
            }
            let bias = if has_bias {
                Some(read_row(lines, out_dim)?)
            } else {
                None
            };
            layers.push(Dense::new(in_dim, out_dim, weights, bias, act)?);
        }
        MlpParams::from_layers(layers)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = numbered_lines(text);
        Self::read_text(&mut lines)
    }
}

pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn next_line<'a, I>(lines: &mut I, what: &str) -> Result<(usize, &'a str)>
where
    I: Iterator<Item = (usize, &'a str)>,
{
    lines
        .next()
        .ok_or_else(|| Error::Format(format!("unexpected end of input, expected {what}")))
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str, row: usize, col: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        row,
        col,
        msg: format!("cannot parse `{s}`"),
    })
}

pub(crate) fn read_row<'a, I>(lines: &mut I, expected: usize) -> Result<Vec<f64>>
where
    I: Iterator<Item = (usize, &'a str)>,
{
    let (row, line) = next_line(lines, "a row of values")?;
    let values = line
        .split_whitespace()
        .enumerate()
        .map(|(c, v)| parse_num::<f64>(v, row, c + 1))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::Format(format!(
            "line {row}: expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}
