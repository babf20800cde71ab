//! A small pre-norm decoder-only transformer with exact backpropagation.
//!
//! Each block is `h += W_O · attn(rms(h))` followed by `h += W_down · φ(W_up · rms(h))`
//! where `rms` is a parameter-free RMS normalization, attention is causal
//! multi-head softmax attention with rotary position embeddings on queries and
//! keys, and `φ` is SiLU (or `silu(W_gate·) ⊙ W_up·` when gated). Projections carry
//! no biases, so every tracked weight gradient is exactly `Σ_t δ_t x_tᵀ` and
//! backward exposes those `(x_t, δ_t)` pairs as [`LayerTap`]s.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{check_tokens, Token};
use crate::linalg::Mat;
use crate::math;
use crate::rng;
use crate::{Error, Result};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub mlp_ratio: f64,
    pub rope_base: f64,
    pub gated_mlp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_context: 64,
            mlp_ratio: 8.0 / 3.0,
            rope_base: 10_000.0,
            gated_mlp: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidArgument(
                "head_dim must be even for rotary embeddings".into(),
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::InvalidArgument("mlp hidden size must be ≥ 1".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::InvalidArgument("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        math::round(self.mlp_ratio * self.hidden_dim as f64) as usize
    }

    /// `(d_out, d_in)` of the weight behind a tap kind.
    pub fn kind_shape(&self, kind: TapKind) -> (usize, usize) {
        let d = self.hidden_dim;
        let m = self.mlp_hidden();
        match kind {
            TapKind::Query | TapKind::Key | TapKind::Value | TapKind::AttnOut => (d, d),
            TapKind::QkvJoint => (3 * d, d),
            TapKind::MlpUp | TapKind::MlpGate => (m, d),
            TapKind::MlpDown => (d, m),
        }
    }
}

/// Which weight a tap (or a tracked curvature block) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapKind {
    Query,
    Key,
    Value,
    /// `W_Q`, `W_K`, `W_V` stacked row-wise into one `3d × d` block.
    QkvJoint,
    AttnOut,
    MlpUp,
    MlpGate,
    MlpDown,
}

impl TapKind {
    pub const ALL: [TapKind; 8] = [
        TapKind::Query,
        TapKind::Key,
        TapKind::Value,
        TapKind::QkvJoint,
        TapKind::AttnOut,
        TapKind::MlpUp,
        TapKind::MlpGate,
        TapKind::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapKind::Query => "query",
            TapKind::Key => "key",
            TapKind::Value => "value",
            TapKind::QkvJoint => "qkv-joint",
            TapKind::AttnOut => "attn-out",
            TapKind::MlpUp => "mlp-1",
            TapKind::MlpGate => "mlp-gate",
            TapKind::MlpDown => "mlp-2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Per-token `(x_t, δ_t)` for one weight: `x` is `T × d_in`, `delta` is `T × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub layer: usize,
    pub kind: TapKind,
    pub x: Mat,
    pub delta: Mat,
}

impl LayerTap {
    pub fn tokens(&self) -> usize {
        self.x.rows()
    }

    /// `vec(Σ_t δ_t x_tᵀ)`, row-major.
    pub fn weight_gradient(&self) -> Vec<f64> {
        self.delta.t_matmul(&self.x).into_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackedLayer {
    pub layer: usize,
    pub kind: TapKind,
}

/// How attention projections are grouped into curvature blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkvMode {
    Joint,
    Independent,
}

/// The tracked-layer registry: every attention and MLP weight, embeddings and head excluded.
pub fn tracked_layers(config: &ModelConfig, mode: QkvMode) -> Vec<TrackedLayer> {
    let mut out = Vec::new();
    for layer in 0..config.n_layers {
        let mut push = |kind| out.push(TrackedLayer { layer, kind });
        match mode {
            QkvMode::Joint => push(TapKind::QkvJoint),
            QkvMode::Independent => {
                push(TapKind::Query);
                push(TapKind::Key);
                push(TapKind::Value);
            }
        }
        push(TapKind::AttnOut);
        push(TapKind::MlpUp);
        if config.gated_mlp {
            push(TapKind::MlpGate);
        }
        push(TapKind::MlpDown);
    }
    out
}

/// One flat vector per tracked layer (gradients, iHVPs, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVectors {
    pub layers: Vec<TrackedLayer>,
    pub data: Vec<Vec<f64>>,
}

impl LayerVectors {
    pub fn zeros(config: &ModelConfig, layers: &[TrackedLayer]) -> Self {
        Self {
            layers: layers.to_vec(),
            data: layers
                .iter()
                .map(|l| {
                    let (o, i) = config.kind_shape(l.kind);
                    vec![0.0; o * i]
                })
                .collect(),
        }
    }

    pub fn get(&self, layer: TrackedLayer) -> Option<&[f64]> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.data[i].as_slice())
    }

    pub fn total_len(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    /// All layers concatenated in registry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn dot(&self, other: &LayerVectors) -> f64 {
        self.per_layer_dot(other).iter().sum()
    }

    pub fn per_layer_dot(&self, other: &LayerVectors) -> Vec<f64> {
        assert_eq!(self.layers, other.layers, "layer registries differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::dot(a, b))
            .collect()
    }

    pub fn axpy(&mut self, alpha: f64, other: &LayerVectors) {
        assert_eq!(self.layers, other.layers, "layer registries differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            math::axpy(alpha, b, a);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().flatten().for_each(|x| *x *= alpha);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w_up: Mat,
    pub w_gate: Option<Mat>,
    pub w_down: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    pub embed: Mat,
    pub blocks: Vec<BlockParams>,
    pub head: Mat,
}

impl ParamSet {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let m = config.mlp_hidden();
        let v = config.vocab_size;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                w_up: Mat::zeros(m, d),
                w_gate: config.gated_mlp.then(|| Mat::zeros(m, d)),
                w_down: Mat::zeros(d, m),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed: Mat::zeros(v, d),
            blocks,
            head: Mat::zeros(v, d),
        })
    }

    /// Gaussian init: embeddings `N(0, 1)`, every other weight `N(0, 1/d_in)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut r = rng::seeded(seed, 0x1417);
        for (name, t) in p.tensors_mut() {
            let std = if name == "embed" {
                1.0
            } else {
                1.0 / math::sqrt(t.cols() as f64)
            };
            t.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = std * rng::normal(&mut r));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![(String::from("embed"), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.wq"), &b.wq));
            out.push((format!("layers.{i}.wk"), &b.wk));
            out.push((format!("layers.{i}.wv"), &b.wv));
            out.push((format!("layers.{i}.wo"), &b.wo));
            out.push((format!("layers.{i}.w_up"), &b.w_up));
            if let Some(g) = &b.w_gate {
                out.push((format!("layers.{i}.w_gate"), g));
            }
            out.push((format!("layers.{i}.w_down"), &b.w_down));
        }
        out.push((String::from("head"), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![(String::from("embed"), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{i}.wq"), &mut b.wq));
            out.push((format!("layers.{i}.wk"), &mut b.wk));
            out.push((format!("layers.{i}.wv"), &mut b.wv));
            out.push((format!("layers.{i}.wo"), &mut b.wo));
            out.push((format!("layers.{i}.w_up"), &mut b.w_up));
            if let Some(g) = &mut b.w_gate {
                out.push((format!("layers.{i}.w_gate"), g));
            }
            out.push((format!("layers.{i}.w_down"), &mut b.w_down));
        }
        out.push((String::from("head"), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "set_flat: length mismatch");
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Mutable access to one scalar by its index in [`ParamSet::flatten`] order.
    pub fn flat_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in self.tensors_mut() {
            let n = t.as_slice().len();
            if index < n {
                return &mut t.as_mut_slice()[index];
            }
            index -= n;
        }
        panic!("flat_mut: index out of range");
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled(alpha, s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.as_slice().iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t.as_slice() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// The weight matrix behind a single (non-joint) tap kind.
    pub fn weight(&self, layer: usize, kind: TapKind) -> Option<&Mat> {
        let b = self.blocks.get(layer)?;
        match kind {
            TapKind::Query => Some(&b.wq),
            TapKind::Key => Some(&b.wk),
            TapKind::Value => Some(&b.wv),
            TapKind::AttnOut => Some(&b.wo),
            TapKind::MlpUp => Some(&b.w_up),
            TapKind::MlpGate => b.w_gate.as_ref(),
            TapKind::MlpDown => Some(&b.w_down),
            TapKind::QkvJoint => None,
        }
    }

    /// Row-major flattening of a tracked block; the joint block is `[W_Q; W_K; W_V]`.
    pub fn tracked_vector(&self, t: TrackedLayer) -> Vec<f64> {
        match t.kind {
            TapKind::QkvJoint => {
                let b = &self.blocks[t.layer];
                [&b.wq, &b.wk, &b.wv]
                    .iter()
                    .flat_map(|m| m.as_slice().iter().copied())
                    .collect()
            }
            kind => self
                .weight(t.layer, kind)
                .expect("tracked layer exists")
                .as_slice()
                .to_vec(),
        }
    }

    pub fn layer_vectors(&self, layers: &[TrackedLayer]) -> LayerVectors {
        LayerVectors {
            layers: layers.to_vec(),
            data: layers.iter().map(|&l| self.tracked_vector(l)).collect(),
        }
    }
}

/// Per-block activations kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockTrace {
    h_in: Mat,
    attn_in: Mat,
    attn_rms: Vec<f64>,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    attn_out: Mat,
    h_mid: Mat,
    mlp_in: Mat,
    mlp_rms: Vec<f64>,
    up: Mat,
    gate: Option<Mat>,
    act: Mat,
}

/// Opaque forward state consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    inputs: Vec<Token>,
    targets: Vec<Token>,
    blocks: Vec<BlockTrace>,
    h_out: Mat,
    final_in: Mat,
    final_rms: Vec<f64>,
    probs: Mat,
    loss: f64,
}

impl ForwardCache {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Causal attention weights of `(layer, head)`; row `t` is the distribution over positions `0..=t`.
    pub fn attention(&self, layer: usize, head: usize) -> &Mat {
        &self.blocks[layer].probs[head]
    }

    /// Softmax predictions, one row per predicted position.
    pub fn predictions(&self) -> &Mat {
        &self.probs
    }
}

fn rms_norm(h: &Mat) -> (Mat, Vec<f64>) {
    let d = h.cols() as f64;
    let mut out = h.clone();
    let mut scales = Vec::with_capacity(h.rows());
    for t in 0..h.rows() {
        let row = out.row_mut(t);
        let ms = row.iter().map(|x| x * x).sum::<f64>() / d;
        let r = 1.0 / math::sqrt(ms + RMS_EPS);
        row.iter_mut().for_each(|x| *x *= r);
        scales.push(r);
    }
    (out, scales)
}

fn rms_norm_backward(h: &Mat, scales: &[f64], grad_out: &Mat, grad_in: &mut Mat) {
    let d = h.cols() as f64;
    for t in 0..h.rows() {
        let r = scales[t];
        let hr = h.row(t);
        let go = grad_out.row(t);
        let proj = math::dot(hr, go);
        let c = r * r * r * proj / d;
        for ((gi, &x), &g) in grad_in.row_mut(t).iter_mut().zip(hr).zip(go) {
            *gi += r * g - c * x;
        }
    }
}

/// `x Wᵀ` for `x: T × d_in`, `W: d_out × d_in`.
fn linear(x: &Mat, w: &Mat) -> Mat {
    Mat::from_fn(x.rows(), w.rows(), |t, o| math::dot(x.row(t), w.row(o)))
}

fn silu(x: f64) -> f64 {
    x * math::sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = math::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct Rope {
    cos: Mat,
    sin: Mat,
}

impl Rope {
    fn new(len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Mat::zeros(len, half);
        let mut sin = Mat::zeros(len, half);
        for t in 0..len {
            for i in 0..half {
                let freq = math::powf(base, -(2.0 * i as f64) / head_dim as f64);
                let angle = t as f64 * freq;
                cos[(t, i)] = math::cos(angle);
                sin[(t, i)] = math::sin(angle);
            }
        }
        Self { cos, sin }
    }

    /// Rotates every head of every row in place; `inverse` applies the transpose rotation.
    fn apply(&self, m: &mut Mat, n_heads: usize, head_dim: usize, inverse: bool) {
        let sign = if inverse { -1.0 } else { 1.0 };
        for t in 0..m.rows() {
            let row = m.row_mut(t);
            for h in 0..n_heads {
                let base = h * head_dim;
                for i in 0..head_dim / 2 {
                    let (c, s) = (self.cos[(t, i)], sign * self.sin[(t, i)]);
                    let x = row[base + 2 * i];
                    let y = row[base + 2 * i + 1];
                    row[base + 2 * i] = x * c - y * s;
                    row[base + 2 * i + 1] = x * s + y * c;
                }
            }
        }
    }
}

fn check_sequence(config: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if tokens.len() < 2 || tokens.len() > config.max_context {
        return Err(Error::SequenceLength {
            len: tokens.len(),
            min: 2,
            max: config.max_context,
        });
    }
    check_tokens(tokens, config.vocab_size)
}

struct Trace {
    blocks: Vec<BlockTrace>,
    h_out: Mat,
    final_in: Mat,
    final_rms: Vec<f64>,
    logits: Mat,
}

fn run(params: &ParamSet, inputs: &[Token]) -> Trace {
    let cfg = &params.config;
    let t_len = inputs.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let rope = Rope::new(t_len, dh, cfg.rope_base);

    let mut h = Mat::from_fn(t_len, cfg.hidden_dim, |t, j| params.embed[(inputs[t] as usize, j)]);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for bp in &params.blocks {
        let h_in = h.clone();
        let (attn_in, attn_rms) = rms_norm(&h_in);
        let mut q = linear(&attn_in, &bp.wq);
        let mut k = linear(&attn_in, &bp.wk);
        let v = linear(&attn_in, &bp.wv);
        rope.apply(&mut q, cfg.n_heads, dh, false);
        rope.apply(&mut k, cfg.n_heads, dh, false);

        let mut attn_out = Mat::zeros(t_len, cfg.hidden_dim);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let mut p = Mat::zeros(t_len, t_len);
            for t in 0..t_len {
                let qt = &q.row(t)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=t {
                    let s = scale * math::dot(qt, &k.row(j)[cols.clone()]);
                    p[(t, j)] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for j in 0..=t {
                    let e = math::exp(p[(t, j)] - max);
                    p[(t, j)] = e;
                    z += e;
                }
                let out = &mut attn_out.row_mut(t)[cols.clone()];
                for j in 0..=t {
                    p[(t, j)] /= z;
                    math::axpy(p[(t, j)], &v.row(j)[cols.clone()], out);
                }
            }
            probs.push(p);
        }
        h.add_scaled(1.0, &linear(&attn_out, &bp.wo));

        let h_mid = h.clone();
        let (mlp_in, mlp_rms) = rms_norm(&h_mid);
        let up = linear(&mlp_in, &bp.w_up);
        let gate = bp.w_gate.as_ref().map(|g| linear(&mlp_in, g));
        let act = match &gate {
            Some(g) => Mat::from_fn(up.rows(), up.cols(), |t, j| silu(g[(t, j)]) * up[(t, j)]),
            None => Mat::from_fn(up.rows(), up.cols(), |t, j| silu(up[(t, j)])),
        };
        h.add_scaled(1.0, &linear(&act, &bp.w_down));

        blocks.push(BlockTrace {
            h_in,
            attn_in,
            attn_rms,
            q,
            k,
            v,
            probs,
            attn_out,
            h_mid,
            mlp_in,
            mlp_rms,
            up,
            gate,
            act,
        });
    }
    let (final_in, final_rms) = rms_norm(&h);
    let logits = linear(&final_in, &params.head);
    Trace {
        blocks,
        h_out: h,
        final_in,
        final_rms,
        logits,
    }
}

/// Logits at every position of `tokens` (including the last).
pub fn logits(params: &ParamSet, tokens: &[Token]) -> Result<Mat> {
    if tokens.is_empty() || tokens.len() > params.config.max_context {
        return Err(Error::SequenceLength {
            len: tokens.len(),
            min: 1,
            max: params.config.max_context,
        });
    }
    check_tokens(tokens, params.config.vocab_size)?;
    Ok(run(params, tokens).logits)
}

/// Mean next-token cross-entropy over positions `1..len`.
pub fn forward(params: &ParamSet, tokens: &[Token]) -> Result<(f64, ForwardCache)> {
    check_sequence(&params.config, tokens)?;
    let inputs = tokens[..tokens.len() - 1].to_vec();
    let targets = tokens[1..].to_vec();
    let trace = run(params, &inputs);

    let mut probs = trace.logits.clone();
    let mut loss = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        let row = probs.row_mut(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = math::exp(*x - max);
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
        loss += -(trace.logits[(t, target as usize)] - max - math::ln(z));
    }
    loss /= targets.len() as f64;

    let cache = ForwardCache {
        fingerprint: params.fingerprint(),
        inputs,
        targets,
        blocks: trace.blocks,
        h_out: trace.h_out,
        final_in: trace.final_in,
        final_rms: trace.final_rms,
        probs,
        loss,
    };
    Ok((loss, cache))
}

pub fn loss(params: &ParamSet, tokens: &[Token]) -> Result<f64> {
    forward(params, tokens).map(|(l, _)| l)
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: ParamSet,
    /// Per block: query, key, value, attn-out, mlp-1, [mlp-gate], mlp-2.
    pub taps: Vec<LayerTap>,
}

impl Backward {
    pub fn tap(&self, layer: usize, kind: TapKind) -> Option<&LayerTap> {
        self.taps.iter().find(|t| t.layer == layer && t.kind == kind)
    }
}

/// Exact gradients of the loss recorded in `cache`.
pub fn backward(params: &ParamSet, cache: &ForwardCache) -> Result<Backward> {
    let mut dlogits = cache.probs.clone();
    let inv_n = 1.0 / cache.targets.len() as f64;
    for (t, &target) in cache.targets.iter().enumerate() {
        dlogits[(t, target as usize)] -= 1.0;
        dlogits.row_mut(t).iter_mut().for_each(|x| *x *= inv_n);
    }
    backward_from_logit_grad(params, cache, &dlogits)
}

/// Backpropagates an arbitrary gradient with respect to the logits
/// (one row per predicted position).
pub fn backward_from_logit_grad(
    params: &ParamSet,
    cache: &ForwardCache,
    dlogits: &Mat,
) -> Result<Backward> {
    if cache.fingerprint != params.fingerprint() || cache.blocks.len() != params.blocks.len() {
        return Err(Error::StaleCache);
    }
    let cfg = &params.config;
    let t_len = cache.inputs.len();
    if (dlogits.rows(), dlogits.cols()) != (t_len, cfg.vocab_size) {
        return Err(Error::DimensionMismatch {
            context: "logit gradient rows",
            expected: t_len,
            actual: dlogits.rows(),
        });
    }
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let rope = Rope::new(t_len, dh, cfg.rope_base);
    let mut grads = params.zeros_like();

    grads.head = dlogits.t_matmul(&cache.final_in);
    let d_final = dlogits.matmul(&params.head);
    let mut dh_res = Mat::zeros(t_len, d);
    rms_norm_backward(&cache.h_out, &cache.final_rms, &d_final, &mut dh_res);

    let mut taps_rev: Vec<Vec<LayerTap>> = Vec::with_capacity(cfg.n_layers);
    for (l, (bp, tr)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let mut layer_taps = Vec::new();
        let gb = &mut grads.blocks[l];

        // MLP
        let d_down_out = dh_res.clone();
        gb.w_down = d_down_out.t_matmul(&tr.act);
        let d_act = d_down_out.matmul(&bp.w_down);
        let mut d_mlp_in = Mat::zeros(t_len, d);
        match (&bp.w_gate, &tr.gate) {
            (Some(wg), Some(g)) => {
                let d_up = Mat::from_fn(t_len, tr.up.cols(), |t, j| {
                    d_act[(t, j)] * silu(g[(t, j)])
                });
                let d_gate = Mat::from_fn(t_len, tr.up.cols(), |t, j| {
                    d_act[(t, j)] * tr.up[(t, j)] * silu_grad(g[(t, j)])
                });
                gb.w_up = d_up.t_matmul(&tr.mlp_in);
                gb.w_gate = Some(d_gate.t_matmul(&tr.mlp_in));
                d_mlp_in.add_scaled(1.0, &d_up.matmul(&bp.w_up));
                d_mlp_in.add_scaled(1.0, &d_gate.matmul(wg));
                layer_taps.push(LayerTap {
                    layer: l,
                    kind: TapKind::MlpUp,
                    x: tr.mlp_in.clone(),
                    delta: d_up,
                });
                layer_taps.push(LayerTap {
                    layer: l,
                    kind: TapKind::MlpGate,
                    x: tr.mlp_in.clone(),
                    delta: d_gate,
                });
            }
            _ => {
                let d_up = Mat::from_fn(t_len, tr.up.cols(), |t, j| {
                    d_act[(t, j)] * silu_grad(tr.up[(t, j)])
                });
                gb.w_up = d_up.t_matmul(&tr.mlp_in);
                d_mlp_in.add_scaled(1.0, &d_up.matmul(&bp.w_up));
                layer_taps.push(LayerTap {
                    layer: l,
                    kind: TapKind::MlpUp,
                    x: tr.mlp_in.clone(),
                    delta: d_up,
                });
            }
        }
        layer_taps.push(LayerTap {
            layer: l,
            kind: TapKind::MlpDown,
            x: tr.act.clone(),
            delta: d_down_out,
        });
        rms_norm_backward(&tr.h_mid, &tr.mlp_rms, &d_mlp_in, &mut dh_res);

        // Attention
        let d_o_out = dh_res.clone();
        gb.wo = d_o_out.t_matmul(&tr.attn_out);
        let d_attn = d_o_out.matmul(&bp.wo);
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let p = &tr.probs[head];
            for t in 0..t_len {
                let d_out_t = &d_attn.row(t)[cols.clone()];
                let mut dp = vec![0.0; t + 1];
                for j in 0..=t {
                    dp[j] = math::dot(d_out_t, &tr.v.row(j)[cols.clone()]);
                    math::axpy(p[(t, j)], d_out_t, &mut dv.row_mut(j)[cols.clone()]);
                }
                let mean: f64 = (0..=t).map(|j| p[(t, j)] * dp[j]).sum();
                for j in 0..=t {
                    let ds = p[(t, j)] * (dp[j] - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    math::axpy(ds, &tr.k.row(j)[cols.clone()], &mut dq.row_mut(t)[cols.clone()]);
                    math::axpy(ds, &tr.q.row(t)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                }
            }
        }
        rope.apply(&mut dq, cfg.n_heads, dh, true);
        rope.apply(&mut dk, cfg.n_heads, dh, true);
        gb.wq = dq.t_matmul(&tr.attn_in);
        gb.wk = dk.t_matmul(&tr.attn_in);
        gb.wv = dv.t_matmul(&tr.attn_in);
        let mut d_attn_in = dq.matmul(&bp.wq);
        d_attn_in.add_scaled(1.0, &dk.matmul(&bp.wk));
        d_attn_in.add_scaled(1.0, &dv.matmul(&bp.wv));
        rms_norm_backward(&tr.h_in, &tr.attn_rms, &d_attn_in, &mut dh_res);

        let mut attn_taps = vec![
            LayerTap {
                layer: l,
                kind: TapKind::Query,
                x: tr.attn_in.clone(),
                delta: dq,
            },
            LayerTap {
                layer: l,
                kind: TapKind::Key,
                x: tr.attn_in.clone(),
                delta: dk,
            },
            LayerTap {
                layer: l,
                kind: TapKind::Value,
                x: tr.attn_in.clone(),
                delta: dv,
            },
            LayerTap {
                layer: l,
                kind: TapKind::AttnOut,
                x: tr.attn_out.clone(),
                delta: d_o_out,
            },
        ];
        attn_taps.append(&mut layer_taps);
        taps_rev.push(attn_taps);
    }

    for (t, &tok) in cache.inputs.iter().enumerate() {
        math::axpy(1.0, dh_res.row(t), grads.embed.row_mut(tok as usize));
    }

    let taps = taps_rev.into_iter().rev().flatten().collect();
    Ok(Backward { grads, taps })
}

/// Loss and exact gradients of one sequence.
pub fn loss_and_grad(params: &ParamSet, tokens: &[Token]) -> Result<(f64, Backward)> {
    let (loss, cache) = forward(params, tokens)?;
    Ok((loss, backward(params, &cache)?))
}

/// Gradient of one sequence restricted to the tracked layers.
pub fn tracked_grad(
    params: &ParamSet,
    tokens: &[Token],
    layers: &[TrackedLayer],
) -> Result<LayerVectors> {
    let (_, bw) = loss_and_grad(params, tokens)?;
    Ok(bw.grads.layer_vectors(layers))
}

/// Mean per-sequence gradient over `set`, per tracked layer.
pub fn grad_of_set(
    params: &ParamSet,
    set: &[Vec<Token>],
    layers: &[TrackedLayer],
) -> Result<LayerVectors> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("gradient of an empty set".into()));
    }
    let mut acc = LayerVectors::zeros(&params.config, layers);
    for seq in set {
        acc.axpy(1.0, &tracked_grad(params, seq, layers)?);
    }
    acc.scale(1.0 / set.len() as f64);
    Ok(acc)
}
