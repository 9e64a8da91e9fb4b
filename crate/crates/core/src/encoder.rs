//! Transformer backbone: patch embedding, fixed sinusoidal positions,
//! post-sublayer-norm transformer blocks and mean pooling.
//!
//! Each block computes
//!
//! ```text
//! x̂   = LN(MSA(x)) + x
//! out = LN(FFN(x̂)) + x̂,     FFN(x) = (GeLU(x)·W1 + b1)·W2 + b2
//! ```
//!
//! with `MSA(x) = Concat(head_1..head_h)·Wᴼ` and
//! `head_i = softmax((xW_iᵠ)(xW_iᴷ)ᵀ/√d_head)·xW_iⱽ`. The per-head
//! projections are stored as one `d_model × d_model` matrix per role; head
//! `i` owns the column block `[i·d_head, (i+1)·d_head)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::signal::SignalWindow;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub window_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// FFN hidden width = `ffn_expansion · d_model`.
    pub ffn_expansion: usize,
    pub proj_dim: usize,
    pub dropout_prob: f64,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            window_len: 192,
            patch_len: 12,
            d_model: 64,
            num_blocks: 4,
            num_heads: 4,
            ffn_expansion: 4,
            proj_dim: 256,
            dropout_prob: 0.0,
            layernorm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn num_tokens(&self) -> usize {
        self.window_len / self.patch_len
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_expansion * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_len == 0 || self.window_len == 0 || !self.window_len.is_multiple_of(self.patch_len) {
            return bad(format!(
                "window_len {} is not a positive multiple of patch_len {}",
                self.window_len, self.patch_len
            ));
        }
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.ffn_expansion == 0 || self.proj_dim == 0 {
            return bad("ffn_expansion and proj_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return bad(format!("layernorm_eps {}", self.layernorm_eps));
        }
        Ok(())
    }
}

/// Pooled encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

/// Register a tensor either as a trainable parameter or as a constant.
pub(crate) fn bind(g: &mut Graph, name: &str, m: &Matrix, trainable: bool) -> Var {
    if trainable {
        g.param(name, m)
    } else {
        g.frozen(name, m)
    }
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| limit * (2.0 * rng.uniform() - 1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("glorot shape")
}

/// Dense layer `x·W + b` with `W` of shape in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: glorot(inputs, outputs, rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, name: &str, trainable: bool) -> Var {
        let w = bind(g, &format!("{name}.weight"), &self.weight, trainable);
        let b = bind(g, &format!("{name}.bias"), &self.bias, trainable);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{name}.weight"), &self.weight);
        f(&format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{name}.weight"), &mut self.weight);
        f(&format!("{name}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub shift: Matrix,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            shift: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl BlockParams {
    pub fn new(cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let d = cfg.d_model;
        Self {
            attention: AttentionParams {
                w_q: glorot(d, d, rng),
                w_k: glorot(d, d, rng),
                w_v: glorot(d, d, rng),
                w_o: glorot(d, d, rng),
            },
            ln1: LayerNormParams::new(d),
            ln2: LayerNormParams::new(d),
            ffn1: Linear::new(d, cfg.ffn_hidden(), rng),
            ffn2: Linear::new(cfg.ffn_hidden(), d, rng),
        }
    }

    /// Every weight zero, layer norms at their initial `g = 1, b = 0`.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attention: AttentionParams {
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
                w_o: Matrix::zeros(d, d),
            },
            ln1: LayerNormParams::new(d),
            ln2: LayerNormParams::new(d),
            ffn1: Linear::zeros(d, cfg.ffn_hidden()),
            ffn2: Linear::zeros(cfg.ffn_hidden(), d),
        }
    }

    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{name}.attn.w_q"), &self.attention.w_q);
        f(&format!("{name}.attn.w_k"), &self.attention.w_k);
        f(&format!("{name}.attn.w_v"), &self.attention.w_v);
        f(&format!("{name}.attn.w_o"), &self.attention.w_o);
        f(&format!("{name}.ln1.gain"), &self.ln1.gain);
        f(&format!("{name}.ln1.shift"), &self.ln1.shift);
        f(&format!("{name}.ln2.gain"), &self.ln2.gain);
        f(&format!("{name}.ln2.shift"), &self.ln2.shift);
        self.ffn1.visit(&format!("{name}.ffn1"), f);
        self.ffn2.visit(&format!("{name}.ffn2"), f);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{name}.attn.w_q"), &mut self.attention.w_q);
        f(&format!("{name}.attn.w_k"), &mut self.attention.w_k);
        f(&format!("{name}.attn.w_v"), &mut self.attention.w_v);
        f(&format!("{name}.attn.w_o"), &mut self.attention.w_o);
        f(&format!("{name}.ln1.gain"), &mut self.ln1.gain);
        f(&format!("{name}.ln1.shift"), &mut self.ln1.shift);
        f(&format!("{name}.ln2.gain"), &mut self.ln2.gain);
        f(&format!("{name}.ln2.shift"), &mut self.ln2.shift);
        self.ffn1.visit_mut(&format!("{name}.ffn1"), f);
        self.ffn2.visit_mut(&format!("{name}.ffn2"), f);
    }
}

/// Inverted dropout on a graph node (train mode only).
fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut RngStream>) -> Var {
    let Some(rng) = rng else { return x };
    if p == 0.0 {
        return x;
    }
    let (rows, cols) = g.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Matrix::from_vec(rows, cols, mask).unwrap());
    g.mul(x, mask)
}

/// Record one transformer block over `tokens`-row groups of `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward(
    g: &mut Graph,
    x: Var,
    p: &BlockParams,
    name: &str,
    tokens: usize,
    cfg: &EncoderConfig,
    trainable: bool,
    mut rng: Option<&mut RngStream>,
) -> Var {
    let a = &p.attention;
    let wq = bind(g, &format!("{name}.attn.w_q"), &a.w_q, trainable);
    let wk = bind(g, &format!("{name}.attn.w_k"), &a.w_k, trainable);
    let wv = bind(g, &format!("{name}.attn.w_v"), &a.w_v, trainable);
    let wo = bind(g, &format!("{name}.attn.w_o"), &a.w_o, trainable);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let heads = g.attention(q, k, v, tokens, cfg.num_heads);
    let msa = g.matmul(heads, wo);
    let msa = dropout(g, msa, cfg.dropout_prob, rng.as_deref_mut());
    let g1 = bind(g, &format!("{name}.ln1.gain"), &p.ln1.gain, trainable);
    let s1 = bind(g, &format!("{name}.ln1.shift"), &p.ln1.shift, trainable);
    let normed = g.layer_norm(msa, g1, s1, cfg.layernorm_eps);
    let xhat = g.add(normed, x);

    let act = g.gelu(xhat);
    let h = p.ffn1.forward(g, act, &format!("{name}.ffn1"), trainable);
    let f = p.ffn2.forward(g, h, &format!("{name}.ffn2"), trainable);
    let f = dropout(g, f, cfg.dropout_prob, rng);
    let g2 = bind(g, &format!("{name}.ln2.gain"), &p.ln2.gain, trainable);
    let s2 = bind(g, &format!("{name}.ln2.shift"), &p.ln2.shift, trainable);
    let normed = g.layer_norm(f, g2, s2, cfg.layernorm_eps);
    g.add(normed, xhat)
}

/// Fixed sinusoidal table, `tokens × d`.
pub fn positional_encoding(tokens: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(tokens, d);
    for pos in 0..tokens {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// The transformer backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: Linear,
    pub blocks: Vec<BlockParams>,
}

pub const ENCODER_SCOPE: &str = "encoder";

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::keyed(seed, &[0xE4C0_DE00]);
        let patch = Linear::new(config.patch_len, config.d_model, &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams::new(&config, &mut rng))
            .collect();
        Ok(Self {
            config,
            patch,
            blocks,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.patch.visit("encoder.patch", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("encoder.block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.patch.visit_mut("encoder.patch", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder.block{i}"), f);
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    /// Stack window values into a batch matrix, checking lengths.
    pub fn batch_matrix(&self, windows: &[&[f64]]) -> Result<Matrix> {
        let len = self.config.window_len;
        let mut data = Vec::with_capacity(windows.len() * len);
        for w in windows {
            if w.len() != len {
                return Err(Error::Shape(format!(
                    "window of length {} for an encoder expecting {len}",
                    w.len()
                )));
            }
            data.extend_from_slice(w);
        }
        Matrix::from_vec(windows.len(), len, data)
    }

    /// Record the encoder over a `B × window_len` batch; returns the
    /// `B × d_model` pooled embeddings. `rng` enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Matrix,
        trainable: bool,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.cols() != cfg.window_len {
            return Err(Error::Shape(format!(
                "batch has {} columns, encoder expects {}",
                batch.cols(),
                cfg.window_len
            )));
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let tokens = cfg.num_tokens();
        let b = batch.rows();
        let patches = batch.clone().reshape(b * tokens, cfg.patch_len)?;
        let patches = g.constant(patches);
        let mut x = self.patch.forward(g, patches, "encoder.patch", trainable);

        let pe = positional_encoding(tokens, cfg.d_model);
        let mut tiled = Vec::with_capacity(b * tokens * cfg.d_model);
        for _ in 0..b {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Matrix::from_vec(b * tokens, cfg.d_model, tiled)?);
        x = g.add(x, pe);

        for (i, block) in self.blocks.iter().enumerate() {
            x = block_forward(
                g,
                x,
                block,
                &format!("encoder.block{i}"),
                tokens,
                cfg,
                trainable,
                rng.as_deref_mut(),
            );
        }
        Ok(g.mean_pool(x, tokens))
    }

    /// Eval-mode embeddings for a batch of windows (no gradient tracking).
    pub fn embed(&self, windows: &[&[f64]]) -> Result<Matrix> {
        let batch = self.batch_matrix(windows)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &batch, false, None)?;
        Ok(g.value(out).clone())
    }
}

// ── Single-operation entry points ───────────────────────────────────────────

/// `softmax(QKᵀ/√d)·V` with `d` the key dimension.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.cols() == 0 {
        return Err(Error::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    for (m, name) in [(q, "Q"), (k, "K"), (v, "V")] {
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("attention {name}")));
        }
    }
    let mut scores = q.matmul_nt(k).scale(1.0 / (q.cols() as f64).sqrt());
    crate::graph::softmax_rows_in_place(&mut scores);
    Ok(scores.matmul(v))
}

/// Multi-head self-attention of `x` (tokens × d_model).
pub fn multi_head_attention(x: &Matrix, p: &AttentionParams, num_heads: usize) -> Result<Matrix> {
    let d = x.cols();
    for m in [&p.w_q, &p.w_k, &p.w_v, &p.w_o] {
        if m.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "attention weight {:?} for d_model {d}",
                m.shape()
            )));
        }
    }
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::Shape(format!("d_model {d} not divisible by {num_heads} heads")));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wq = g.constant(p.w_q.clone());
    let wk = g.constant(p.w_k.clone());
    let wv = g.constant(p.w_v.clone());
    let wo = g.constant(p.w_o.clone());
    let q = g.matmul(xv, wq);
    let k = g.matmul(xv, wk);
    let v = g.matmul(xv, wv);
    let heads = g.attention(q, k, v, x.rows(), num_heads);
    let out = g.matmul(heads, wo);
    Ok(g.value(out).clone())
}

/// `(x − μ)/√(σ² + eps) · g + b` over one feature vector.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.constant(Matrix::row_vector(x.to_vec()));
    let gv = g.constant(Matrix::row_vector(gain.to_vec()));
    let sv = g.constant(Matrix::row_vector(shift.to_vec()));
    let y = g.layer_norm(xv, gv, sv, eps);
    g.value(y).data().to_vec()
}

/// `(GeLU(x)·W1 + b1)·W2 + b2` for one feature vector.
pub fn ffn(x: &[f64], w1: &Matrix, b1: &[f64], w2: &Matrix, b2: &[f64]) -> Vec<f64> {
    let layer1 = Linear {
        weight: w1.clone(),
        bias: Matrix::row_vector(b1.to_vec()),
    };
    let layer2 = Linear {
        weight: w2.clone(),
        bias: Matrix::row_vector(b2.to_vec()),
    };
    let mut g = Graph::new();
    let xv = g.constant(Matrix::row_vector(x.to_vec()));
    let act = g.gelu(xv);
    let h = layer1.forward(&mut g, act, "ffn1", false);
    let y = layer2.forward(&mut g, h, "ffn2", false);
    g.value(y).data().to_vec()
}

/// One block applied to a single sequence `x` (tokens × d_model).
pub fn transformer_block(x: &Matrix, p: &BlockParams, cfg: &EncoderConfig) -> Result<Matrix> {
    if x.cols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "block input has {} features, expected {}",
            x.cols(),
            cfg.d_model
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = block_forward(&mut g, xv, p, "block", x.rows(), cfg, false, None);
    Ok(g.value(y).clone())
}

/// Eval-mode embedding of one window.
pub fn encode(w: &SignalWindow, encoder: &Encoder) -> Result<EmbeddingVector> {
    let m = encoder.embed(&[&w.values])?;
    Ok(EmbeddingVector(m.row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            window_len: 48,
            patch_len: 12,
            d_model: 8,
            num_blocks: 2,
            num_heads: 2,
            ffn_expansion: 2,
            proj_dim: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn single_key_attention() {
        let one = Matrix::filled(1, 1, 1.0);
        let v = Matrix::filled(1, 1, 5.0);
        assert_eq!(attention(&one, &one, &v).unwrap().data(), &[5.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let k = Matrix::from_rows(&vec![vec![1.0, 2.0]; 3]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 0.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - 3.0).abs() < 1e-12);
            assert!((out.get(r, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_nan() {
        let q = Matrix::filled(1, 1, f64::NAN);
        assert!(matches!(attention(&q, &q, &q), Err(Error::NonFinite(_))));
    }

    #[test]
    fn single_head_identity_weights_reduce_to_attention() {
        let mut rng = RngStream::new(4);
        let x = glorot(5, 4, &mut rng);
        let id = Matrix::identity(4);
        let p = AttentionParams {
            w_q: id.clone(),
            w_k: id.clone(),
            w_v: id.clone(),
            w_o: id,
        };
        let mha = multi_head_attention(&x, &p, 1).unwrap();
        let direct = attention(&x, &x, &x).unwrap();
        for (a, b) in mha.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = RngStream::new(5);
        let x = glorot(6, 4, &mut rng);
        let p = AttentionParams {
            w_q: glorot(4, 4, &mut rng),
            w_k: glorot(4, 4, &mut rng),
            w_v: Matrix::zeros(4, 4),
            w_o: glorot(4, 4, &mut rng),
        };
        let out = multi_head_attention(&x, &p, 2).unwrap();
        assert_eq!(out.shape(), (6, 4));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(layer_norm(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5), vec![0.0, 0.0]);
        let y = layer_norm(&[0.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], 1e-15);
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
        let y = layer_norm(&[3.0, -1.0, 7.0], &[0.0; 3], &[0.5, -0.5, 2.0], 1e-5);
        assert_eq!(y, vec![0.5, -0.5, 2.0]);
    }

    #[test]
    fn ffn_examples() {
        let w = Matrix::identity(3);
        assert_eq!(ffn(&[0.0; 3], &w, &[0.0; 3], &w, &[0.0; 3]), vec![0.0; 3]);
        let y = ffn(&[10.0; 3], &w, &[0.0; 3], &w, &[0.0; 3]);
        assert!(y.iter().all(|v| (v - 10.0).abs() < 1e-12));
        let y = ffn(&[0.7, -0.2, 1.1], &w, &[1.0; 3], &Matrix::zeros(3, 3), &[0.25, -1.0, 3.0]);
        assert_eq!(y, vec![0.25, -1.0, 3.0]);
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = small();
        let mut rng = RngStream::new(6);
        let x = glorot(4, cfg.d_model, &mut rng);
        let y = transformer_block(&x, &BlockParams::zeros(&cfg), &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = small();
        let enc = Encoder::new(cfg.clone(), 1).unwrap();
        let values: Vec<f64> = (0..48).map(|i| (i as f64 * 0.3).sin()).collect();
        let w = SignalWindow::new(values.clone(), None, crate::signal::Origin { source_id: "x".into(), start: 0 }).unwrap();
        let a = encode(&w, &enc).unwrap();
        assert_eq!(a.0.len(), cfg.d_model);
        assert_eq!(a, encode(&w, &enc).unwrap());
        let short = SignalWindow { values: vec![0.0; 47], ..w.clone() };
        assert!(encode(&short, &enc).is_err());
    }

    #[test]
    fn patch_permutation_changes_embedding() {
        let cfg = small();
        let enc = Encoder::new(cfg, 2).unwrap();
        let values: Vec<f64> = (0..48).map(|i| ((i * i) as f64 * 0.01).cos()).collect();
        let mut permuted = values[12..].to_vec();
        permuted.extend_from_slice(&values[..12]);
        let a = enc.embed(&[&values]).unwrap();
        let b = enc.embed(&[&permuted]).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(diff.sqrt() > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { patch_len: 7, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { num_heads: 3, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { dropout_prob: 1.0, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_token_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.num_tokens(), 16);
        assert_eq!(cfg.d_head(), 16);
        assert_eq!(cfg.ffn_hidden(), 256);
    }
}
