//! Transformer and GRU building blocks: multi-head attention, position-wise
//! feed-forward layers, encoder/decoder blocks, a GRU cell, sinusoidal
//! positions and Uniform-Copy.
//!
//! Every sub-layer is post-norm: `LayerNorm(x + sublayer(x))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Width and regularization shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub head_count: usize,
    pub dropout_rate: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.hidden_dim == 0 || self.head_count == 0 {
            return Err(Error::Parameter("block dimensions must be positive".into()));
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::Parameter(format!(
                "model_dim {} is not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|k| k % len <= k / len).collect();
        AttentionMask {
            rows: len,
            cols: len,
            allowed,
        }
    }

    /// Keys at or beyond `valid_cols` are hidden from every query.
    pub fn padded(rows: usize, cols: usize, valid_cols: usize) -> Self {
        let allowed = (0..rows * cols).map(|k| k % cols < valid_cols).collect();
        AttentionMask { rows, cols, allowed }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        AttentionMask { rows, cols, allowed }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// One forward computation: the tape being recorded, the parameter values,
/// and dropout state when training with dropout enabled.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Forward {
            tape,
            store,
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate (no-op when `rate == 0`).
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let (r, c) = self.tape.dims(x);
        let keep = 1.0 / (1.0 - *rate);
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(r, c, mask);
        self.tape.mul(x, m)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.p(w);
        let bv = self.p(b);
        let y = self.tape.matmul(x, wv)?;
        self.tape.add_row(y, bv)
    }

    pub fn layer_norm(&mut self, x: Var, ln: &LayerNormParams) -> Result<Var> {
        let g = self.p(ln.gain);
        let b = self.p(ln.bias);
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add_const(&format!("{prefix}.gain"), 1, d, 1.0),
            bias: store.add_const(&format!("{prefix}.bias"), 1, d, 0.0),
        }
    }
}

/// Multi-head attention sub-layer with its residual layer norm.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm: LayerNormParams,
}

/// Attention output plus the per-head weight matrices (row-stochastic).
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
    /// Concatenated head outputs after the output projection, before the
    /// residual connection.
    pub context: Var,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let mut proj = |name: &str| {
            (
                store.add_xavier(&format!("{prefix}.w{name}"), d, d, rng),
                store.add_const(&format!("{prefix}.b{name}"), 1, d, 0.0),
            )
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        AttentionParams {
            heads: cfg.head_count,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), d),
        }
    }

    /// Scaled dot-product attention of queries `h` over keys/values `s`,
    /// followed by `LayerNorm(h + ·)`.
    pub fn attend(&self, f: &mut Forward, h: Var, s: Var, mask: Option<&AttentionMask>) -> Result<Attended> {
        let (l, d) = f.tape.dims(h);
        let (n, ds) = f.tape.dims(s);
        if d != ds {
            return Err(Error::shape(format!(
                "attention queries of width {d} over memory of width {ds}"
            )));
        }
        if let Some(m) = mask {
            if m.dims() != (l, n) {
                return Err(Error::shape(format!(
                    "mask {:?} for {l} queries and {n} keys",
                    m.dims()
                )));
            }
        }
        let mask = mask.filter(|m| !m.is_full()).map(AttentionMask::as_slice);
        let dk = d / self.heads;
        let q = f.linear(h, self.wq, self.bq)?;
        let k = f.linear(s, self.wk, self.bk)?;
        let v = f.linear(s, self.wv, self.bv)?;
        let temperature = (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    f.tape.slice_cols(q, hd * dk, dk)?,
                    f.tape.slice_cols(k, hd * dk, dk)?,
                    f.tape.slice_cols(v, hd * dk, dk)?,
                )
            };
            let scores = f.tape.matmul_nt(qh, kh)?;
            let w = f.tape.masked_softmax(scores, temperature, mask)?;
            heads.push(f.tape.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            f.tape.concat_cols(&heads)?
        };
        let context = f.linear(cat, self.wo, self.bo)?;
        let dropped = f.dropout(context)?;
        let res = f.tape.add(h, dropped)?;
        let out = f.layer_norm(res, &self.norm)?;
        Ok(Attended {
            out,
            weights,
            context,
        })
    }

    pub fn self_attention(&self, f: &mut Forward, h: Var, mask: &AttentionMask) -> Result<Attended> {
        let (l, _) = f.tape.dims(h);
        if l == 0 {
            return Err(Error::contract("self-attention over an empty sequence"));
        }
        self.attend(f, h, h, Some(mask))
    }

    pub fn inter_attention(&self, f: &mut Forward, h: Var, s: Var) -> Result<Attended> {
        self.attend(f, h, s, None)
    }
}

/// Position-wise `W2·relu(W1·h + b1) + b2` with residual layer norm.
#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm: LayerNormParams,
}

impl FeedForwardParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let (d, hid) = (cfg.model_dim, cfg.hidden_dim);
        FeedForwardParams {
            w1: store.add_xavier(&format!("{prefix}.w1"), d, hid, rng),
            b1: store.add_const(&format!("{prefix}.b1"), 1, hid, 0.0),
            w2: store.add_xavier(&format!("{prefix}.w2"), hid, d, rng),
            b2: store.add_const(&format!("{prefix}.b2"), 1, d, 0.0),
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), d),
        }
    }

    pub fn forward(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let a = f.linear(h, self.w1, self.b1)?;
        let a = f.tape.relu(a);
        let b = f.linear(a, self.w2, self.b2)?;
        let b = f.dropout(b)?;
        let res = f.tape.add(h, b)?;
        f.layer_norm(res, &self.norm)
    }
}

/// `E(H) = FFN(Self-Att(H))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub self_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            self_attn: AttentionParams::new(store, &format!("{prefix}.self"), cfg, rng),
            ffn: FeedForwardParams::new(store, &format!("{prefix}.ffn"), cfg, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let (n, _) = f.tape.dims(h);
        let a = self.self_attn.self_attention(f, h, &AttentionMask::full(n, n))?;
        self.ffn.forward(f, a.out)
    }
}

/// `D(H, S) = FFN(Inter-Att(S, Self-Att(H)))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: AttentionParams,
    pub inter_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        DecoderBlock {
            self_attn: AttentionParams::new(store, &format!("{prefix}.self"), cfg, rng),
            inter_attn: AttentionParams::new(store, &format!("{prefix}.inter"), cfg, rng),
            ffn: FeedForwardParams::new(store, &format!("{prefix}.ffn"), cfg, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, h: Var, s: Var, mask: &AttentionMask) -> Result<Var> {
        let a = self.self_attn.self_attention(f, h, mask)?;
        let b = self.inter_attn.inter_attention(f, a.out, s)?;
        self.ffn.forward(f, b.out)
    }
}

/// Gated recurrent unit over input width `k` and state width `d`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut gate = |name: &str| {
            (
                store.add_xavier(&format!("{prefix}.w_{name}"), input + d, d, rng),
                store.add_const(&format!("{prefix}.b_{name}"), 1, d, 0.0),
            )
        };
        let (w_r, b_r) = gate("r");
        let (w_z, b_z) = gate("z");
        let (w_h, b_h) = gate("h");
        GruParams {
            w_r,
            b_r,
            w_z,
            b_z,
            w_h,
            b_h,
        }
    }

    /// One step: `h' = (1 − z)⊙h + z⊙tanh(W_h[x; r⊙h])` with
    /// `r = σ(W_r[x; h])`, `z = σ(W_z[x; h])`.
    pub fn step(&self, f: &mut Forward, h_prev: Var, x: Var) -> Result<Var> {
        let (hr, d) = f.tape.dims(h_prev);
        let (xr, k) = f.tape.dims(x);
        if hr != 1 || xr != 1 {
            return Err(Error::shape("gru_step expects single-row state and input"));
        }
        let expected = f.store.get(self.w_r).rows();
        if k + d != expected || f.store.get(self.w_r).cols() != d {
            return Err(Error::shape(format!(
                "gru_step with input {k} and state {d}, weights expect [{expected}x{}]",
                f.store.get(self.w_r).cols()
            )));
        }
        let xh = f.tape.concat_cols(&[x, h_prev])?;
        let r = f.linear(xh, self.w_r, self.b_r)?;
        let r = f.tape.sigmoid(r);
        let z = f.linear(xh, self.w_z, self.b_z)?;
        let z = f.tape.sigmoid(z);
        let rh = f.tape.mul(r, h_prev)?;
        let xrh = f.tape.concat_cols(&[x, rh])?;
        let cand = f.linear(xrh, self.w_h, self.b_h)?;
        let cand = f.tape.tanh(cand);
        let keep = f.tape.affine(z, -1.0, 1.0);
        let old = f.tape.mul(keep, h_prev)?;
        let new = f.tape.mul(z, cand)?;
        f.tape.add(old, new)
    }
}

/// GRU decoder block: inter-attention to the source plus a GRU layer whose
/// input is `[context; embedding]`.
#[derive(Clone, Debug)]
pub struct GruBlock {
    pub inter_attn: AttentionParams,
    pub gru: GruParams,
}

/// Output of one recurrent step.
pub struct GruBlockStep {
    /// New recurrent state `R_i`.
    pub state: Var,
    /// `LayerNorm(R_i + C_i)`, the representation fed to the output head.
    pub out: Var,
    /// Context `C_i` attended from `R_i`, consumed by the next step.
    pub context: Var,
}

impl GruBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        GruBlock {
            inter_attn: AttentionParams::new(store, &format!("{prefix}.inter"), cfg, rng),
            gru: GruParams::new(store, &format!("{prefix}.gru"), 2 * d, d, rng),
        }
    }

    /// Attends from an initial state to produce the first context.
    pub fn initial_context(&self, f: &mut Forward, state: Var, s: Var) -> Result<Var> {
        Ok(self.inter_attn.inter_attention(f, state, s)?.context)
    }

    /// `R_i = GRU(R_{i−1}, [C_{i−1}; Emb(z_{i−1})])`, then attends from `R_i`.
    pub fn step(&self, f: &mut Forward, prev_state: Var, prev_context: Var, prev_emb: Var, s: Var) -> Result<GruBlockStep> {
        let input = f.tape.concat_cols(&[prev_context, prev_emb])?;
        let state = self.gru.step(f, prev_state, input)?;
        let att = self.inter_attn.inter_attention(f, state, s)?;
        Ok(GruBlockStep {
            state,
            out: att.out,
            context: att.context,
        })
    }
}

/// Sinusoidal encodings: `pe[p][2i] = sin(p / 10000^{2i/dim})`,
/// `pe[p][2i+1] = cos(·)`.
pub fn sinusoidal_positions(length: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Parameter(format!(
            "positional encoding width must be even, got {dim}"
        )));
    }
    if length == 0 {
        return Err(Error::Parameter("positional encoding length must be positive".into()));
    }
    let mut data = vec![0.0; length * dim];
    for p in 0..length {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = angle.sin();
            data[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(length, dim, data)
}

/// Source row read by each of `target_len` output rows: `floor(i·n/m)`.
pub fn uniform_copy_indices(source_len: usize, target_len: usize) -> Vec<usize> {
    (0..target_len).map(|i| i * source_len / target_len).collect()
}

/// Stretches (or compresses) `src_emb: [n×d]` to `[m×d]`.
pub fn uniform_copy(tape: &mut Tape, src_emb: Var, target_len: usize) -> Result<Var> {
    let (n, _) = tape.dims(src_emb);
    if n == 0 || target_len == 0 {
        return Err(Error::contract("uniform_copy needs non-empty source and target"));
    }
    tape.gather_rows(src_emb, &uniform_copy_indices(n, target_len))
}
