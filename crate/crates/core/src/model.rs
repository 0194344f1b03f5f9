//! The ReorderNAT architecture and its two baselines.
//!
//! ```text
//!   X ──encoder──▶ S ──reordering module──▶ Z (source words, target order)
//!                  │                         │
//!                  └──────▶ decoder module ◀─┘ ──▶ Y (all positions at once)
//! ```
//!
//! The reordering module is either one non-causal Transformer decoder block
//! fed with Uniform-Copy source embeddings (length from the length
//! predictor) or a GRU block decoding greedily until EOS. Its output head
//! scores only the words of the current source sentence plus NULL (and EOS
//! for the recurrent variant). The plain NAT baseline drops the reordering
//! module and feeds Uniform-Copy embeddings straight into the decoder; the
//! teacher is a left-to-right Transformer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    sinusoidal_positions, uniform_copy, AttentionMask, BlockConfig, DecoderBlock, EncoderBlock, Forward, GruBlock,
};
use crate::data::vocab::{BOS, EOS, NULL};
use crate::error::{Error, Result};
use crate::numcore::{argmax, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReorderKind {
    /// One non-causal Transformer decoder block.
    Nat,
    /// One GRU decoder block, greedy left to right.
    At,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    ReorderNat(ReorderKind),
    /// ReorderNAT without the reordering module.
    PlainNat,
    /// Autoregressive Transformer used as teacher and upper baseline.
    Teacher,
}

impl Architecture {
    pub fn reorder_kind(self) -> Option<ReorderKind> {
        match self {
            Architecture::ReorderNat(k) => Some(k),
            _ => None,
        }
    }

    pub fn has_length_predictor(self) -> bool {
        self != Architecture::Teacher
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::ReorderNat(ReorderKind::Nat) => "reorder-nat",
            Architecture::ReorderNat(ReorderKind::At) => "reorder-at",
            Architecture::PlainNat => "plain-nat",
            Architecture::Teacher => "teacher",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "reorder-nat" => Architecture::ReorderNat(ReorderKind::Nat),
            "reorder-at" => Architecture::ReorderNat(ReorderKind::At),
            "plain-nat" => Architecture::PlainNat,
            "teacher" => Architecture::Teacher,
            _ => return Err(Error::Config(format!("unknown architecture {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// N: encoder depth; the decoder module has N − K blocks (N for the teacher).
    pub n_layers: usize,
    /// K: reordering-module depth. Always 1.
    pub reorder_layers: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub head_count: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    /// NDGD temperature T.
    pub temperature: f64,
    pub label_smoothing: f64,
    /// Δ: the length predictor classifies offsets in `[−Δ, Δ]`.
    pub max_len_offset: usize,
    /// Longest source or target sentence the model accepts.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::ReorderNat(ReorderKind::Nat),
            n_layers: 3,
            reorder_layers: 1,
            model_dim: 32,
            hidden_dim: 64,
            head_count: 2,
            dropout_rate: 0.0,
            vocab_size: 0,
            temperature: 0.2,
            label_smoothing: 0.15,
            max_len_offset: 20,
            max_len: 64,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            model_dim: self.model_dim,
            hidden_dim: self.hidden_dim,
            head_count: self.head_count,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim % 2 != 0 {
            return bad(format!("model_dim {} must be even for positional encodings", self.model_dim));
        }
        if self.reorder_layers != 1 {
            return bad(format!("reorder_layers must be 1, got {}", self.reorder_layers));
        }
        if self.n_layers <= self.reorder_layers {
            return bad(format!(
                "n_layers {} must exceed reorder_layers {}",
                self.n_layers, self.reorder_layers
            ));
        }
        if self.vocab_size <= NULL + 1 {
            return bad(format!("vocab_size {} leaves no room beyond the reserved tokens", self.vocab_size));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.max_len_offset == 0 || self.max_len == 0 {
            return bad("max_len_offset and max_len must be positive".into());
        }
        Ok(())
    }

    /// Decoder-module depth.
    pub fn decoder_layers(&self) -> usize {
        match self.architecture {
            Architecture::Teacher => self.n_layers,
            _ => self.n_layers - self.reorder_layers,
        }
    }

    pub fn length_classes(&self) -> usize {
        2 * self.max_len_offset + 1
    }
}

/// Deduplicated source words in first-occurrence order, then NULL.
pub fn restricted_vocab(source: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(source.len() + 1);
    for &t in source {
        if t != NULL && !out.contains(&t) {
            out.push(t);
        }
    }
    out.push(NULL);
    out
}

/// Per-position distribution over the restricted vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceDistribution {
    /// `m × |V_r|`.
    pub q: Tensor,
    pub restricted_vocab: Vec<usize>,
}

/// `Q = softmax(scores / T)` row-wise.
pub fn guidance_from_scores(scores: &Tensor, temperature: f64, restricted_vocab: Vec<usize>) -> Result<GuidanceDistribution> {
    if scores.cols() != restricted_vocab.len() {
        return Err(Error::shape(format!(
            "{} score columns for a restricted vocabulary of {}",
            scores.cols(),
            restricted_vocab.len()
        )));
    }
    Ok(GuidanceDistribution {
        q: scores.softmax_rows(temperature)?,
        restricted_vocab,
    })
}

/// Encoder output for one sentence on the current tape.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `S: n × d`.
    pub s: Var,
    pub source: Vec<usize>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct LengthPrediction {
    /// `1 × (2Δ+1)` logits; column `k` stands for offset `k − Δ`.
    pub logits: Var,
    pub offset: i64,
    pub length: usize,
}

/// Greedy output of the recurrent reordering module.
#[derive(Clone, Debug)]
pub struct AtReorderOutput {
    pub tokens: Vec<usize>,
    /// `|Z*| × |V_r|` pre-softmax scores of the emitted steps (EOS column dropped).
    pub scores: Var,
    pub restricted_vocab: Vec<usize>,
    /// Stopped at `max_steps` without emitting EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
enum ReorderModule {
    Nat(DecoderBlock),
    At(GruBlock),
}

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

/// Parameters of one model plus the handles needed to run it.
#[derive(Clone, Debug)]
pub struct ReorderNatParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderBlock>,
    reorder: Option<(ReorderModule, Head)>,
    decoder: Vec<DecoderBlock>,
    output: Head,
    length: Option<Head>,
    positions: Tensor,
}

impl ReorderNatParams {
    /// Seeded initialization: Xavier-uniform matrices, zero biases, unit gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let (d, v) = (config.model_dim, config.vocab_size);
        let block = config.block();
        let mut store = ParamStore::new();
        let embedding = store.add_xavier("emb", v, d, rng);
        let encoder = (0..config.n_layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("enc{i}"), &block, rng))
            .collect();
        let head = |store: &mut ParamStore, name: &str, cols: usize, rng: &mut ChaCha8Rng| Head {
            w: store.add_xavier(&format!("{name}.w"), d, cols, rng),
            b: store.add_const(&format!("{name}.b"), 1, cols, 0.0),
        };
        let reorder = match config.architecture.reorder_kind() {
            None => None,
            Some(ReorderKind::Nat) => Some((
                ReorderModule::Nat(DecoderBlock::new(&mut store, "reorder", &block, rng)),
                head(&mut store, "reorder.head", v, rng),
            )),
            Some(ReorderKind::At) => Some((
                ReorderModule::At(GruBlock::new(&mut store, "reorder", &block, rng)),
                head(&mut store, "reorder.head", v, rng),
            )),
        };
        let decoder = (0..config.decoder_layers())
            .map(|i| DecoderBlock::new(&mut store, &format!("dec{i}"), &block, rng))
            .collect();
        let output = head(&mut store, "out", v, rng);
        let length = config
            .architecture
            .has_length_predictor()
            .then(|| head(&mut store, "len", config.length_classes(), rng));
        let positions = sinusoidal_positions(config.max_len + 2, d)?;
        Ok(ReorderNatParams {
            config,
            store,
            embedding,
            encoder,
            reorder,
            decoder,
            output,
            length,
            positions,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.store.census()
    }

    /// Parameter count per name prefix (`emb`, `enc0`, `reorder`, ...).
    pub fn census_by_component(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.store.iter() {
            let key = match name.split('.').next().unwrap_or(name) {
                "reorder" if name.starts_with("reorder.head") => "reorder.head",
                k => k,
            };
            match out.iter_mut().find(|(k, _)| k == key) {
                Some((_, n)) => *n += t.len(),
                None => out.push((key.to_string(), t.len())),
            }
        }
        out
    }

    fn check_tokens(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::contract(format!("empty {what}")));
        }
        if ids.len() > self.config.max_len + 1 {
            return Err(Error::contract(format!(
                "{what} of length {} exceeds the maximum of {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = ids.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(Error::Vocab(format!(
                "token id {t} in {what} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_len(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.config.max_len {
            return Err(Error::contract(format!(
                "target length {m} outside 1..={}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Raw embedding rows `Emb(ids)`.
    pub fn embed(&self, f: &mut Forward, ids: &[usize]) -> Result<Var> {
        let e = f.p(self.embedding);
        f.tape.gather_rows(e, ids)
    }

    fn scaled(&self, f: &mut Forward, x: Var) -> Var {
        f.tape.scale(x, (self.config.model_dim as f64).sqrt())
    }

    fn add_positions(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let (m, d) = f.tape.dims(h);
        let pe = f.tape.constant(m, d, self.positions.data()[..m * d].to_vec());
        f.tape.add(h, pe)
    }

    fn head_logits(&self, f: &mut Forward, h: Var, head: &Head, cols: Option<&[usize]>) -> Result<Var> {
        let mut w = f.p(head.w);
        let mut b = f.p(head.b);
        if let Some(c) = cols {
            w = f.tape.select_cols(w, c)?;
            b = f.tape.select_cols(b, c)?;
        }
        let y = f.tape.matmul(h, w)?;
        f.tape.add_row(y, b)
    }

    /// `S = E^N(Emb(X)·√d + PE)`.
    pub fn encode(&self, f: &mut Forward, x: &[usize]) -> Result<EncoderOutput> {
        self.check_tokens(x, "source sentence")?;
        if x.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "source length {} exceeds the maximum of {}",
                x.len(),
                self.config.max_len
            )));
        }
        let e = self.embed(f, x)?;
        let e = self.scaled(f, e);
        let mut h = self.add_positions(f, e)?;
        for block in &self.encoder {
            h = block.forward(f, h)?;
        }
        Ok(EncoderOutput {
            s: h,
            source: x.to_vec(),
        })
    }

    /// Offset logits from mean-pooled `S`.
    pub fn length_logits(&self, f: &mut Forward, enc: &EncoderOutput) -> Result<Var> {
        let head = self
            .length
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} has no length predictor", self.architecture())))?;
        let pooled = f.tape.mean_rows(enc.s);
        self.head_logits(f, pooled, head, None)
    }

    /// Class index of offset `m − n`, clamped to `[−Δ, Δ]`.
    pub fn length_class(&self, source_len: usize, target_len: usize) -> usize {
        let delta = self.config.max_len_offset as i64;
        let off = (target_len as i64 - source_len as i64).clamp(-delta, delta);
        (off + delta) as usize
    }

    pub fn predict_length(&self, f: &mut Forward, enc: &EncoderOutput) -> Result<LengthPrediction> {
        let logits = self.length_logits(f, enc)?;
        let offset = argmax(f.tape.value(logits)) as i64 - self.config.max_len_offset as i64;
        let length = (enc.len() as i64 + offset).clamp(1, self.config.max_len as i64) as usize;
        Ok(LengthPrediction { logits, offset, length })
    }

    /// Uniform-Copy of `Emb(X)·√d` to length `m`, plus positions.
    fn copied_input(&self, f: &mut Forward, enc: &EncoderOutput, m: usize) -> Result<Var> {
        self.check_len(m)?;
        let e = self.embed(f, &enc.source)?;
        let e = self.scaled(f, e);
        let c = uniform_copy(f.tape, e, m)?;
        self.add_positions(f, c)
    }

    fn reorder_parts(&self) -> Result<(&ReorderModule, &Head)> {
        self.reorder
            .as_ref()
            .map(|(m, h)| (m, h))
            .ok_or_else(|| Error::contract(format!("{} has no reordering module", self.architecture())))
    }

    /// `m × |V_r|` reordering scores of the non-autoregressive module.
    pub fn reorder_nonautoregressive(&self, f: &mut Forward, enc: &EncoderOutput, m: usize) -> Result<Var> {
        let (ReorderModule::Nat(block), head) = self.reorder_parts()? else {
            return Err(Error::contract("the reordering module is recurrent"));
        };
        let h = self.copied_input(f, enc, m)?;
        let r = block.forward(f, h, enc.s, &AttentionMask::full(m, m))?;
        self.head_logits(f, r, head, Some(&restricted_vocab(&enc.source)))
    }

    fn gru_parts(&self) -> Result<(&GruBlock, &Head)> {
        match self.reorder_parts()? {
            (ReorderModule::At(g), head) => Ok((g, head)),
            _ => Err(Error::contract("the reordering module is not recurrent")),
        }
    }

    /// Columns of the recurrent head: `V_r` then EOS.
    fn at_columns(source: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let vr = restricted_vocab(source);
        let mut cols = vr.clone();
        cols.push(EOS);
        (vr, cols)
    }

    /// Teacher-forced recurrent scores: row `i` predicts `z_{i+1}` (row `|z|`
    /// predicts EOS); `(|z|+1) × (|V_r|+1)` with EOS in the last column.
    pub fn reorder_at_forced(&self, f: &mut Forward, enc: &EncoderOutput, z: &[usize]) -> Result<Var> {
        let (gru, head) = self.gru_parts()?;
        let (_, cols) = Self::at_columns(&enc.source);
        let mut inputs = Vec::with_capacity(z.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(z);
        let embs = self.embed(f, &inputs)?;
        let mut state = f.tape.mean_rows(enc.s);
        let mut context = gru.initial_context(f, state, enc.s)?;
        let mut outs = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let e = f.tape.gather_rows(embs, &[i])?;
            let step = gru.step(f, state, context, e, enc.s)?;
            state = step.state;
            context = step.context;
            outs.push(step.out);
        }
        let h = f.tape.concat_rows(&outs)?;
        self.head_logits(f, h, head, Some(&cols))
    }

    /// Greedy decoding over `V_r ∪ {EOS}`; EOS is not allowed at the first step.
    pub fn reorder_autoregressive(&self, f: &mut Forward, enc: &EncoderOutput, max_steps: usize) -> Result<AtReorderOutput> {
        self.at_greedy(f, enc, max_steps, false)
    }

    /// Greedy decoding of exactly `len` words (EOS never chosen).
    pub fn reorder_autoregressive_fixed(&self, f: &mut Forward, enc: &EncoderOutput, len: usize) -> Result<AtReorderOutput> {
        let mut out = self.at_greedy(f, enc, len, true)?;
        out.truncated = false;
        Ok(out)
    }

    fn at_greedy(&self, f: &mut Forward, enc: &EncoderOutput, max_steps: usize, exact: bool) -> Result<AtReorderOutput> {
        let (gru, head) = self.gru_parts()?;
        let (vr, cols) = Self::at_columns(&enc.source);
        let eos_col = cols.len() - 1;
        let mut state = f.tape.mean_rows(enc.s);
        let mut context = gru.initial_context(f, state, enc.s)?;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        let mut truncated = true;
        for step_idx in 0..max_steps {
            let e = self.embed(f, &[prev])?;
            let step = gru.step(f, state, context, e, enc.s)?;
            state = step.state;
            context = step.context;
            let logits = self.head_logits(f, step.out, head, Some(&cols))?;
            let row = f.tape.value(logits);
            let k = if step_idx == 0 || exact { argmax(&row[..eos_col]) } else { argmax(row) };
            if k == eos_col {
                truncated = false;
                break;
            }
            rows.push(f.tape.slice_cols(logits, 0, eos_col)?);
            tokens.push(cols[k]);
            prev = cols[k];
        }
        if tokens.is_empty() {
            return Err(Error::contract("recurrent reordering needs at least one step"));
        }
        let scores = f.tape.concat_rows(&rows)?;
        Ok(AtReorderOutput {
            tokens,
            scores,
            restricted_vocab: vr,
            truncated,
        })
    }

    /// DGD decoder input: `Emb(Z*)·√d + PE`.
    pub fn dgd_input(&self, f: &mut Forward, z: &[usize]) -> Result<Var> {
        self.check_tokens(z, "pseudo-translation")?;
        self.check_len(z.len())?;
        let e = self.embed(f, z)?;
        let e = self.scaled(f, e);
        self.add_positions(f, e)
    }

    /// NDGD decoder input: `(Q · Emb(V_r))·√d + PE`.
    pub fn ndgd_input(&self, f: &mut Forward, q: Var, vr: &[usize]) -> Result<Var> {
        let (m, k) = f.tape.dims(q);
        if k != vr.len() {
            return Err(Error::shape(format!(
                "guidance over {k} entries for a restricted vocabulary of {}",
                vr.len()
            )));
        }
        self.check_len(m)?;
        let e = self.embed(f, vr)?;
        let mix = f.tape.matmul(q, e)?;
        let mix = self.scaled(f, mix);
        self.add_positions(f, mix)
    }

    /// N−1 non-causal decoder blocks and the full-vocabulary head.
    pub fn decoder_module(&self, f: &mut Forward, input: Var, enc: &EncoderOutput) -> Result<Var> {
        let (m, d) = f.tape.dims(input);
        if d != self.config.model_dim {
            return Err(Error::shape(format!(
                "decoder input of width {d}, model width {}",
                self.config.model_dim
            )));
        }
        let mask = AttentionMask::full(m, m);
        let mut h = input;
        for block in &self.decoder {
            h = block.forward(f, h, enc.s, &mask)?;
        }
        self.head_logits(f, h, &self.output, None)
    }

    /// Plain NAT: Uniform-Copy input straight into the decoder module.
    pub fn plain_nat_forward(&self, f: &mut Forward, enc: &EncoderOutput, m: usize) -> Result<Var> {
        if self.architecture() != Architecture::PlainNat {
            return Err(Error::contract(format!("{} is not the plain NAT baseline", self.architecture())));
        }
        let h = self.copied_input(f, enc, m)?;
        self.decoder_module(f, h, enc)
    }

    /// Left-to-right Transformer over `[BOS] ++ prefix`: row `i` holds the
    /// next-token logits after `i` target tokens.
    pub fn at_teacher_forward(&self, f: &mut Forward, enc: &EncoderOutput, prefix: &[usize]) -> Result<Var> {
        if self.architecture() != Architecture::Teacher {
            return Err(Error::contract(format!("{} is not the autoregressive teacher", self.architecture())));
        }
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        self.check_tokens(&inputs, "target prefix")?;
        let e = self.embed(f, &inputs)?;
        let e = self.scaled(f, e);
        let mut h = self.add_positions(f, e)?;
        let mask = AttentionMask::causal(inputs.len());
        for block in &self.decoder {
            h = block.forward(f, h, enc.s, &mask)?;
        }
        self.head_logits(f, h, &self.output, None)
    }
}

#[cfg(test)]
mod tests;
