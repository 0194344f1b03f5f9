//! Joint objective `L = L_R + L_T`, Adam, learning-rate schedules,
//! sequence-level distillation and the DGD → NDGD hand-over.
//!
//! Losses are summed over tokens. Gradients are taken of the summed batch
//! objective divided by the batch's target token count, and the reported
//! `L_R`/`L_T` use the same normalization. The length predictor's loss is
//! optimized alongside but reported apart from `L`.

use std::fmt;
use std::str::FromStr;

use crate::align::{build_pseudo_translation, ibm1_em_train, viterbi_align, EmTrace};
use crate::blocks::Forward;
use crate::checkpoint::Checkpoint;
use crate::data::vocab::EOS;
use crate::data::{Batch, BatchIter, Corpus, SentenceExample};
use crate::decode::{at_decode, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::{restricted_vocab, Architecture, ReorderKind, ReorderNatParams};
use crate::numcore::{ParamStore, Tape, Var};

/// Which guidance feeds the decoder during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidingMode {
    Dgd,
    Ndgd,
}

impl fmt::Display for GuidingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidingMode::Dgd => "dgd",
            GuidingMode::Ndgd => "ndgd",
        })
    }
}

impl FromStr for GuidingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgd" => Ok(GuidingMode::Dgd),
            "ndgd" => Ok(GuidingMode::Ndgd),
            _ => Err(Error::Config(format!("unknown guiding mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// `scale · d^{−0.5} · min(step^{−0.5}, step · warmup^{−1.5})`.
    Warmup { warmup_steps: u64, model_dim: usize, scale: f64 },
    /// `start + (end − start) · min(step, total) / total`.
    Linear { start: f64, end: f64, total_steps: u64 },
    Constant(f64),
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Linear {
            start: 3e-4,
            end: 1e-5,
            total_steps: 1,
        }
    }
}

pub fn lr_schedule(step: u64, schedule: &LrSchedule) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("learning-rate steps start at 1"));
    }
    let s = step as f64;
    Ok(match *schedule {
        LrSchedule::Warmup {
            warmup_steps,
            model_dim,
            scale,
        } => scale * (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup_steps as f64).powf(-1.5)),
        LrSchedule::Linear { start, end, total_steps } => {
            let frac = (s / total_steps.max(1) as f64).min(1.0);
            start + (end - start) * frac
        }
        LrSchedule::Constant(lr) => lr,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: GuidingMode,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub max_steps: u64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub distill: bool,
    /// Recurrent-variant NDGD: score gold prefixes (`true`) or greedy ones.
    pub ndgd_gold_prefix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: GuidingMode::Dgd,
            schedule: LrSchedule::default(),
            batch_size: 32,
            max_steps: 1000,
            label_smoothing: 0.15,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            max_grad_norm: None,
            seed: 1,
            distill: false,
            ndgd_gold_prefix: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Smoothed target row: `1 − ε + ε/V′` at `gold`, `ε/V′` elsewhere.
pub fn smoothed_target(gold: usize, support: usize, eps: f64) -> Vec<f64> {
    let off = eps / support as f64;
    let mut q = vec![off; support];
    q[gold] += 1.0 - eps;
    q
}

/// Entropy of the smoothed target: the minimum attainable smoothed loss per token.
pub fn smoothing_floor(support: usize, eps: f64) -> f64 {
    let q = smoothed_target(0, support, eps);
    -q.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `−Σ_rows Σ_k q_k log softmax(logits)_k`; `None` rows (padding) are skipped.
/// `gold` indexes the columns of `logits`, which form the support.
pub fn smoothed_cross_entropy(tape: &mut Tape, logits: Var, gold: &[Option<usize>], eps: f64) -> Result<Var> {
    let (_, v) = tape.dims(logits);
    let targets = gold
        .iter()
        .map(|g| match g {
            Some(k) if *k >= v => Err(Error::contract(format!("gold index {k} outside a support of {v}"))),
            Some(k) => Ok(Some(smoothed_target(*k, v, eps))),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    tape.cross_entropy(logits, &targets)
}

/// Settings that shape the loss (as opposed to the optimizer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub mode: GuidingMode,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub ndgd_gold_prefix: bool,
}

impl LossSettings {
    pub fn new(model: &ReorderNatParams, cfg: &TrainConfig) -> Self {
        LossSettings {
            mode: cfg.mode,
            label_smoothing: cfg.label_smoothing,
            temperature: model.config.temperature,
            ndgd_gold_prefix: cfg.ndgd_gold_prefix,
        }
    }
}

/// Loss terms of one example as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct ExampleTerms {
    pub reorder: Option<Var>,
    pub translation: Var,
    pub length: Option<Var>,
}

fn columns_of(tokens: &[usize], cols: &[usize], index: usize) -> Result<Vec<Option<usize>>> {
    tokens
        .iter()
        .map(|t| {
            cols.iter().position(|c| c == t).map(Some).ok_or_else(|| {
                Error::Data(format!(
                    "example {index}: pseudo-translation token {t} is outside the source words and NULL"
                ))
            })
        })
        .collect()
}

/// Builds every loss term of one example on `f`'s tape.
pub fn example_terms(model: &ReorderNatParams, f: &mut Forward, ex: &SentenceExample, index: usize, s: &LossSettings) -> Result<ExampleTerms> {
    let eps = s.label_smoothing;
    let enc = model.encode(f, &ex.source)?;
    let y = &ex.target;
    let m = y.len();
    let gold_y: Vec<Option<usize>> = y.iter().map(|&t| Some(t)).collect();
    let length = if model.architecture().has_length_predictor() {
        let logits = model.length_logits(f, &enc)?;
        let class = model.length_class(enc.len(), m);
        Some(smoothed_cross_entropy(f.tape, logits, &[Some(class)], 0.0)?)
    } else {
        None
    };

    let (reorder, translation) = match model.architecture() {
        Architecture::Teacher => {
            let logits = model.at_teacher_forward(f, &enc, y)?;
            let mut gold = gold_y;
            gold.push(Some(EOS));
            (None, smoothed_cross_entropy(f.tape, logits, &gold, eps)?)
        }
        Architecture::PlainNat => {
            let logits = model.plain_nat_forward(f, &enc, m)?;
            (None, smoothed_cross_entropy(f.tape, logits, &gold_y, eps)?)
        }
        Architecture::ReorderNat(kind) => {
            let z = ex.pseudo_or_err(index)?;
            let vr = restricted_vocab(&ex.source);
            let zcols = columns_of(z, &vr, index)?;
            let (l_r, scores) = match kind {
                ReorderKind::Nat => {
                    let scores = model.reorder_nonautoregressive(f, &enc, m)?;
                    (smoothed_cross_entropy(f.tape, scores, &zcols, eps)?, scores)
                }
                ReorderKind::At => {
                    let forced = model.reorder_at_forced(f, &enc, z)?;
                    let mut gold = zcols;
                    gold.push(Some(vr.len()));
                    let l_r = smoothed_cross_entropy(f.tape, forced, &gold, eps)?;
                    let scores = if s.mode == GuidingMode::Ndgd && !s.ndgd_gold_prefix {
                        model.reorder_autoregressive_fixed(f, &enc, m)?.scores
                    } else {
                        let rows: Vec<usize> = (0..m).collect();
                        let r = f.tape.gather_rows(forced, &rows)?;
                        f.tape.slice_cols(r, 0, vr.len())?
                    };
                    (l_r, scores)
                }
            };
            let input = match s.mode {
                GuidingMode::Dgd => model.dgd_input(f, z)?,
                GuidingMode::Ndgd => {
                    let q = f.tape.softmax(scores, s.temperature)?;
                    model.ndgd_input(f, q, &vr)?
                }
            };
            let logits = model.decoder_module(f, input, &enc)?;
            (Some(l_r), smoothed_cross_entropy(f.tape, logits, &gold_y, eps)?)
        }
    };
    Ok(ExampleTerms {
        reorder,
        translation,
        length,
    })
}

fn sum_scalars(tape: &mut Tape, vs: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vs {
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(acc)
}

/// Token-normalized losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// `L = L_R + L_T`.
    pub loss: f64,
    pub reorder: f64,
    pub translation: f64,
    pub length: f64,
    pub tokens: usize,
}

struct BatchGraph {
    objective: Var,
    report: LossReport,
}

fn batch_graph(model: &ReorderNatParams, f: &mut Forward, examples: &[SentenceExample], indices: &[usize], s: &LossSettings, step: u64) -> Result<BatchGraph> {
    if examples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    let (mut rs, mut ts, mut ls) = (Vec::new(), Vec::new(), Vec::new());
    let (mut r_sum, mut t_sum, mut l_sum) = (0.0, 0.0, 0.0);
    for (k, ex) in examples.iter().enumerate() {
        let idx = indices.get(k).copied().unwrap_or(k);
        let terms = example_terms(model, f, ex, idx, s)?;
        let mut value = f.tape.scalar(terms.translation);
        t_sum += value;
        ts.push(terms.translation);
        if let Some(r) = terms.reorder {
            let v = f.tape.scalar(r);
            r_sum += v;
            value += v;
            rs.push(r);
        }
        if let Some(l) = terms.length {
            let v = f.tape.scalar(l);
            l_sum += v;
            value += v;
            ls.push(l);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { step, example: idx, value });
        }
    }
    let all: Vec<Var> = rs.iter().chain(&ts).chain(&ls).copied().collect();
    let total = sum_scalars(f.tape, &all)?.expect("batch is nonempty");
    let objective = f.tape.scale(total, 1.0 / tokens as f64);
    let n = tokens as f64;
    let (reorder, translation) = (r_sum / n, t_sum / n);
    Ok(BatchGraph {
        objective,
        report: LossReport {
            loss: reorder + translation,
            reorder,
            translation,
            length: l_sum / n,
            tokens,
        },
    })
}

/// Evaluates the normalized losses without updating anything.
pub fn evaluate_loss(model: &ReorderNatParams, examples: &[SentenceExample], s: &LossSettings) -> Result<LossReport> {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store);
    Ok(batch_graph(model, &mut f, examples, &[], s, 0)?.report)
}

/// `L_R` summed over `examples` (no normalization).
pub fn reordering_loss(model: &ReorderNatParams, f: &mut Forward, examples: &[SentenceExample], s: &LossSettings) -> Result<Var> {
    let mut vs = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let t = example_terms(model, f, ex, i, s)?;
        vs.push(t.reorder.ok_or_else(|| Error::contract(format!("{} has no reordering loss", model.architecture())))?);
    }
    sum_scalars(f.tape, &vs)?.ok_or_else(|| Error::contract("empty batch"))
}

/// `L_T` summed over `examples` under `s.mode` guidance (no normalization).
pub fn translation_loss(model: &ReorderNatParams, f: &mut Forward, examples: &[SentenceExample], s: &LossSettings) -> Result<Var> {
    let mut vs = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        vs.push(example_terms(model, f, ex, i, s)?.translation);
    }
    sum_scalars(f.tape, &vs)?.ok_or_else(|| Error::contract("empty batch"))
}

/// Unnormalized joint objective `Σ (L_R + L_T + L_len)`, for gradient checks.
pub fn joint_objective(model: &ReorderNatParams, f: &mut Forward, examples: &[SentenceExample], s: &LossSettings) -> Result<Var> {
    let g = batch_graph(model, f, examples, &[], s, 0)?;
    let n = g.report.tokens as f64;
    Ok(f.tape.scale(g.objective, n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStats {
    pub step: u64,
    pub loss: f64,
    pub reorder_loss: f64,
    pub translation_loss: f64,
    pub length_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl TrainStats {
    pub const HEADER: &'static str = "step\tL\tL_R\tL_T\tlr\tgradnorm";
}

/// One training-log row: `step  L  L_R  L_T  lr  gradnorm`.
impl fmt::Display for TrainStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.6}",
            self.step, self.loss, self.reorder_loss, self.translation_loss, self.lr, self.grad_norm
        )
    }
}

/// Parses a training-log row written by [`TrainStats`]'s `Display`.
pub fn parse_log_line(line: &str) -> Result<TrainStats> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 6 {
        return Err(Error::Data(format!("training log row has {} columns: {line:?}", cols.len())));
    }
    let num = |i: usize| -> Result<f64> {
        cols[i]
            .parse()
            .map_err(|_| Error::Data(format!("bad number {:?} in training log", cols[i])))
    };
    Ok(TrainStats {
        step: cols[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad step {:?} in training log", cols[0])))?,
        loss: num(1)?,
        reorder_loss: num(2)?,
        translation_loss: num(3)?,
        length_loss: 0.0,
        lr: num(4)?,
        grad_norm: num(5)?,
    })
}

/// Model, optimizer and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ReorderNatParams,
    pub adam: Adam,
    pub config: TrainConfig,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: ReorderNatParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == GuidingMode::Ndgd && model.architecture().reorder_kind().is_none() {
            return Err(Error::Config(format!("{} cannot train with NDGD guidance", model.architecture())));
        }
        let adam = Adam::new(&model.store, config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            model,
            adam,
            config,
            step: 0,
        })
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings::new(&self.model, &self.config)
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn joint_step(&mut self, batch: &Batch) -> Result<TrainStats> {
        self.step_on(&batch.examples(), &batch.indices)
    }

    pub fn step_on(&mut self, examples: &[SentenceExample], indices: &[usize]) -> Result<TrainStats> {
        let step = self.step + 1;
        let settings = self.settings();
        let mut tape = Tape::new();
        let report = {
            let seed = self.config.seed.wrapping_mul(1_000_003).wrapping_add(step);
            let mut f = Forward::new(&mut tape, &self.model.store).with_dropout(self.model.config.dropout_rate, seed);
            let g = batch_graph(&self.model, &mut f, examples, indices, &settings, step)?;
            f.tape.backward(g.objective)?;
            g.report
        };
        self.model.store.zero_grad();
        tape.accumulate_param_grads(&mut self.model.store)?;
        let grad_norm = self.model.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                example: indices.first().copied().unwrap_or(0),
                value: grad_norm,
            });
        }
        if let Some(max) = self.config.max_grad_norm {
            if grad_norm > max {
                let k = max / grad_norm;
                let ids: Vec<_> = self.model.store.ids().collect();
                for id in ids {
                    self.model.store.get_mut(id).grad_mut().iter_mut().for_each(|g| *g *= k);
                }
            }
        }
        let lr = lr_schedule(step, &self.config.schedule)?;
        self.adam.update(&mut self.model.store, lr);
        self.step = step;
        Ok(TrainStats {
            step,
            loss: report.loss,
            reorder_loss: report.reorder,
            translation_loss: report.translation,
            length_loss: report.length,
            grad_norm,
            lr,
        })
    }

    /// Runs until `config.max_steps`, calling `on_step` after every update.
    pub fn train(&mut self, corpus: &Corpus, mut on_step: impl FnMut(&TrainStats) -> Result<()>) -> Result<Vec<TrainStats>> {
        let it = BatchIter::new(corpus.len(), self.config.batch_size, self.config.seed)?;
        let mut out = Vec::new();
        while self.step < self.config.max_steps {
            let batch = it.batch(corpus, it.indices_for_step(self.step + 1));
            let stats = self.joint_step(&batch)?;
            on_step(&stats)?;
            out.push(stats);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.adam.clone()),
            step: self.step,
            mode: self.config.mode,
        }
    }

    /// Resumes from a checkpoint, keeping its optimizer state and step.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(ckpt.model, config)?;
        if let Some(adam) = ckpt.optimizer {
            if adam.m.len() != t.adam.m.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            t.adam = Adam {
                beta1: t.config.beta1,
                beta2: t.config.beta2,
                eps: t.config.adam_eps,
                ..adam
            };
        }
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Copies every parameter of a DGD checkpoint into a fresh NDGD trainer
/// (optimizer reset, step 0). `expected` fixes the architecture the caller
/// intends to fine-tune; any shape difference is reported.
pub fn init_ndgd_from_dgd(ckpt: &Checkpoint, expected: &ReorderNatParams, config: TrainConfig) -> Result<Trainer> {
    if ckpt.mode != GuidingMode::Dgd {
        return Err(Error::Checkpoint(format!("expected a dgd checkpoint, found {}", ckpt.mode)));
    }
    let diff = expected.store.shape_diff(&ckpt.model.store);
    if !diff.is_empty() || expected.architecture() != ckpt.model.architecture() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch ({} vs {}): {}",
            expected.architecture(),
            ckpt.model.architecture(),
            diff.join("; ")
        )));
    }
    let mut model = expected.clone();
    for (name, t) in ckpt.model.store.iter() {
        model.store.set(name, t.clone())?;
    }
    model.store.zero_grad();
    Trainer::new(
        model,
        TrainConfig {
            mode: GuidingMode::Ndgd,
            ..config
        },
    )
}

/// Distilled corpus plus the number of sentences the teacher failed on.
#[derive(Clone, Debug)]
pub struct Distilled {
    pub corpus: Corpus,
    pub skipped: usize,
}

/// Replaces every target by the teacher's beam output. Sentences that fail
/// to decode or hit the length limit are dropped and counted.
pub fn distill_corpus(teacher: &ReorderNatParams, corpus: &Corpus, beam: usize, max_len: usize) -> Result<Distilled> {
    let cfg = DecodeConfig {
        strategy: Strategy::AtBeam,
        beam_size: beam,
        max_len,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for ex in &corpus.examples {
        match at_decode(teacher, &ex.source, &cfg) {
            Ok(r) if !r.truncated && !r.tokens.is_empty() => out.push(SentenceExample::new(ex.source.clone(), r.tokens)),
            _ => skipped += 1,
        }
    }
    Ok(Distilled {
        corpus: Corpus::new(out, max_len)?,
        skipped,
    })
}

/// Trains IBM Model 1 on `corpus` plus `extra` pairs, then attaches Viterbi
/// links and pseudo-translations to every example of `corpus`.
pub fn attach_pseudo_translations(corpus: &mut Corpus, extra: &[SentenceExample], iterations: usize) -> Result<EmTrace> {
    let pairs: Vec<(&[usize], &[usize])> = corpus
        .examples
        .iter()
        .chain(extra)
        .map(|e| (e.source.as_slice(), e.target.as_slice()))
        .collect();
    let trace = ibm1_em_train(&pairs, iterations)?;
    for ex in &mut corpus.examples {
        let links = viterbi_align(&ex.source, &ex.target, &trace.table);
        ex.pseudo = Some(build_pseudo_translation(&ex.source, &links)?);
        ex.links = Some(links);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests;
