//! Inference: DGD, NDGD, length-parallel decoding, the plain NAT baseline
//! and greedy/beam decoding of the autoregressive teacher.
//!
//! Every strategy counts forward passes per module. A non-autoregressive
//! module costs one pass per call regardless of length; autoregressive
//! modules cost one pass per emitted token. The step that emits the closing
//! EOS is tallied in `eos` rather than in the module counts.

use std::fmt;
use std::str::FromStr;

use crate::blocks::Forward;
use crate::data::vocab::{EOS, NULL};
use crate::error::{Error, Result};
use crate::model::{restricted_vocab, Architecture, EncoderOutput, GuidanceDistribution, ReorderKind, ReorderNatParams};
use crate::numcore::{argmax, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Dgd,
    Ndgd,
    NatBaseline,
    AtGreedy,
    AtBeam,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Dgd => "dgd",
            Strategy::Ndgd => "ndgd",
            Strategy::NatBaseline => "nat",
            Strategy::AtGreedy => "greedy",
            Strategy::AtBeam => "beam",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dgd" => Strategy::Dgd,
            "ndgd" => Strategy::Ndgd,
            "nat" => Strategy::NatBaseline,
            "greedy" => Strategy::AtGreedy,
            "beam" => Strategy::AtBeam,
            _ => return Err(Error::Config(format!("unknown decoding strategy {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    pub beam_size: usize,
    /// LPD sample size `s` (odd); 1 disables length-parallel decoding.
    pub lpd_samples: usize,
    pub max_len: usize,
    /// Magnitude of a deterministic ±k corruption of predicted lengths.
    pub length_noise: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Dgd,
            temperature: 0.2,
            beam_size: 4,
            lpd_samples: 1,
            max_len: 64,
            length_noise: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature {} must be positive", self.temperature)));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.lpd_samples == 0 || self.lpd_samples % 2 == 0 {
            return Err(Error::Config(format!("LPD sample size {} must be odd", self.lpd_samples)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Forward passes spent on one sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub encoder: usize,
    pub reorder: usize,
    pub decoder: usize,
    /// Autoregressive steps whose only output was the closing EOS.
    pub eos: usize,
}

impl std::ops::AddAssign for PassCounts {
    fn add_assign(&mut self, o: Self) {
        self.encoder += o.encoder;
        self.reorder += o.reorder;
        self.decoder += o.decoder;
        self.eos += o.eos;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Argmax pseudo-translation (DGD/NDGD only).
    pub pseudo: Option<Vec<usize>>,
    /// Guidance fed to the decoder (NDGD only).
    pub guidance: Option<GuidanceDistribution>,
    /// `log P(y*_i)` per emitted position.
    pub log_probs: Vec<f64>,
    /// Length-normalized model log-probability used for LPD and beam ranking.
    pub score: f64,
    pub passes: PassCounts,
    pub length: usize,
    pub truncated: bool,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Per-row argmax ids (mapped through `cols` when given) with their log-probs.
fn pick_rows(tape: &Tape, logits: Var, cols: Option<&[usize]>) -> (Vec<usize>, Vec<f64>) {
    let (m, _) = tape.dims(logits);
    let mut ids = Vec::with_capacity(m);
    let mut lps = Vec::with_capacity(m);
    for i in 0..m {
        let row = tape.row(logits, i);
        let k = argmax(row);
        lps.push(log_softmax_row(row)[k]);
        ids.push(cols.map_or(k, |c| c[k]));
    }
    (ids, lps)
}

/// Deterministic sign for the length corruption of one source sentence.
fn noise_sign(x: &[usize]) -> i64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in x {
        h ^= t as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    if h >> 63 == 0 {
        1
    } else {
        -1
    }
}

fn check_source(x: &[usize]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::contract("cannot decode an empty source sentence"));
    }
    Ok(())
}

struct Guided {
    tokens: Vec<usize>,
    pseudo: Vec<usize>,
    guidance: Option<GuidanceDistribution>,
    log_probs: Vec<f64>,
    pseudo_log_prob: f64,
    reorder_passes: usize,
    eos: usize,
    truncated: bool,
}

/// Predicted length after the configured corruption.
fn noisy_length(model: &ReorderNatParams, f: &mut Forward, enc: &EncoderOutput, cfg: &DecodeConfig) -> Result<usize> {
    let m = model.predict_length(f, enc)?.length as i64;
    let m = m + cfg.length_noise as i64 * noise_sign(&enc.source);
    Ok(m.clamp(1, cfg.max_len.min(model.config.max_len) as i64) as usize)
}

/// Reordering then translation at a given length (NAT variant) or until EOS
/// (recurrent variant, `m = None`).
fn guided(model: &ReorderNatParams, f: &mut Forward, enc: &EncoderOutput, m: Option<usize>, ndgd: bool, cfg: &DecodeConfig) -> Result<Guided> {
    let vr = restricted_vocab(&enc.source);
    let (scores, pseudo, pseudo_lps, reorder_passes, eos, truncated) = match m {
        Some(m) => {
            let scores = model.reorder_nonautoregressive(f, enc, m)?;
            let (z, lps) = pick_rows(f.tape, scores, Some(&vr));
            (scores, z, lps, 1, 0, false)
        }
        None => {
            let limit = cfg.max_len.min(model.config.max_len);
            let out = model.reorder_autoregressive(f, enc, limit)?;
            let (_, lps) = pick_rows(f.tape, out.scores, Some(&vr));
            let steps = out.tokens.len();
            (out.scores, out.tokens, lps, steps, usize::from(!out.truncated), out.truncated)
        }
    };
    let (input, guidance) = if ndgd {
        let q = f.tape.softmax(scores, cfg.temperature)?;
        let g = GuidanceDistribution {
            q: f.tape.to_tensor(q),
            restricted_vocab: vr.clone(),
        };
        (model.ndgd_input(f, q, &vr)?, Some(g))
    } else {
        (model.dgd_input(f, &pseudo)?, None)
    };
    let logits = model.decoder_module(f, input, enc)?;
    let (tokens, log_probs) = pick_rows(f.tape, logits, None);
    Ok(Guided {
        tokens,
        pseudo,
        guidance,
        log_probs,
        pseudo_log_prob: pseudo_lps.iter().sum(),
        reorder_passes,
        eos,
        truncated,
    })
}

fn finish_guided(g: Guided, encoder: usize) -> DecodeResult {
    let m = g.tokens.len();
    let score = (g.pseudo_log_prob + g.log_probs.iter().sum::<f64>()) / m as f64;
    DecodeResult {
        length: m,
        tokens: g.tokens,
        pseudo: Some(g.pseudo),
        guidance: g.guidance,
        log_probs: g.log_probs,
        score,
        passes: PassCounts {
            encoder,
            reorder: g.reorder_passes,
            decoder: 1,
            eos: g.eos,
        },
        truncated: g.truncated,
    }
}

fn require_reorder(model: &ReorderNatParams) -> Result<ReorderKind> {
    model
        .architecture()
        .reorder_kind()
        .ok_or_else(|| Error::contract(format!("{} has no reordering module", model.architecture())))
}

fn guided_decode(model: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig, ndgd: bool) -> Result<DecodeResult> {
    check_source(x)?;
    cfg.validate()?;
    let kind = require_reorder(model)?;
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store);
    let enc = model.encode(&mut f, x)?;
    let m = match kind {
        ReorderKind::Nat => Some(noisy_length(model, &mut f, &enc, cfg)?),
        ReorderKind::At => None,
    };
    Ok(finish_guided(guided(model, &mut f, &enc, m, ndgd, cfg)?, 1))
}

/// DGD (`ndgd = false`) or NDGD at a fixed target length (NAT reordering only).
pub fn guided_at_length(model: &ReorderNatParams, x: &[usize], m: usize, ndgd: bool, cfg: &DecodeConfig) -> Result<DecodeResult> {
    check_source(x)?;
    cfg.validate()?;
    if require_reorder(model)? != ReorderKind::Nat {
        return Err(Error::contract("fixed-length decoding needs the non-autoregressive reordering module"));
    }
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store);
    let enc = model.encode(&mut f, x)?;
    Ok(finish_guided(guided(model, &mut f, &enc, Some(m), ndgd, cfg)?, 1))
}

/// Argmax pseudo-translation, then per-position argmax translation.
pub fn dgd_decode(model: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    guided_decode(model, x, cfg, false)
}

/// Decoder fed `Q`-weighted embeddings with `Q = softmax(scores / T)`.
pub fn ndgd_decode(model: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    guided_decode(model, x, cfg, true)
}

/// Decodes at every length in `m̂ ± ⌊s/2⌋` and keeps the best-scoring
/// candidate. `cfg.strategy` selects DGD or NDGD guidance. When `reranker`
/// (an autoregressive teacher) is given, candidates are ranked by its
/// length-normalized log-probability instead of the model's own score.
pub fn lpd_decode(model: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig, reranker: Option<&ReorderNatParams>) -> Result<DecodeResult> {
    Ok(lpd_candidates(model, x, cfg, reranker)?.0)
}

/// The LPD winner plus every candidate (ascending length) with its ranking score.
pub fn lpd_candidates(
    model: &ReorderNatParams,
    x: &[usize],
    cfg: &DecodeConfig,
    reranker: Option<&ReorderNatParams>,
) -> Result<(DecodeResult, Vec<(DecodeResult, f64)>)> {
    check_source(x)?;
    cfg.validate()?;
    if require_reorder(model)? != ReorderKind::Nat {
        return Err(Error::contract("length-parallel decoding needs the non-autoregressive reordering module"));
    }
    let ndgd = match cfg.strategy {
        Strategy::Dgd => false,
        Strategy::Ndgd => true,
        s => return Err(Error::Config(format!("LPD runs with dgd or ndgd guidance, not {s}"))),
    };
    if let Some(r) = reranker {
        if r.architecture() != Architecture::Teacher {
            return Err(Error::contract("LPD re-ranking needs the autoregressive teacher"));
        }
    }
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store);
    let enc = model.encode(&mut f, x)?;
    let center = noisy_length(model, &mut f, &enc, cfg)? as i64;
    let half = (cfg.lpd_samples / 2) as i64;
    let limit = cfg.max_len.min(model.config.max_len) as i64;
    let mut lengths: Vec<usize> = (center - half..=center + half)
        .map(|m| m.clamp(1, limit) as usize)
        .collect();
    lengths.dedup();

    let mut candidates = Vec::with_capacity(lengths.len());
    for (k, &m) in lengths.iter().enumerate() {
        let g = guided(model, &mut f, &enc, Some(m), ndgd, cfg)?;
        let r = finish_guided(g, usize::from(k == 0));
        let rank = match reranker {
            Some(t) => teacher_score(t, x, &r.tokens)?,
            None => r.score,
        };
        candidates.push((r, rank));
    }
    let mut best = 0;
    for (k, c) in candidates.iter().enumerate() {
        if c.1 > candidates[best].1 {
            best = k;
        }
    }
    let mut out = candidates[best].0.clone();
    out.passes = PassCounts::default();
    for c in &candidates {
        out.passes += c.0.passes;
    }
    Ok((out, candidates))
}

/// `log P(y, EOS | x) / |y|` under the teacher.
pub fn teacher_score(teacher: &ReorderNatParams, x: &[usize], y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &teacher.store);
    let enc = teacher.encode(&mut f, x)?;
    let logits = teacher.at_teacher_forward(&mut f, &enc, y)?;
    let mut total = 0.0;
    for (i, &t) in y.iter().chain(std::iter::once(&EOS)).enumerate() {
        total += log_softmax_row(f.tape.row(logits, i))[t];
    }
    Ok(total / y.len().max(1) as f64)
}

/// Plain NAT: predicted length, Uniform-Copy input, per-position argmax.
pub fn nat_baseline_decode(model: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    check_source(x)?;
    cfg.validate()?;
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store);
    let enc = model.encode(&mut f, x)?;
    let m = noisy_length(model, &mut f, &enc, cfg)?;
    let logits = model.plain_nat_forward(&mut f, &enc, m)?;
    let (tokens, log_probs) = pick_rows(f.tape, logits, None);
    let score = log_probs.iter().sum::<f64>() / m as f64;
    Ok(DecodeResult {
        length: m,
        tokens,
        pseudo: None,
        guidance: None,
        log_probs,
        score,
        passes: PassCounts {
            encoder: 1,
            reorder: 0,
            decoder: 1,
            eos: 0,
        },
        truncated: false,
    })
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    total: f64,
    /// Descends from the greedy choice at every step.
    greedy: bool,
}

/// Left-to-right decoding with the teacher; `beam_size = 1` is greedy.
/// EOS is not allowed as the first token. Hypotheses are ranked by total
/// log-probability (EOS included) divided by their token count; the greedy
/// path is never pruned, so the result scores at least as well as greedy.
pub fn at_decode(teacher: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    check_source(x)?;
    cfg.validate()?;
    if teacher.architecture() != Architecture::Teacher {
        return Err(Error::contract(format!("{} is not the autoregressive teacher", teacher.architecture())));
    }
    let b = match cfg.strategy {
        Strategy::AtBeam => cfg.beam_size,
        _ => 1,
    };
    let limit = cfg.max_len.min(teacher.config.max_len);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &teacher.store);
    let enc = teacher.encode(&mut f, x)?;

    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        total: 0.0,
        greedy: true,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut steps = 0usize;
    let mut eos_steps = 0usize;
    for t in 0..limit {
        steps += 1;
        let mut cands: Vec<(Hyp, bool)> = Vec::new();
        for h in &alive {
            let logits = teacher.at_teacher_forward(&mut f, &enc, &h.tokens)?;
            let lp = log_softmax_row(f.tape.row(logits, h.tokens.len()));
            let mut order: Vec<usize> = (0..lp.len()).filter(|&k| t > 0 || k != EOS).collect();
            order.sort_by(|&a, &c| lp[c].total_cmp(&lp[a]).then(a.cmp(&c)));
            for (rank, &k) in order.iter().take(b).enumerate() {
                let mut n = h.clone();
                n.tokens.push(k);
                n.log_probs.push(lp[k]);
                n.total += lp[k];
                n.greedy = h.greedy && rank == 0;
                cands.push((n, k == EOS));
            }
        }
        cands.sort_by(|a, c| c.0.total.total_cmp(&a.0.total));
        let mut keep: Vec<(Hyp, bool)> = cands.iter().take(b).cloned().collect();
        if !keep.iter().any(|c| c.0.greedy) {
            if let Some(g) = cands.iter().find(|c| c.0.greedy) {
                keep.pop();
                keep.push(g.clone());
            }
        }
        alive.clear();
        for (mut h, done) in keep {
            if done {
                h.tokens.pop();
                finished.push(h);
            } else {
                alive.push(h);
            }
        }
        if alive.is_empty() {
            eos_steps = 1;
            steps -= 1;
            break;
        }
        if finished.len() >= b && !alive.iter().any(|h| h.greedy) {
            break;
        }
    }
    let truncated = finished.is_empty();
    let pool = if truncated { &alive } else { &finished };
    let norm = |h: &Hyp| h.total / h.tokens.len().max(1) as f64;
    let mut best = &pool[0];
    for h in pool {
        if norm(h) > norm(best) {
            best = h;
        }
    }
    let m = best.tokens.len();
    let mut log_probs = best.log_probs.clone();
    log_probs.truncate(m);
    Ok(DecodeResult {
        tokens: best.tokens.clone(),
        pseudo: None,
        guidance: None,
        log_probs,
        score: norm(best),
        passes: PassCounts {
            encoder: 1,
            reorder: 0,
            decoder: steps,
            eos: eos_steps,
        },
        length: m,
        truncated,
    })
}

/// Dispatches on `cfg.strategy` (LPD when `lpd_samples > 1`).
pub fn decode(model: &ReorderNatParams, x: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    match cfg.strategy {
        Strategy::Dgd | Strategy::Ndgd if cfg.lpd_samples > 1 => lpd_decode(model, x, cfg, None),
        Strategy::Dgd => dgd_decode(model, x, cfg),
        Strategy::Ndgd => ndgd_decode(model, x, cfg),
        Strategy::NatBaseline => nat_baseline_decode(model, x, cfg),
        Strategy::AtGreedy | Strategy::AtBeam => at_decode(model, x, cfg),
    }
}

/// Decodes every source sentence.
pub fn decode_all<S: AsRef<[usize]>>(model: &ReorderNatParams, sources: &[S], cfg: &DecodeConfig) -> Result<Vec<DecodeResult>> {
    sources.iter().map(|x| decode(model, x.as_ref(), cfg)).collect()
}

/// Side-file row: pseudo-translation, then encoder/reorder/decoder/EOS passes.
pub fn sidecar_line(r: &DecodeResult, render: impl Fn(&[usize]) -> String) -> String {
    let pseudo = r.pseudo.as_deref().map(&render).unwrap_or_else(|| "-".into());
    format!(
        "{pseudo}\t{}\t{}\t{}\t{}",
        r.passes.encoder, r.passes.reorder, r.passes.decoder, r.passes.eos
    )
}

/// `Q` summary for reports: per position, the restricted-vocabulary entry
/// with the most mass and that mass.
pub fn guidance_summary(g: &GuidanceDistribution) -> Vec<(usize, f64)> {
    (0..g.q.rows())
        .map(|i| {
            let row = g.q.row(i);
            let k = argmax(row);
            (g.restricted_vocab[k], row[k])
        })
        .collect()
}

/// True when `pseudo` only uses source words and NULL.
pub fn pseudo_is_restricted(x: &[usize], pseudo: &[usize]) -> bool {
    pseudo.iter().all(|t| *t == NULL || x.contains(t))
}
