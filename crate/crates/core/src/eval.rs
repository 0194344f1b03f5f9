//! Translation metrics and pass-count latency accounting.
//!
//! All metrics are pure functions of token sequences. Sentences are compared
//! by token equality, so they work on ids or on strings alike.
//!
//! Definitions used here:
//! * BLEU-4 with corpus-level clipped counts, brevity penalty
//!   `exp(min(0, 1 − r/c))`, no smoothing. An order for which the hypotheses
//!   contain no n-grams at all carries no evidence and is left out of the
//!   geometric mean; an order with n-grams but no matches makes BLEU 0.
//! * RIBES with `α = 0.25`, `β = 0.10`; the k-th occurrence of a word in the
//!   hypothesis is aligned to its k-th occurrence in the reference.
//! * Dup: tokens equal to their immediate predecessor, over all tokens.
//! * Mis: per-type reference count deficit, over all reference tokens.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::hash::Hash;

use crate::decode::{DecodeResult, PassCounts};
use crate::error::{Error, Result};

pub const RIBES_ALPHA: f64 = 0.25;
pub const RIBES_BETA: f64 = 0.10;

fn check_pairs<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::contract("metrics need a nonempty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0–100 scale.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let rc = ngram_counts(rf, n);
            for (g, k) in ngram_counts(h, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Reference positions of hypothesis words, in hypothesis order.
fn aligned_ranks<T: Eq + Hash>(h: &[T], r: &[T]) -> Vec<usize> {
    let mut positions: HashMap<&T, Vec<usize>> = HashMap::new();
    for (j, w) in r.iter().enumerate() {
        positions.entry(w).or_default().push(j);
    }
    let mut used: HashMap<&T, usize> = HashMap::new();
    let mut ranks = Vec::new();
    for w in h {
        let k = used.entry(w).or_insert(0);
        if let Some(&j) = positions.get(w).and_then(|p| p.get(*k)) {
            ranks.push(j);
        }
        *k += 1;
    }
    ranks
}

/// Sentence RIBES in [0, 1].
pub fn sentence_ribes<T: Eq + Hash>(h: &[T], r: &[T]) -> f64 {
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let ranks = aligned_ranks(h, r);
    let n = ranks.len();
    if n < 2 {
        return 0.0;
    }
    let mut ascending = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if ranks[i] < ranks[j] {
                ascending += 1;
            }
        }
    }
    let nkt = ascending as f64 / (n * (n - 1) / 2) as f64;
    let p = n as f64 / h.len() as f64;
    let bp = (1.0 - r.len() as f64 / h.len() as f64).min(0.0).exp();
    nkt * p.powf(RIBES_ALPHA) * bp.powf(RIBES_BETA)
}

/// Mean sentence RIBES on a 0–100 scale.
pub fn ribes<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let s: f64 = hyps.iter().zip(refs).map(|(h, r)| sentence_ribes(h, r)).sum();
    Ok(100.0 * s / hyps.len() as f64)
}

/// Share of tokens that repeat their immediate predecessor.
pub fn dup_ratio<T: PartialEq>(hyps: &[Vec<T>]) -> Result<f64> {
    let total: usize = hyps.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::contract("dup ratio of an empty output"));
    }
    let dups: usize = hyps.iter().map(|h| h.windows(2).filter(|w| w[0] == w[1]).count()).sum();
    Ok(dups as f64 / total as f64)
}

/// Reference tokens not covered by the hypothesis, counted per type.
pub fn mis_ratio<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::contract("mis ratio against empty references"));
    }
    let mut missing = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let hc = ngram_counts(h, 1);
        for (w, k) in ngram_counts(r, 1) {
            missing += k.saturating_sub(hc.get(w).copied().unwrap_or(0));
        }
    }
    Ok(missing as f64 / total as f64)
}

/// `100 · (system − baseline) / baseline`; `None` for a zero baseline.
pub fn relative_increment(system: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (system - baseline) / baseline)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub system: String,
    pub sentences: usize,
    pub bleu: f64,
    pub ribes: f64,
    pub dup_ratio: f64,
    pub mis_ratio: f64,
    pub dup_increment: Option<f64>,
    pub mis_increment: Option<f64>,
    pub passes: Option<PassCounts>,
}

impl MetricReport {
    pub fn compute<T: Eq + Hash>(system: &str, hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<Self> {
        Ok(MetricReport {
            system: system.to_string(),
            sentences: hyps.len(),
            bleu: corpus_bleu(hyps, refs)?,
            ribes: ribes(hyps, refs)?,
            dup_ratio: dup_ratio(hyps).unwrap_or(0.0),
            mis_ratio: mis_ratio(hyps, refs)?,
            ..Default::default()
        })
    }

    /// Adds Dup/Mis increments relative to `baseline`.
    pub fn with_baseline(mut self, baseline: &MetricReport) -> Self {
        self.dup_increment = relative_increment(self.dup_ratio, baseline.dup_ratio);
        self.mis_increment = relative_increment(self.mis_ratio, baseline.mis_ratio);
        self
    }

    pub fn with_passes(mut self, results: &[DecodeResult]) -> Self {
        let mut p = PassCounts::default();
        for r in results {
            p += r.passes;
        }
        self.passes = Some(p);
        self
    }

    /// One `key=value` record per line.
    pub fn to_records(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "system={}\nsentences={}\nbleu={:.4}\nribes={:.4}\ndup_ratio={:.6}\nmis_ratio={:.6}\ndup_increment={}\nmis_increment={}\n",
            self.system,
            self.sentences,
            self.bleu,
            self.ribes,
            self.dup_ratio,
            self.mis_ratio,
            opt(self.dup_increment),
            opt(self.mis_increment)
        );
        if let Some(p) = self.passes {
            let _ = write!(
                s,
                "encoder_passes={}\nreorder_passes={}\ndecoder_passes={}\neos_passes={}\n",
                p.encoder, p.reorder, p.decoder, p.eos
            );
        }
        s
    }

    pub fn from_records(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad report record {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Data(format!("report lacks {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Data(format!("bad {k} in report"))) };
        let opt = |k: &str| -> Result<Option<f64>> {
            match map.get(k).map(String::as_str) {
                None | Some("n/a") => Ok(None),
                Some(_) => num(k).map(Some),
            }
        };
        let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Data(format!("bad {k} in report"))) };
        let passes = if map.contains_key("decoder_passes") {
            Some(PassCounts {
                encoder: count("encoder_passes")?,
                reorder: count("reorder_passes")?,
                decoder: count("decoder_passes")?,
                eos: count("eos_passes")?,
            })
        } else {
            None
        };
        Ok(MetricReport {
            system: get("system")?.clone(),
            sentences: count("sentences")?,
            bleu: num("bleu")?,
            ribes: num("ribes")?,
            dup_ratio: num("dup_ratio")?,
            mis_ratio: num("mis_ratio")?,
            dup_increment: opt("dup_increment")?,
            mis_increment: opt("mis_increment")?,
            passes,
        })
    }
}

/// Metric definitions printed above report tables.
pub const REPORT_HEADER: &str = "# dup = tokens equal to their predecessor / tokens; \
mis = sum over types of max(0, ref count - hyp count) / reference tokens; \
increments are relative to the baseline, in percent";

/// Fixed-width comparison table of several reports.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    let _ = writeln!(
        s,
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>10}",
        "system", "BLEU", "RIBES", "Dup", "Mis", "Dup inc", "Mis inc", "dec passes"
    );
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.1}%"));
    for r in reports {
        let _ = writeln!(
            s,
            "{:<14} {:>8.2} {:>8.2} {:>8.4} {:>8.4} {:>9} {:>9} {:>10}",
            r.system,
            r.bleu,
            r.ribes,
            r.dup_ratio,
            r.mis_ratio,
            opt(r.dup_increment),
            opt(r.mis_increment),
            r.passes.map_or("-".to_string(), |p| p.decoder.to_string())
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub system: String,
    pub passes: PassCounts,
    /// Baseline decoder passes over this system's decoder passes.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub sentences: usize,
    pub rows: Vec<LatencyRow>,
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "system\tencoder\treorder\tdecoder\teos\tspeedup")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{:.3}",
                r.system, r.passes.encoder, r.passes.reorder, r.passes.decoder, r.passes.eos, r.speedup
            )?;
        }
        Ok(())
    }
}

/// Pass totals per system and decoder-pass speedups relative to `baseline`
/// (normally the autoregressive teacher).
pub fn latency_report(systems: &[(&str, &[DecodeResult])], baseline: &str) -> Result<LatencyReport> {
    let n = systems
        .first()
        .map(|s| s.1.len())
        .ok_or_else(|| Error::contract("latency report without systems"))?;
    if let Some((name, r)) = systems.iter().find(|s| s.1.len() != n) {
        return Err(Error::contract(format!("{name} decoded {} sentences, expected {n}", r.len())));
    }
    let totals: Vec<PassCounts> = systems
        .iter()
        .map(|(_, rs)| {
            let mut p = PassCounts::default();
            for r in rs.iter() {
                p += r.passes;
            }
            p
        })
        .collect();
    let base = systems
        .iter()
        .position(|s| s.0 == baseline)
        .ok_or_else(|| Error::contract(format!("baseline {baseline} is not among the systems")))?;
    let base_dec = totals[base].decoder as f64;
    Ok(LatencyReport {
        sentences: n,
        rows: systems
            .iter()
            .zip(&totals)
            .map(|((name, _), p)| LatencyRow {
                system: name.to_string(),
                passes: *p,
                speedup: base_dec / p.decoder.max(1) as f64,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| toks(l)).collect()
    }

    #[test]
    fn bleu_examples() {
        let r = corpus(&["a b c d e", "f g h i"]);
        assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        let b = corpus_bleu(&corpus(&["a b c"]), &corpus(&["a b c d"])).unwrap();
        assert!((b - 100.0 * (-1.0f64 / 3.0).exp()).abs() < 1e-9);
        assert_eq!(format!("{b:.2}"), "71.65");
        assert_eq!(corpus_bleu(&corpus(&["a a a a"]), &corpus(&["a b c d"])).unwrap(), 0.0);
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
        assert!(corpus_bleu(&r, &r[..1]).is_err());
    }

    #[test]
    fn bleu_against_hand_counts() {
        // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3
        let h = corpus(&["the cat sat on a mat"]);
        let r = corpus(&["the cat sat on the mat"]);
        let want = 100.0 * ((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0f64)).powf(0.25);
        assert!((corpus_bleu(&h, &r).unwrap() - want).abs() < 1e-9);
        // p1 = 6/7, p2 = 4/6, p3 = 2/5, p4 = 1/4, r = c
        let h = corpus(&["the cat sat on a big mat"]);
        let r = corpus(&["the cat sat on the big mat"]);
        let want = 100.0 * ((6.0 / 7.0) * (4.0 / 6.0) * (2.0 / 5.0) * (1.0 / 4.0f64)).powf(0.25);
        assert!((corpus_bleu(&h, &r).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ribes_examples() {
        let r = corpus(&["a b c d"]);
        assert!((ribes(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(ribes(&corpus(&["d c b a"]), &r).unwrap(), 0.0);
        let s = ribes(&corpus(&["b a c d"]), &r).unwrap();
        assert!((s - 250.0 / 3.0).abs() < 1e-9);
        assert_eq!(ribes(&corpus(&["a x y"]), &r).unwrap(), 0.0);
    }

    #[test]
    fn ribes_duplicates_align_in_order() {
        assert_eq!(aligned_ranks(&toks("a b a"), &toks("a a b")), vec![0, 2, 1]);
        assert_eq!(aligned_ranks(&toks("a a a"), &toks("a b")), vec![0]);
    }

    #[test]
    fn dup_and_mis_examples() {
        assert!((dup_ratio(&corpus(&["a a b"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dup_ratio(&corpus(&["a b a"])).unwrap(), 0.0);
        assert!((dup_ratio(&corpus(&["a a a"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let r = corpus(&["a b c"]);
        assert_eq!(mis_ratio(&r, &r).unwrap(), 0.0);
        assert!((mis_ratio(&corpus(&["a b"]), &r).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mis_ratio(&corpus(&["a"]), &corpus(&["a a"])).unwrap(), 0.5);
    }

    #[test]
    fn increments() {
        assert_eq!(relative_increment(0.02, 0.02), Some(0.0));
        assert!((relative_increment(0.03, 0.02).unwrap() - 50.0).abs() < 1e-9);
        assert!((relative_increment(0.01, 0.02).unwrap() + 50.0).abs() < 1e-9);
        assert_eq!(relative_increment(0.01, 0.0), None);
    }

    #[test]
    fn report_records_round_trip() {
        let h = corpus(&["a b b", "c d"]);
        let r = corpus(&["a b c", "c d"]);
        let base = MetricReport::compute("teacher", &r, &r).unwrap();
        let mut rep = MetricReport::compute("nat", &h, &r).unwrap().with_baseline(&base);
        assert_eq!(rep.dup_increment, None);
        rep.passes = Some(PassCounts {
            encoder: 2,
            reorder: 2,
            decoder: 2,
            eos: 0,
        });
        let back = MetricReport::from_records(&rep.to_records()).unwrap();
        assert_eq!(back.system, "nat");
        assert_eq!(back.passes, rep.passes);
        assert!((back.bleu - rep.bleu).abs() < 1e-4);
        assert!(render_table(&[rep, back]).lines().count() == 4);
    }
}
