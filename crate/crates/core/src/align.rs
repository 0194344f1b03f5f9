//! IBM Model 1 word alignment and pseudo-translation construction.
//!
//! Each target word is explained by exactly one source word or by the NULL
//! word. After EM, every target position is linked to its most probable
//! source word; the pseudo-translation is the sequence of linked source
//! words, with the NULL symbol wherever a target word stayed unaligned.

use std::collections::HashMap;
use std::fmt;

use crate::data::vocab::NULL;
use crate::error::{Error, Result};

/// Lexical translation probabilities `t(target | source)`; the NULL word is
/// keyed by the vocabulary's NULL id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranslationTable {
    probs: HashMap<(usize, usize), f64>,
}

impl TranslationTable {
    pub fn prob(&self, source: usize, target: usize) -> f64 {
        self.probs.get(&(source, target)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, source: usize, target: usize, p: f64) {
        self.probs.insert((source, target), p);
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Σ_f t(f|e) for every source word `e` in the table.
    pub fn source_totals(&self) -> HashMap<usize, f64> {
        let mut out = HashMap::new();
        for (&(e, _), &p) in &self.probs {
            *out.entry(e).or_insert(0.0) += p;
        }
        out
    }

    /// Entries in a fixed order, for comparisons and dumps.
    pub fn sorted_entries(&self) -> Vec<((usize, usize), f64)> {
        let mut v: Vec<_> = self.probs.iter().map(|(k, p)| (*k, *p)).collect();
        v.sort_by_key(|e| e.0);
        v
    }
}

/// Result of EM training.
#[derive(Clone, Debug)]
pub struct EmTrace {
    pub table: TranslationTable,
    /// Corpus log-likelihood under the table before each iteration, followed
    /// by the value under the final table (`iterations + 1` entries).
    pub log_likelihood: Vec<f64>,
}

/// Trains IBM Model 1 with a NULL source word by expectation maximization,
/// starting from `t(f|e)` uniform over the targets co-occurring with `e`.
pub fn ibm1_em_train<S: AsRef<[usize]>>(pairs: &[(S, S)], iterations: usize) -> Result<EmTrace> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot train an aligner on an empty corpus"));
    }
    if iterations == 0 {
        return Err(Error::contract("EM needs at least one iteration"));
    }

    let mut cooc: HashMap<usize, Vec<usize>> = HashMap::new();
    for (src, tgt) in pairs {
        for &e in src.as_ref().iter().chain(std::iter::once(&NULL)) {
            cooc.entry(e).or_default().extend_from_slice(tgt.as_ref());
        }
    }
    let mut table = TranslationTable::default();
    for (e, mut fs) in cooc {
        fs.sort_unstable();
        fs.dedup();
        let p = 1.0 / fs.len() as f64;
        for f in fs {
            table.set(e, f, p);
        }
    }

    let mut history = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let mut counts: HashMap<(usize, usize), f64> = HashMap::with_capacity(table.len());
        let mut totals: HashMap<usize, f64> = HashMap::new();
        let mut ll = 0.0;
        let mut srcs = Vec::new();
        for (src, tgt) in pairs {
            srcs.clear();
            srcs.push(NULL);
            srcs.extend_from_slice(src.as_ref());
            for &f in tgt.as_ref() {
                let z: f64 = srcs.iter().map(|&e| table.prob(e, f)).sum();
                ll += (z / srcs.len() as f64).ln();
                for &e in &srcs {
                    let c = table.prob(e, f) / z;
                    *counts.entry((e, f)).or_insert(0.0) += c;
                    *totals.entry(e).or_insert(0.0) += c;
                }
            }
        }
        history.push(ll);
        for (&(e, f), c) in &counts {
            table.set(e, f, c / totals[&e]);
        }
    }
    history.push(log_likelihood(pairs, &table));
    Ok(EmTrace {
        table,
        log_likelihood: history,
    })
}

/// `Σ_pairs Σ_j ln( Σ_i t(y_j|x_i) / (|x| + 1) )` with `x_0 = NULL`.
pub fn log_likelihood<S: AsRef<[usize]>>(pairs: &[(S, S)], table: &TranslationTable) -> f64 {
    let mut ll = 0.0;
    for (src, tgt) in pairs {
        let src = src.as_ref();
        for &f in tgt.as_ref() {
            let z = table.prob(NULL, f) + src.iter().map(|&e| table.prob(e, f)).sum::<f64>();
            ll += (z / (src.len() + 1) as f64).ln();
        }
    }
    ll
}

/// For each target position, the linked source position (or `None`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentLinks(pub Vec<Option<usize>>);

impl AlignmentLinks {
    pub fn target_len(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, target_pos: usize) -> Option<usize> {
        self.0[target_pos]
    }

    /// Parses Pharaoh `i-j` links (source-target, 0-indexed).
    pub fn from_pharaoh(line: &str, target_len: usize) -> Result<Self> {
        let mut links = vec![None; target_len];
        for item in line.split_whitespace() {
            let (i, j) = item
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Data(format!("malformed alignment link {item:?}")))?;
            if j >= target_len {
                return Err(Error::Data(format!(
                    "link {item} points past target length {target_len}"
                )));
            }
            if links[j].is_some() {
                return Err(Error::Data(format!(
                    "target position {j} is linked to more than one source word"
                )));
            }
            links[j] = Some(i);
        }
        Ok(AlignmentLinks(links))
    }
}

/// Pharaoh text: links ordered by target position.
impl fmt::Display for AlignmentLinks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (j, link) in self.0.iter().enumerate() {
            if let Some(i) = link {
                if !first {
                    f.write_str(" ")?;
                }
                write!(f, "{i}-{j}")?;
                first = false;
            }
        }
        Ok(())
    }
}

/// Links each target word to `argmax_i t(y_j|x_i)`; ties go to the smaller
/// source position and NULL wins only when strictly more probable than
/// every source word.
pub fn viterbi_align(source: &[usize], target: &[usize], table: &TranslationTable) -> AlignmentLinks {
    let links = target
        .iter()
        .map(|&f| {
            let mut best: Option<(usize, f64)> = None;
            for (i, &e) in source.iter().enumerate() {
                let p = table.prob(e, f);
                if p > 0.0 && best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((i, p));
                }
            }
            match best {
                Some((i, p)) if p >= table.prob(NULL, f) => Some(i),
                _ => None,
            }
        })
        .collect();
    AlignmentLinks(links)
}

/// `Ẑ_j = X[link(j)]`, or NULL for unaligned target words.
pub fn build_pseudo_translation(source: &[usize], links: &AlignmentLinks) -> Result<Vec<usize>> {
    links
        .0
        .iter()
        .enumerate()
        .map(|(j, link)| match link {
            None => Ok(NULL),
            Some(i) => source.get(*i).copied().ok_or_else(|| {
                Error::contract(format!(
                    "target {j} links to source {i} but the source has {} words",
                    source.len()
                ))
            }),
        })
        .collect()
}
