//! Synthetic parallel corpora whose pseudo-translations are known exactly.
//!
//! Source sentences are drawn over types `w0..w{V-1}`. The target is built by
//! permuting positions with a reorder rule and mapping every word through a
//! bijective dictionary, so the gold pseudo-translation is the permuted
//! source and the gold alignment is the permutation itself.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::TextCorpus;
use crate::align::AlignmentLinks;
use crate::error::{Error, Result};

/// Every `VERB_PERIOD`-th source type counts as a verb for [`ReorderRule::RuleBased`].
pub const VERB_PERIOD: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReorderRule {
    Identity,
    Reverse,
    /// Target position `j` reads source position `(j + k) mod n`.
    Rotate(usize),
    /// `Y = X[h..] ++ X[..h]` with `h = floor(n/2)`.
    SwapHalves,
    /// Verbs move to the end of the sentence; other words keep their order.
    RuleBased,
}

impl ReorderRule {
    /// `perm[j]` is the source position placed at target position `j`.
    /// `types` are the source type indices (only `RuleBased` reads them).
    pub fn permutation(&self, types: &[usize]) -> Vec<usize> {
        let n = types.len();
        match *self {
            ReorderRule::Identity => (0..n).collect(),
            ReorderRule::Reverse => (0..n).rev().collect(),
            ReorderRule::Rotate(k) => (0..n).map(|j| (j + k) % n).collect(),
            ReorderRule::SwapHalves => (0..n).map(|j| (j + n / 2) % n).collect(),
            ReorderRule::RuleBased => {
                let (mut rest, verbs): (Vec<usize>, Vec<usize>) =
                    (0..n).partition(|&i| types[i] % VERB_PERIOD != 0);
                rest.extend(verbs);
                rest
            }
        }
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::Identity => f.write_str("identity"),
            ReorderRule::Reverse => f.write_str("reverse"),
            ReorderRule::Rotate(k) => write!(f, "rotate:{k}"),
            ReorderRule::SwapHalves => f.write_str("swap_halves"),
            ReorderRule::RuleBased => f.write_str("rule_based"),
        }
    }
}

impl FromStr for ReorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => ReorderRule::Identity,
            "reverse" => ReorderRule::Reverse,
            "swap_halves" => ReorderRule::SwapHalves,
            "rule_based" => ReorderRule::RuleBased,
            _ => match s.strip_prefix("rotate:").map(str::parse) {
                Some(Ok(k)) => ReorderRule::Rotate(k),
                _ => return Err(Error::Config(format!("unknown reorder rule {s:?}"))),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMap {
    /// `w_i → w_i`.
    Identity,
    /// `w_i → w_{π(i)}` for a seeded permutation `π`.
    Permuted,
}

/// Source types with a second translation `v_{π(i)}`. A fair coin per
/// sentence selects the mode, shared by every ambiguous word in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ambiguity {
    pub types: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub pairs: usize,
    pub token_map: TokenMap,
    pub rule: ReorderRule,
    /// Reorder rule used in the second mode; `None` keeps `rule` in both.
    pub alt_rule: Option<ReorderRule>,
    pub ambiguity: Option<Ambiguity>,
    /// Sample the words of a sentence without replacement.
    pub distinct: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 64,
            min_len: 4,
            max_len: 10,
            pairs: 1000,
            token_map: TokenMap::Permuted,
            rule: ReorderRule::SwapHalves,
            alt_rule: None,
            ambiguity: None,
            distinct: false,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.pairs == 0 {
            return bad("synthetic task needs a positive vocabulary size and pair count".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.distinct && self.max_len > self.vocab_size {
            return bad(format!(
                "cannot draw {} distinct words from {} types",
                self.max_len, self.vocab_size
            ));
        }
        if let Some(a) = &self.ambiguity {
            if let Some(t) = a.types.iter().find(|t| **t >= self.vocab_size) {
                return bad(format!("ambiguous type {t} outside vocabulary of {}", self.vocab_size));
            }
        }
        Ok(())
    }

    fn two_modes(&self) -> bool {
        self.ambiguity.is_some() || self.alt_rule.is_some()
    }
}

/// Generated text plus the ground truth used to build it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    /// Source, target, gold pseudo-translation and gold alignment columns.
    pub text: TextCorpus,
    /// `π`: source type `i` translates to `w{π(i)}` (or `v{π(i)}` when ambiguous).
    pub dictionary: Vec<usize>,
    pub ambiguous: Vec<bool>,
    /// Per pair: whether the second mode was drawn.
    pub modes: Vec<bool>,
}

pub fn source_word(i: usize) -> String {
    format!("w{i}")
}

pub fn alternate_word(i: usize) -> String {
    format!("v{i}")
}

/// Parses `w{i}` back into its type index.
pub fn source_type(token: &str) -> Option<usize> {
    token.strip_prefix('w')?.parse().ok()
}

impl SyntheticCorpus {
    /// Dictionary translation of one source word in the given mode.
    pub fn translate_word(&self, token: &str, alternate: bool) -> Option<String> {
        let i = source_type(token)?;
        let t = *self.dictionary.get(i)?;
        Some(if alternate && self.ambiguous[i] {
            alternate_word(t)
        } else {
            source_word(t)
        })
    }
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dictionary: Vec<usize> = (0..spec.vocab_size).collect();
    if spec.token_map == TokenMap::Permuted {
        dictionary.shuffle(&mut rng);
    }
    let mut ambiguous = vec![false; spec.vocab_size];
    for &t in spec.ambiguity.iter().flat_map(|a| &a.types) {
        ambiguous[t] = true;
    }

    let mut out = SyntheticCorpus {
        text: TextCorpus {
            pseudo: Some(Vec::with_capacity(spec.pairs)),
            links: Some(Vec::with_capacity(spec.pairs)),
            ..Default::default()
        },
        dictionary,
        ambiguous,
        modes: Vec::with_capacity(spec.pairs),
    };
    let all_types: Vec<usize> = (0..spec.vocab_size).collect();
    for _ in 0..spec.pairs {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let types: Vec<usize> = if spec.distinct {
            all_types.choose_multiple(&mut rng, n).copied().collect()
        } else {
            (0..n).map(|_| rng.gen_range(0..spec.vocab_size)).collect()
        };
        let mode = spec.two_modes() && rng.gen::<bool>();
        let rule = match spec.alt_rule {
            Some(alt) if mode => alt,
            _ => spec.rule,
        };
        let perm = rule.permutation(&types);
        let source: Vec<String> = types.iter().map(|&i| source_word(i)).collect();
        let pseudo: Vec<String> = perm.iter().map(|&i| source[i].clone()).collect();
        let target: Vec<String> = pseudo
            .iter()
            .map(|w| out.translate_word(w, mode).expect("generated words are in the dictionary"))
            .collect();
        out.text.source.push(source);
        out.text.target.push(target);
        out.text.pseudo.as_mut().unwrap().push(pseudo);
        out.text.links.as_mut().unwrap().push(AlignmentLinks(perm.into_iter().map(Some).collect()));
        out.modes.push(mode);
    }
    Ok(out)
}
