use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, SentenceExample};
use super::vocab::PAD;
use crate::error::{Error, Result};

/// Rows of token ids padded with PAD to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Padded {
    pub fn new<S: AsRef<[usize]>>(rows: &[S]) -> Self {
        let width = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r.as_ref());
            ids.extend(std::iter::repeat(PAD).take(width - r.as_ref().len()));
        }
        Padded {
            ids,
            lengths: rows.iter().map(|r| r.as_ref().len()).collect(),
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Unpadded row.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }

    /// `true` at real tokens, `false` at padding.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.ids.len());
        for &len in &self.lengths {
            m.extend((0..self.width).map(|c| c < len));
        }
        m
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// A minibatch with its corpus indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub source: Padded,
    pub target: Padded,
    pub pseudo: Option<Padded>,
}

impl Batch {
    pub fn from_examples(indices: Vec<usize>, examples: &[&SentenceExample]) -> Self {
        let source: Vec<&[usize]> = examples.iter().map(|e| e.source.as_slice()).collect();
        let target: Vec<&[usize]> = examples.iter().map(|e| e.target.as_slice()).collect();
        let pseudo = examples
            .iter()
            .map(|e| e.pseudo.as_deref())
            .collect::<Option<Vec<&[usize]>>>()
            .map(|p| Padded::new(&p));
        Batch {
            indices,
            source: Padded::new(&source),
            target: Padded::new(&target),
            pseudo,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded examples in batch order.
    pub fn examples(&self) -> Vec<SentenceExample> {
        (0..self.len())
            .map(|r| SentenceExample {
                source: self.source.row(r).to_vec(),
                target: self.target.row(r).to_vec(),
                pseudo: self.pseudo.as_ref().map(|p| p.row(r).to_vec()),
                links: None,
            })
            .collect()
    }

    /// Σ|Y| over the batch.
    pub fn target_tokens(&self) -> usize {
        self.target.tokens()
    }
}

/// Seeded per-epoch shuffling into fixed-size batches (the last may be short).
#[derive(Clone, Debug)]
pub struct BatchIter {
    corpus_len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchIter {
    pub fn new(corpus_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || corpus_len == 0 {
            return Err(Error::contract("batching needs a nonempty corpus and a positive batch size"));
        }
        Ok(BatchIter {
            corpus_len,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.corpus_len.div_ceil(self.batch_size)
    }

    /// Index batches for `epoch`; each corpus index appears exactly once.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.corpus_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// The `step`-th batch (1-based) of an endless epoch sequence.
    pub fn indices_for_step(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let k = step - 1;
        self.epoch(k / per).swap_remove((k % per) as usize)
    }

    pub fn batch(&self, corpus: &Corpus, indices: Vec<usize>) -> Batch {
        let ex: Vec<&SentenceExample> = indices.iter().map(|&i| &corpus.examples[i]).collect();
        Batch::from_examples(indices, &ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_batch_max() {
        let p = Padded::new(&[vec![5, 6, 7], vec![8, 9, 10, 11, 12]]);
        assert_eq!(p.width, 5);
        assert_eq!(p.ids[..5], [5, 6, 7, PAD, PAD]);
        assert_eq!(p.mask().iter().filter(|m| !**m).count(), 2);
        assert_eq!(p.row(0), &[5, 6, 7]);
        assert_eq!(p.tokens(), 8);
    }

    #[test]
    fn epochs_cover_the_corpus_once() {
        let it = BatchIter::new(23, 5, 9).unwrap();
        let e0 = it.epoch(0);
        assert_eq!(e0.len(), 5);
        let mut all: Vec<usize> = e0.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(e0, BatchIter::new(23, 5, 9).unwrap().epoch(0));
        assert_ne!(e0, it.epoch(1));
        assert_eq!(it.indices_for_step(1), e0[0]);
        assert_eq!(it.indices_for_step(6), it.epoch(1)[0]);
    }
}
