//! Vocabulary, corpora, synthetic reordering tasks and batching.

pub mod batch;
pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use batch::{Batch, BatchIter, Padded};
pub use corpus::{read_lines, write_atomic, write_lines, Corpus, SentenceExample, TextCorpus};
pub use synthetic::{gen_synthetic, Ambiguity, ReorderRule, SyntheticCorpus, SyntheticTaskSpec, TokenMap};
pub use vocab::Vocab;
