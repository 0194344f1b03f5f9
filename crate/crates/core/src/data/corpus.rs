use std::io::Write;
use std::path::Path;

use super::vocab::{Vocab, NULL};
use crate::align::AlignmentLinks;
use crate::error::{Error, Result};

/// One parallel pair in id space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Gold pseudo-translation: source words in target order, `|Ẑ| = |Y|`.
    pub pseudo: Option<Vec<usize>>,
    pub links: Option<AlignmentLinks>,
}

impl SentenceExample {
    pub fn new(source: Vec<usize>, target: Vec<usize>) -> Self {
        SentenceExample {
            source,
            target,
            pseudo: None,
            links: None,
        }
    }

    pub fn with_pseudo(mut self, pseudo: Vec<usize>) -> Self {
        self.pseudo = Some(pseudo);
        self
    }

    /// The pseudo-translation, or a data error naming `index`.
    pub fn pseudo_or_err(&self, index: usize) -> Result<&[usize]> {
        let z = self
            .pseudo
            .as_deref()
            .ok_or_else(|| Error::Data(format!("example {index} has no pseudo-translation")))?;
        if z.len() != self.target.len() {
            return Err(Error::Data(format!(
                "example {index}: pseudo-translation has {} tokens, target has {}",
                z.len(),
                self.target.len()
            )));
        }
        if let Some(t) = z.iter().find(|t| **t != NULL && !self.source.contains(t)) {
            return Err(Error::Data(format!(
                "example {index}: pseudo-translation token {t} does not occur in the source"
            )));
        }
        Ok(z)
    }
}

/// Tokenized parallel text as read from line-aligned files.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub source: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
    pub pseudo: Option<Vec<Vec<String>>>,
    pub links: Option<Vec<AlignmentLinks>>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    fn check_columns(&self) -> Result<()> {
        let n = self.source.len();
        let mut cols = vec![("target", self.target.len())];
        if let Some(p) = &self.pseudo {
            cols.push(("pseudo", p.len()));
        }
        if let Some(l) = &self.links {
            cols.push(("alignment", l.len()));
        }
        for (name, len) in cols {
            if len != n {
                return Err(Error::Data(format!("{name} column has {len} lines, source has {n}")));
            }
        }
        Ok(())
    }

    /// Reads `source`/`target` (and optional pseudo and Pharaoh files).
    pub fn read(
        source: impl AsRef<Path>,
        target: impl AsRef<Path>,
        pseudo: Option<&Path>,
        links: Option<&Path>,
    ) -> Result<Self> {
        let source = read_lines(source)?;
        let target = read_lines(target)?;
        let pseudo = pseudo.map(read_lines).transpose()?;
        let links = match links {
            None => None,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let lines: Vec<&str> = text.lines().collect();
                if lines.len() != target.len() {
                    return Err(Error::Data(format!(
                        "{}: {} alignment lines for {} pairs",
                        path.display(),
                        lines.len(),
                        target.len()
                    )));
                }
                Some(
                    lines
                        .iter()
                        .zip(&target)
                        .map(|(l, t)| AlignmentLinks::from_pharaoh(l, t.len()))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        let c = TextCorpus {
            source,
            target,
            pseudo,
            links,
        };
        c.check_columns()?;
        Ok(c)
    }

    /// Encodes with `vocab`; every line must be nonempty and at most `max_len`.
    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Result<Corpus> {
        self.check_columns()?;
        let mut examples = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let mut ex = SentenceExample::new(vocab.encode(&self.source[i]), vocab.encode(&self.target[i]));
            ex.pseudo = self.pseudo.as_ref().map(|p| vocab.encode(&p[i]));
            ex.links = self.links.as_ref().map(|l| l[i].clone());
            examples.push(ex);
        }
        Corpus::new(examples, max_len)
    }

    pub fn all_sentences(&self) -> impl Iterator<Item = &Vec<String>> {
        self.source.iter().chain(&self.target).chain(self.pseudo.iter().flatten())
    }
}

/// Parallel id-space corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<SentenceExample>,
}

impl Corpus {
    pub fn new(examples: Vec<SentenceExample>, max_len: usize) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            for (name, len) in [("source", ex.source.len()), ("target", ex.target.len())] {
                if len == 0 || len > max_len {
                    return Err(Error::Data(format!(
                        "example {i}: {name} length {len} outside 1..={max_len}"
                    )));
                }
            }
            if let Some(z) = &ex.pseudo {
                if z.len() != ex.target.len() {
                    return Err(Error::Data(format!(
                        "example {i}: pseudo-translation length {} differs from target length {}",
                        z.len(),
                        ex.target.len()
                    )));
                }
            }
        }
        Ok(Corpus { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sources(&self) -> Vec<&[usize]> {
        self.examples.iter().map(|e| e.source.as_slice()).collect()
    }

    pub fn targets(&self) -> Vec<&[usize]> {
        self.examples.iter().map(|e| e.target.as_slice()).collect()
    }
}

/// Whitespace-tokenized lines.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

/// One space-joined sentence per line, written atomically.
pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, sentences: &[Vec<S>]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        for (k, t) in s.iter().enumerate() {
            if k > 0 {
                text.push(' ');
            }
            text.push_str(t.as_ref());
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
