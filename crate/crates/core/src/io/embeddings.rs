//! Word-embedding tables in the plain text format: one `word v1 ... vn`
//! per line, space separated.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
    unk: Vec<f64>,
}

/// Lowercases and strips leading/trailing punctuation.
pub fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '<' && c != '>' && c != '_')
        .to_lowercase()
}

/// Whitespace tokenization followed by [`normalize_word`]; empty results
/// are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

impl EmbeddingTable {
    /// Builds a table; the unknown-word vector is the mean of all rows.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        Self::build(rows, Path::new("<memory>"), None)
    }

    fn build(
        rows: Vec<(String, Vec<f64>)>,
        path: &Path,
        line_numbers: Option<&[usize]>,
    ) -> Result<Self> {
        let line_of = |i: usize| line_numbers.map_or(i + 1, |l| l[i]);
        let parse_err = |i: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_of(i),
            reason,
        };
        let dim = match rows.first() {
            Some((_, v)) => v.len(),
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    reason: "empty vocabulary".into(),
                })
            }
        };
        if dim == 0 {
            return Err(parse_err(0, "zero-dimensional embedding".into()));
        }
        let mut vocab = HashMap::with_capacity(rows.len());
        let mut words = Vec::with_capacity(rows.len());
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        let mut sum = vec![0.0; dim];
        for (i, (word, vec)) in rows.into_iter().enumerate() {
            if vec.len() != dim {
                return Err(parse_err(
                    i,
                    format!("row has {} components, expected {dim}", vec.len()),
                ));
            }
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(parse_err(i, "non-finite component".into()));
            }
            if vocab.insert(word.clone(), words.len()).is_some() {
                return Err(parse_err(i, format!("duplicate word {word:?}")));
            }
            for (s, x) in sum.iter_mut().zip(&vec) {
                *s += x;
            }
            matrix.extend(vec);
            words.push(word);
        }
        let n = words.len() as f64;
        let unk = sum.into_iter().map(|s| s / n).collect();
        Ok(EmbeddingTable {
            vocab,
            words,
            dim,
            matrix,
            unk,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> &[f64] {
        &self.unk
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.vocab
            .get(word)
            .or_else(|| self.vocab.get(&normalize_word(word)))
            .copied()
    }

    /// Vector for `word`, trying the exact form, then the normalized form,
    /// then falling back to the mean vector.
    pub fn lookup(&self, word: &str) -> &[f64] {
        match self.index_of(word) {
            Some(i) => self.row(i),
            None => &self.unk,
        }
    }

    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        for (i, word) in self.words.iter().enumerate() {
            write!(w, "{word}")?;
            for x in self.row(i) {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    read_embeddings(reader, path)
}

pub fn read_embeddings(reader: impl BufRead, path: &Path) -> Result<EmbeddingTable> {
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let vec = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: PathBuf::from(path),
                line: i + 1,
                reason: e.to_string(),
            })?;
        rows.push((word.to_string(), vec));
        lines.push(i + 1);
    }
    EmbeddingTable::build(rows, path, Some(&lines))
}
