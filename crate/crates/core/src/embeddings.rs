//! Pretrained word vectors, tokenization and label embeddings.
//!
//! Vectors are read from the GloVe text format: one token per line followed
//! by its whitespace-separated floats. Label embeddings are the mean of the
//! vectors of a class name's underscore-separated words.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Width assumed for a table loaded from an empty file.
pub const DEFAULT_DIM: usize = 50;

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: HashMap<String, usize>,
    matrix: Tensor,
    frozen: bool,
    duplicates: usize,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows. Later duplicates of a token
    /// are dropped and counted.
    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        if dim == 0 {
            return Err(Error::Input("embedding dimension must be positive".into()));
        }
        let mut vocab = HashMap::new();
        let mut data = Vec::new();
        let mut duplicates = 0;
        for (token, row) in rows {
            if row.len() != dim {
                return Err(Error::dim("embedding row", &[dim], &[row.len()]));
            }
            if vocab.contains_key(&token) {
                duplicates += 1;
                continue;
            }
            vocab.insert(token, vocab.len());
            data.extend(row);
        }
        let matrix = Tensor::matrix(vocab.len(), dim, data)?;
        Ok(Self {
            dim,
            vocab,
            matrix,
            frozen: true,
            duplicates,
        })
    }

    pub fn load_vectors(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), &path.display().to_string())
    }

    /// Parses GloVe text from `reader`; `source` names it in errors. The
    /// dimension is fixed by the first non-blank line.
    pub fn from_reader(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut dim = None;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg: e.to_string(),
            })?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        path: source.to_string(),
                        line: lineno,
                        msg: format!("bad float {f:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.is_empty() {
                return Err(Error::Format {
                    path: source.to_string(),
                    line: lineno,
                    msg: format!("token {token:?} has no vector"),
                });
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Format {
                        path: source.to_string(),
                        line: lineno,
                        msg: format!("expected {d} values, found {}", values.len()),
                    })
                }
                Some(_) => {}
            }
            rows.push((token.to_string(), values));
        }
        let table = Self::from_rows(dim.unwrap_or(DEFAULT_DIM), rows)?;
        if table.duplicates > 0 {
            log::warn!(
                "{source}: {} duplicate tokens ignored (first occurrence kept)",
                table.duplicates
            );
        }
        Ok(table)
    }

    /// Writes the table back out in GloVe text format, in row order.
    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut tokens: Vec<(&String, &usize)> = self.vocab.iter().collect();
        tokens.sort_by_key(|(_, &i)| i);
        for (token, &i) in tokens {
            write!(out, "{token}").map_err(|e| Error::io(path, e))?;
            for v in self.row(i) {
                write!(out, " {v}").map_err(|e| Error::io(path, e))?;
            }
            writeln!(out).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.matrix.data()[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.index(token).map(|i| self.row(i))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Lowercases, splits on whitespace and trims ASCII punctuation from both
/// ends of every token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Words of an aspect class name: `food_food_meat_burger` gives
/// `[food, food, meat, burger]`. Repeats are kept.
pub fn label_tokens(class_name: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = class_name
        .split('_')
        .map(|w| w.trim().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(Error::Input(format!(
            "class name {class_name:?} has no words"
        )));
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    pub class_name: String,
    pub vector: Tensor,
    /// In-vocabulary label words, in order, repeats included.
    pub covered_tokens: Vec<String>,
}

impl LabelEmbedding {
    /// True when no label word was in the vocabulary and the vector is zero.
    pub fn is_degenerate(&self) -> bool {
        self.covered_tokens.is_empty()
    }
}

/// Mean of the vectors of the in-vocabulary words of `class_name`. A label
/// with no known words gets the zero vector.
pub fn build_label_embedding(class_name: &str, table: &EmbeddingTable) -> Result<LabelEmbedding> {
    let tokens = label_tokens(class_name)?;
    let mut sum = vec![0.0; table.dim()];
    let mut covered = Vec::new();
    for tok in tokens {
        if let Some(row) = table.lookup(&tok) {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            covered.push(tok);
        }
    }
    if covered.is_empty() {
        log::warn!("label {class_name:?} has no in-vocabulary words; using a zero embedding");
    } else {
        let n = covered.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    Ok(LabelEmbedding {
        class_name: class_name.to_string(),
        vector: Tensor::vector(sum),
        covered_tokens: covered,
    })
}
