use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub text: String,
    pub labels: Vec<String>,
}

/// A set of labelled instances indexed by class.
///
/// Stored on disk as JSON Lines: one `{"text": ..., "labels": [...]}` object
/// per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    instances: Vec<Instance>,
    index: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (i, inst) in instances.into_iter().enumerate() {
            corpus.push(inst).map_err(|e| match e {
                Error::Input(msg) => Error::Input(format!("instance {i}: {msg}")),
                e => e,
            })?;
        }
        Ok(corpus)
    }

    fn push(&mut self, mut inst: Instance) -> Result<()> {
        let mut seen = Vec::with_capacity(inst.labels.len());
        for l in inst.labels.drain(..) {
            if l.is_empty() {
                return Err(Error::Input("empty class name".into()));
            }
            if !seen.contains(&l) {
                seen.push(l);
            }
        }
        if seen.is_empty() {
            return Err(Error::Input("instance has no labels".into()));
        }
        inst.labels = seen;
        let id = self.instances.len();
        for l in &inst.labels {
            self.index.entry(l.clone()).or_default().push(id);
        }
        self.instances.push(inst);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), &path.display().to_string())
    }

    /// Parses JSON Lines from `reader`; blank lines are skipped.
    pub fn from_reader(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let parse_err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg,
            };
            let line = line.map_err(|e| parse_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let inst: Instance =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            corpus.push(inst).map_err(|e| Error::Format {
                path: source.to_string(),
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        Ok(corpus)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instances always serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, id: usize) -> &Instance {
        &self.instances[id]
    }

    /// Class names in sorted order.
    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.index.len()
    }

    /// Ids of the instances carrying `class`.
    pub fn instances_of(&self, class: &str) -> &[usize] {
        self.index.get(class).map(Vec::as_slice).unwrap_or(&[])
    }
}
