//! Synthetic aspect corpora with controllable label noise.
//!
//! Every class `c` is named `topic<g>_aspect<c>`, so its label embedding is
//! the mean of a topic word and an aspect word. The generator places vectors
//! so that:
//!
//! * a class's keyword tokens sit at cosine `keyword_strength` from its
//!   label embedding;
//! * noise tokens (`the`, `a`, `my`, ... then `noise<j>`) are random
//!   directions shared by every class;
//! * classes of one similarity group share a topic word and have label
//!   embeddings with pairwise cosine `1 / (1 + LABEL_SPREAD²)` ≈ 0.917;
//! * other classes get a private topic word, hence near-orthogonal labels.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Instance};
use crate::autodiff::Rng;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

/// Norm of the class-specific offset added to a shared topic direction.
pub const LABEL_SPREAD: f64 = 0.3;

const COMMON_WORDS: &[&str] = &[
    "the", "a", "my", "and", "was", "is", "of", "to", "it", "in", "for", "we", "i", "this", "that",
    "with", "but", "very", "so", "they",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub instances_per_class: usize,
    /// Cosine between each keyword vector and its class label embedding.
    pub keyword_strength: f64,
    /// Number of distinct noise tokens; zero disables noise entirely.
    pub noise_vocab_size: usize,
    /// Share of each sentence's tokens drawn from the noise vocabulary.
    pub noise_fraction: f64,
    /// Number of groups of classes with near-parallel label embeddings.
    pub similarity_groups: usize,
    pub group_size: usize,
    pub keywords_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an instance also carries a second class.
    pub multi_label_fraction: f64,
    pub dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 20,
            instances_per_class: 40,
            keyword_strength: 1.0,
            noise_vocab_size: 0,
            noise_fraction: 0.0,
            similarity_groups: 0,
            group_size: 2,
            keywords_per_class: 4,
            min_len: 6,
            max_len: 12,
            multi_label_fraction: 0.1,
            dim: 50,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self, n_classes: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if n_classes == 0 || self.instances_per_class == 0 || self.keywords_per_class == 0 {
            return bad("class, instance and keyword counts must be positive");
        }
        if self.dim < self.group_size + 2 {
            return bad("dim too small for the similarity groups");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 0 < min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.keyword_strength)
            || !(0.0..1.0).contains(&self.noise_fraction)
            || !(0.0..=1.0).contains(&self.multi_label_fraction)
        {
            return bad("strength and fractions must lie in [0, 1]");
        }
        if self.similarity_groups * self.group_size > n_classes {
            return bad("similarity groups need more classes than exist");
        }
        Ok(())
    }
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to every vector in `basis` (which must be
/// orthonormal).
fn orthogonal_unit(dim: usize, basis: &[Vec<f64>], rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut v = random_unit(dim, rng);
        for b in basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Builder<'a> {
    spec: &'a SyntheticSpec,
    rows: Vec<(String, Vec<f64>)>,
    noise_words: Vec<String>,
    next_class: usize,
    next_topic: usize,
}

struct ClassWords {
    name: String,
    keywords: Vec<String>,
}

impl<'a> Builder<'a> {
    fn new(spec: &'a SyntheticSpec, rng: &mut Rng) -> Self {
        let mut b = Self {
            spec,
            rows: Vec::new(),
            noise_words: Vec::new(),
            next_class: 0,
            next_topic: 0,
        };
        for j in 0..spec.noise_vocab_size {
            let word = COMMON_WORDS
                .get(j)
                .map(|w| w.to_string())
                .unwrap_or_else(|| format!("noise{j}"));
            let v = random_unit(spec.dim, rng);
            b.rows.push((word.clone(), v));
            b.noise_words.push(word);
        }
        b
    }

    /// Adds `n_classes` classes with fresh vocabulary and returns their words.
    fn add_classes(&mut self, n_classes: usize, rng: &mut Rng) -> Vec<ClassWords> {
        let dim = self.spec.dim;
        let grouped = self.spec.similarity_groups * self.spec.group_size;
        let mut out = Vec::with_capacity(n_classes);
        let mut group_basis: Vec<Vec<f64>> = Vec::new();
        let mut topic = (String::new(), Vec::new());
        for local in 0..n_classes {
            let starts_group = local < grouped && local % self.spec.group_size == 0;
            if local >= grouped || starts_group {
                let dir = random_unit(dim, rng);
                topic = (format!("topic{}", self.next_topic), dir.clone());
                self.next_topic += 1;
                self.rows.push(topic.clone());
                group_basis = vec![dir];
            }
            let (topic_word, g) = &topic;
            let offset = orthogonal_unit(dim, &group_basis, rng);
            group_basis.push(offset.clone());

            // Label = (topic + aspect) / 2 = g + LABEL_SPREAD * offset.
            let aspect: Vec<f64> = g
                .iter()
                .zip(&offset)
                .map(|(gi, oi)| gi + 2.0 * LABEL_SPREAD * oi)
                .collect();
            let label: Vec<f64> = g
                .iter()
                .zip(&offset)
                .map(|(gi, oi)| gi + LABEL_SPREAD * oi)
                .collect();
            let ln = label.iter().map(|x| x * x).sum::<f64>().sqrt();
            let label_unit: Vec<f64> = label.iter().map(|x| x / ln).collect();

            let c = self.next_class;
            self.next_class += 1;
            let aspect_word = format!("aspect{c}");
            self.rows.push((aspect_word.clone(), aspect));

            let s = self.spec.keyword_strength;
            let keywords = (0..self.spec.keywords_per_class)
                .map(|j| {
                    let word = format!("kw{c}x{j}");
                    let perp = orthogonal_unit(dim, std::slice::from_ref(&label_unit), rng);
                    let v = label_unit
                        .iter()
                        .zip(&perp)
                        .map(|(l, p)| s * l + (1.0 - s * s).sqrt() * p)
                        .collect();
                    self.rows.push((word.clone(), v));
                    word
                })
                .collect();
            out.push(ClassWords {
                name: format!("{topic_word}_{aspect_word}"),
                keywords,
            });
        }
        out
    }

    fn sentence(&self, classes: &[&ClassWords], rng: &mut Rng) -> String {
        let spec = self.spec;
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let noise = if self.noise_words.is_empty() {
            0
        } else {
            ((spec.noise_fraction * len as f64).round() as usize).min(len.saturating_sub(classes.len()))
        };
        let keywords = (len - noise).max(classes.len());
        let mut tokens: Vec<&str> = Vec::with_capacity(noise + keywords);
        for k in 0..keywords {
            let cw = classes[k % classes.len()];
            tokens.push(&cw.keywords[rng.below(cw.keywords.len())]);
        }
        for _ in 0..noise {
            tokens.push(&self.noise_words[rng.below(self.noise_words.len())]);
        }
        tokens.shuffle(rng);
        let mut text = tokens.join(" ");
        text.push('.');
        text
    }

    fn corpus(&self, classes: &[ClassWords], rng: &mut Rng) -> Result<Corpus> {
        let mut instances = Vec::with_capacity(classes.len() * self.spec.instances_per_class);
        for (i, cw) in classes.iter().enumerate() {
            for _ in 0..self.spec.instances_per_class {
                let mut members = vec![cw];
                if classes.len() > 1 && rng.uniform() < self.spec.multi_label_fraction {
                    let mut j = rng.below(classes.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    members.push(&classes[j]);
                }
                instances.push(Instance {
                    text: self.sentence(&members, rng),
                    labels: members.iter().map(|m| m.name.clone()).collect(),
                });
            }
        }
        Corpus::new(instances)
    }
}

/// Generates one corpus and the word vectors covering its vocabulary.
pub fn make_synthetic_corpus(spec: &SyntheticSpec, rng: &mut Rng) -> Result<(Corpus, EmbeddingTable)> {
    let (mut corpora, table) = make_synthetic_splits(spec, &[spec.n_classes], rng)?;
    Ok((corpora.remove(0), table))
}

/// Generates several corpora with disjoint class sets (e.g. train/dev/test)
/// sharing one vocabulary. `spec.n_classes` is ignored in favour of
/// `class_counts`; similarity groups are formed inside every split.
pub fn make_synthetic_splits(
    spec: &SyntheticSpec,
    class_counts: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<Corpus>, EmbeddingTable)> {
    for &n in class_counts {
        spec.validate(n)?;
    }
    let mut builder = Builder::new(spec, rng);
    let words: Vec<Vec<ClassWords>> = class_counts
        .iter()
        .map(|&n| builder.add_classes(n, rng))
        .collect();
    let corpora = words
        .iter()
        .map(|w| builder.corpus(w, rng))
        .collect::<Result<Vec<_>>>()?;
    let table = EmbeddingTable::from_rows(spec.dim, builder.rows)?;
    Ok((corpora, table))
}

/// Tokens that are keywords of the given class in a synthetic corpus.
pub fn synthetic_keywords(class_name: &str, table_vocab: &[String]) -> Vec<String> {
    let Some(id) = class_name
        .rsplit('_')
        .next()
        .and_then(|a| a.strip_prefix("aspect"))
    else {
        return Vec::new();
    };
    let prefix = format!("kw{id}x");
    table_vocab
        .iter()
        .filter(|w| w.starts_with(&prefix))
        .cloned()
        .collect()
}

/// Whether `token` is a keyword of the synthetic class `class_name`.
pub fn is_synthetic_keyword(class_name: &str, token: &str) -> bool {
    let id = class_name
        .rsplit('_')
        .next()
        .and_then(|a| a.strip_prefix("aspect"));
    match (id, token.strip_prefix("kw")) {
        (Some(id), Some(rest)) => rest
            .split_once('x')
            .is_some_and(|(cid, _)| cid == id),
        _ => false,
    }
}

/// Per-class keyword sets, keyed by class name.
pub fn keyword_index(corpus: &Corpus) -> HashMap<String, Vec<String>> {
    let mut out: HashMap<String, Vec<String>> = HashMap::new();
    for inst in corpus.instances() {
        for tok in crate::embeddings::tokenize(&inst.text) {
            for label in &inst.labels {
                if is_synthetic_keyword(label, &tok) {
                    let e = out.entry(label.clone()).or_default();
                    if !e.contains(&tok) {
                        e.push(tok.clone());
                    }
                }
            }
        }
    }
    out
}
