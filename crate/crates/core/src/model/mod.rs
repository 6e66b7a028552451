//! Attention-based prototypical network with label-guided support attention.
//!
//! Support side: CNN encoder, token attention (optionally gated by
//! label–word cosine), weighted instance representations, mean prototypes.
//! Query side: one prototype-probed attention read-out per class, scored by
//! softmax over negative Euclidean distances.

mod checkpoint;
pub mod ops;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use ops::{
    aggregate_prototype, base_attention, gated_attention, instance_representation,
    label_similarity, predict, query_representation, score_query, threshold_for,
};

use crate::autodiff::{Rng, Tape, Tensor, Var};
use crate::embeddings::{build_label_embedding, tokenize, EmbeddingTable, LabelEmbedding};
use crate::episodes::{Corpus, Episode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub max_len: usize,
    /// Gate support attention with label–word similarity.
    pub use_las: bool,
    /// Also gate the query-side attention (off: queries attend by prototype only).
    pub las_on_queries: bool,
    /// Train the word vectors instead of keeping them fixed.
    pub train_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            hidden: 50,
            window: 3,
            max_len: 64,
            use_las: true,
            las_on_queries: false,
            train_embeddings: false,
            init_std: 0.1,
        }
    }
}

/// Every trainable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[window × dim × hidden]`
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    /// `[hidden × hidden]`
    pub att_w: Tensor,
    pub att_v: Tensor,
    /// `[1 × 2]`: weights of (label similarity, attention logit).
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    /// Encoder input for out-of-vocabulary words.
    pub unk: Tensor,
    /// Trainable copy of the word vectors when they are not frozen.
    pub embeddings: Option<Tensor>,
}

pub(crate) const PARAM_NAMES: [&str; 8] = [
    "conv.weight",
    "conv.bias",
    "attention.w",
    "attention.v",
    "gate.w",
    "gate.b",
    "unk",
    "embeddings",
];

impl ModelParams {
    /// Draws every parameter from N(0, init_std²), in a fixed order.
    pub fn init(config: &ModelConfig, table: &EmbeddingTable, rng: &mut Rng) -> Result<Self> {
        if config.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution window must be odd, got {}",
                config.window
            )));
        }
        if config.dim != table.dim() {
            return Err(Error::Config(format!(
                "model dim {} does not match embedding dim {}",
                config.dim,
                table.dim()
            )));
        }
        let (d, h, s) = (config.dim, config.hidden, config.init_std);
        let p = |shape: Vec<usize>, rng: &mut Rng| Tensor::randn(shape, s, rng).with_requires_grad(true);
        Ok(Self {
            conv_w: p(vec![config.window, d, h], rng),
            conv_b: p(vec![h], rng),
            att_w: p(vec![h, h], rng),
            att_v: p(vec![h], rng),
            gate_w: p(vec![1, 2], rng),
            gate_b: p(vec![1], rng),
            unk: p(vec![d], rng),
            embeddings: config
                .train_embeddings
                .then(|| table.matrix().clone().with_requires_grad(true)),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<(&'static str, &Tensor)> = PARAM_NAMES
            .iter()
            .zip([
                &self.conv_w,
                &self.conv_b,
                &self.att_w,
                &self.att_v,
                &self.gate_w,
                &self.gate_b,
                &self.unk,
            ])
            .map(|(n, t)| (*n, t))
            .collect();
        if let Some(e) = &self.embeddings {
            v.push((PARAM_NAMES[7], e));
        }
        v
    }

    /// Mutable views in the fixed optimizer order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.att_w,
            &mut self.att_v,
            &mut self.gate_w,
            &mut self.gate_b,
            &mut self.unk,
        ];
        if let Some(e) = self.embeddings.as_mut() {
            v.push(e);
        }
        v
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub conv_w: Var,
    pub conv_b: Var,
    pub att_w: Var,
    pub att_v: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub unk: Var,
}

/// A tokenized sentence ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInstance {
    pub tokens: Vec<String>,
    /// Vocabulary row of each token, `None` when out of vocabulary.
    pub ids: Vec<Option<usize>>,
}

impl TokenizedInstance {
    pub fn new(text: &str, table: &EmbeddingTable, max_len: usize) -> Self {
        let mut tokens = tokenize(text);
        tokens.truncate(max_len);
        let ids = tokens.iter().map(|t| table.index(t)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Encoder output for one sentence.
#[derive(Debug, Clone)]
pub struct EncodedInstance {
    /// Contextual rows `[l × hidden]`.
    pub h: Var,
    /// Encoder input rows `[l × dim]`.
    pub e: Var,
    /// Pretrained word vectors with zero rows for unknown words and padding;
    /// used for label similarity.
    pub words: Tensor,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

/// Word-vector source for one forward pass: the vocabulary rows it touches
/// followed by the unknown-word row.
struct Lookup {
    source: Var,
    local: HashMap<usize, usize>,
    unk_row: usize,
    /// Trainable leaf holding the touched rows, with their vocabulary ids.
    trainable: Option<(Var, Vec<usize>)>,
}

/// Everything a forward pass over one episode produces.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    /// `[M × N]` class scores of the kept queries.
    pub scores: Var,
    /// `[M × N]` gold labels of the kept queries.
    pub gold: Tensor,
    /// Corpus ids of the kept queries, in score-row order.
    pub query_ids: Vec<usize>,
    pub prototypes: Vec<Var>,
    /// Instance representations, class-major.
    pub support_reps: Vec<Var>,
    /// Episode class id of each entry of `support_reps`.
    pub support_labels: Vec<usize>,
    /// Attention distribution used for every support instance, `[n][k][token]`.
    pub support_attention: Vec<Vec<Vec<f64>>>,
    /// Tokens of every support instance, `[n][k][token]`.
    pub support_tokens: Vec<Vec<Vec<String>>>,
    pub labels: Vec<LabelEmbedding>,
    trainable_rows: Option<(Var, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, table: &EmbeddingTable, rng: &mut Rng) -> Result<Self> {
        let params = ModelParams::init(&config, table, rng)?;
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let p = &self.params;
        Bound {
            conv_w: tape.param(&p.conv_w),
            conv_b: tape.param(&p.conv_b),
            att_w: tape.param(&p.att_w),
            att_v: tape.param(&p.att_v),
            gate_w: tape.param(&p.gate_w),
            gate_b: tape.param(&p.gate_b),
            unk: tape.param(&p.unk),
        }
    }

    fn lookup<'a>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        table: &EmbeddingTable,
        instances: impl Iterator<Item = &'a TokenizedInstance>,
    ) -> Result<Lookup> {
        let dim = self.config.dim;
        let mut local = HashMap::new();
        let mut order = Vec::new();
        for inst in instances {
            for id in inst.ids.iter().flatten() {
                local.entry(*id).or_insert_with(|| {
                    order.push(*id);
                    order.len() - 1
                });
            }
        }
        let mut data = Vec::with_capacity(order.len() * dim);
        let rows_of = |m: &Tensor, i: usize| m.data()[i * dim..(i + 1) * dim].to_vec();
        for &id in &order {
            match &self.params.embeddings {
                Some(m) => data.extend(rows_of(m, id)),
                None => data.extend_from_slice(table.row(id)),
            }
        }
        let unk = tape.reshape(bound.unk, vec![1, dim])?;
        let (source, trainable) = if order.is_empty() {
            (unk, None)
        } else {
            let rows = Tensor::matrix(order.len(), dim, data)?;
            let leaf = if self.params.embeddings.is_some() {
                tape.leaf(rows.with_requires_grad(true))
            } else {
                tape.constant(rows)
            };
            let src = tape.concat(&[leaf, unk], 0)?;
            let trainable = self.params.embeddings.is_some().then(|| (leaf, order.clone()));
            (src, trainable)
        };
        Ok(Lookup {
            source,
            unk_row: local.len(),
            local,
            trainable,
        })
    }

    fn encode_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        lookup: &Lookup,
        table: &EmbeddingTable,
        inst: &TokenizedInstance,
        pad_to: Option<usize>,
    ) -> Result<EncodedInstance> {
        if inst.is_empty() {
            return Err(Error::Instance("sentence has no tokens".into()));
        }
        let dim = self.config.dim;
        let rows: Vec<usize> = inst
            .ids
            .iter()
            .map(|id| id.map_or(lookup.unk_row, |i| lookup.local[&i]))
            .collect();
        let mut e = tape.gather_rows(lookup.source, &rows)?;
        let l = inst.len();
        let total = pad_to.unwrap_or(l).max(l);
        if total > l {
            let pad = tape.constant(Tensor::zeros(vec![total - l, dim]));
            e = tape.concat(&[e, pad], 0)?;
        }
        let mut words = Vec::with_capacity(total * dim);
        for id in &inst.ids {
            match id {
                Some(i) => words.extend_from_slice(table.row(*i)),
                None => words.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        words.resize(total * dim, 0.0);
        let conv = tape.conv1d_same(e, bound.conv_w, bound.conv_b)?;
        let h = tape.relu(conv);
        let mut mask = vec![true; l];
        mask.resize(total, false);
        Ok(EncodedInstance {
            h,
            e,
            words: Tensor::matrix(total, dim, words)?,
            mask,
        })
    }

    /// Encodes one sentence, optionally zero-padded to `pad_to` positions.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        table: &EmbeddingTable,
        inst: &TokenizedInstance,
        pad_to: Option<usize>,
    ) -> Result<EncodedInstance> {
        let lookup = self.lookup(tape, bound, table, std::iter::once(inst))?;
        self.encode_with(tape, bound, &lookup, table, inst, pad_to)
    }

    /// Support-side attention for one encoded instance: label-gated when LAS
    /// is on, plain additive attention otherwise.
    pub fn support_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: &EncodedInstance,
        label: &LabelEmbedding,
        use_las: bool,
    ) -> Result<Var> {
        let scores = ops::attention_scores(tape, enc.h, bound.att_w, bound.att_v)?;
        if use_las {
            let alpha = label_similarity(&enc.words, &enc.mask, label.vector.data())?;
            let alpha = tape.constant(alpha);
            gated_attention(tape, alpha, scores, &enc.mask, bound.gate_w, bound.gate_b)
        } else {
            tape.softmax(scores, Some(&enc.mask))
        }
    }

    fn query_rep(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: &EncodedInstance,
        prototype: Var,
        label: &LabelEmbedding,
    ) -> Result<Var> {
        if self.config.use_las && self.config.las_on_queries {
            let logits = ops::query_logits(tape, enc.h, prototype)?;
            let alpha = label_similarity(&enc.words, &enc.mask, label.vector.data())?;
            let alpha = tape.constant(alpha);
            let w = gated_attention(tape, alpha, logits, &enc.mask, bound.gate_w, bound.gate_b)?;
            instance_representation(tape, enc.h, w)
        } else {
            query_representation(tape, enc.h, &enc.mask, prototype)
        }
    }

    /// Runs the network over one episode. Sentences that tokenize to nothing
    /// are skipped with a warning; a class left without support is an error.
    pub fn forward_episode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        episode: &Episode,
        corpus: &Corpus,
        table: &EmbeddingTable,
    ) -> Result<EpisodeForward> {
        let n_way = episode.n_way();
        let max_len = self.config.max_len;
        let labels = episode
            .classes
            .iter()
            .map(|c| build_label_embedding(c, table))
            .collect::<Result<Vec<_>>>()?;

        let tok = |id: usize| TokenizedInstance::new(&corpus.instance(id).text, table, max_len);
        let support_tok: Vec<Vec<(usize, TokenizedInstance)>> = episode
            .support
            .iter()
            .map(|ids| ids.iter().map(|&id| (id, tok(id))).collect())
            .collect();
        let query_tok: Vec<(usize, usize, TokenizedInstance)> = episode
            .queries
            .iter()
            .enumerate()
            .map(|(qi, q)| (qi, q.instance, tok(q.instance)))
            .collect();
        let lookup = self.lookup(
            tape,
            bound,
            table,
            support_tok
                .iter()
                .flatten()
                .map(|(_, t)| t)
                .chain(query_tok.iter().map(|(_, _, t)| t)),
        )?;

        let mut prototypes = Vec::with_capacity(n_way);
        let mut support_reps = Vec::new();
        let mut support_labels = Vec::new();
        let mut support_attention = Vec::with_capacity(n_way);
        let mut support_tokens = Vec::with_capacity(n_way);
        for (n, class_support) in support_tok.iter().enumerate() {
            let mut reps = Vec::new();
            let mut atts = Vec::new();
            let mut toks = Vec::new();
            for (id, inst) in class_support {
                if inst.is_empty() {
                    log::warn!("support instance {id} has no tokens; skipped");
                    continue;
                }
                let enc = self.encode_with(tape, bound, &lookup, table, inst, None)?;
                let w = self.support_attention(tape, bound, &enc, &labels[n], self.config.use_las)?;
                atts.push(tape.value(w).data().to_vec());
                toks.push(inst.tokens.clone());
                reps.push(instance_representation(tape, enc.h, w)?);
            }
            if reps.is_empty() {
                return Err(Error::Instance(format!(
                    "class {:?} has no usable support instances",
                    episode.classes[n]
                )));
            }
            prototypes.push(aggregate_prototype(tape, &reps)?);
            support_labels.extend(std::iter::repeat_n(n, reps.len()));
            support_reps.extend(reps);
            support_attention.push(atts);
            support_tokens.push(toks);
        }

        let mut rows = Vec::with_capacity(query_tok.len());
        let mut gold = Vec::with_capacity(query_tok.len() * n_way);
        let mut query_ids = Vec::with_capacity(query_tok.len());
        for (qi, id, inst) in &query_tok {
            if inst.is_empty() {
                log::warn!("query instance {id} has no tokens; skipped");
                continue;
            }
            let enc = self.encode_with(tape, bound, &lookup, table, inst, None)?;
            let reps = prototypes
                .iter()
                .zip(&labels)
                .map(|(&p, l)| self.query_rep(tape, bound, &enc, p, l))
                .collect::<Result<Vec<_>>>()?;
            rows.push(score_query(tape, &prototypes, &reps)?);
            gold.extend(
                episode.queries[*qi]
                    .labels
                    .iter()
                    .map(|&b| f64::from(u8::from(b))),
            );
            query_ids.push(*id);
        }
        if rows.is_empty() {
            return Err(Error::Instance("episode has no usable queries".into()));
        }
        let scores = tape.stack(&rows)?;
        Ok(EpisodeForward {
            scores,
            gold: Tensor::matrix(rows.len(), n_way, gold)?,
            query_ids,
            prototypes,
            support_reps,
            support_labels,
            support_attention,
            support_tokens,
            labels,
            trainable_rows: lookup.trainable,
        })
    }

    /// Adds the gradients recorded on `tape` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound, fwd: &EpisodeForward) -> Result<()> {
        let p = &mut self.params;
        let pairs: [(&mut Tensor, Var); 7] = [
            (&mut p.conv_w, bound.conv_w),
            (&mut p.conv_b, bound.conv_b),
            (&mut p.att_w, bound.att_w),
            (&mut p.att_v, bound.att_v),
            (&mut p.gate_w, bound.gate_w),
            (&mut p.gate_b, bound.gate_b),
            (&mut p.unk, bound.unk),
        ];
        for (t, v) in pairs {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        if let (Some(emb), Some((leaf, ids))) = (p.embeddings.as_mut(), &fwd.trainable_rows) {
            let dim = self.config.dim;
            if let Some(g) = tape.grad(*leaf) {
                let eg = emb.grad_mut().expect("trainable embeddings carry a grad");
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        eg[id * dim + j] += g[r * dim + j];
                    }
                }
            }
        }
        Ok(())
    }
}
