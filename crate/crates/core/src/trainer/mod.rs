//! Episodic training with early stopping, evaluation and run bookkeeping.

mod config;
mod runs;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Ablation, TrainConfig};
pub use runs::{build_report, load_runs, RunRecord};

use crate::autodiff::{AdamState, Rng, Tape, Var};
use crate::embeddings::EmbeddingTable;
use crate::episodes::{sample_episode, Corpus, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::losses::{
    label_weights, lcl_loss, mse_loss, scl_loss, total_loss, ContrastiveBatch,
};
use crate::metrics::{aggregate_runs, mean_metrics, EpisodeScores, EvalMetrics, RunSummary};
use crate::model::{threshold_for, Bound, Checkpoint, EpisodeForward, Model};

/// Default evaluation seeds of the five-run protocol.
pub const DEFAULT_SEEDS: [u64; 5] = [5, 10, 15, 20, 25];

// Stream labels for seed derivation.
const INIT: u64 = 0;
const TRAIN: u64 = 1;
const DEV: u64 = 2;
const TEST: u64 = 3;

/// Corpora and word vectors for one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Option<Corpus>,
    pub table: EmbeddingTable,
}

impl TrainData {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("config is missing `{key}`")))
        };
        let table = EmbeddingTable::load_vectors(need(&config.embeddings, "embeddings")?)?;
        let train = Corpus::load(need(&config.train_corpus, "train_corpus")?)?;
        let dev = Corpus::load(need(&config.dev_corpus, "dev_corpus")?)?;
        let test = config.test_corpus.as_ref().map(Corpus::load).transpose()?;
        Ok(Self {
            train,
            dev,
            test,
            table,
        })
    }
}

/// One scored forward pass with its loss node.
pub struct EpisodeLoss {
    pub tape: Tape,
    pub bound: Bound,
    pub forward: EpisodeForward,
    pub mse: Var,
    pub contrastive: Option<Var>,
    pub loss: Var,
}

/// Builds the training objective selected by `config` for one episode.
pub fn episode_loss(
    model: &Model,
    episode: &Episode,
    corpus: &Corpus,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<EpisodeLoss> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let forward = model.forward_episode(&mut tape, &bound, episode, corpus, table)?;
    let mse = mse_loss(&mut tape, forward.scores, &forward.gold)?;
    let contrastive = if config.use_lcl || config.use_scl {
        let batch = ContrastiveBatch {
            reps: forward.support_reps.clone(),
            labels: forward.support_labels.clone(),
            weights: label_weights(&forward.labels),
            tau: config.tau,
            strict_negatives: config.strict_negatives,
        };
        Some(if config.use_lcl {
            lcl_loss(&mut tape, &batch)?
        } else {
            scl_loss(&mut tape, &batch)?
        })
    } else {
        None
    };
    let loss = total_loss(&mut tape, mse, contrastive, config.lambda)?;
    Ok(EpisodeLoss {
        tape,
        bound,
        forward,
        mse,
        contrastive,
        loss,
    })
}

/// Draws `count` episodes from a single seed.
pub fn sample_episodes(
    corpus: &Corpus,
    shape: EpisodeShape,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| sample_episode(corpus, shape, &mut rng)).collect()
}

/// Seed of the dev episodes a run with `seed` evaluates on every epoch.
pub fn dev_episode_seed(seed: u64) -> u64 {
    Rng::derive_seed(seed, &[DEV])
}

/// Seed of the test episodes drawn for evaluation seed `seed`.
pub fn test_episode_seed(seed: u64) -> u64 {
    Rng::derive_seed(seed, &[TEST])
}

/// Seed of training episode `index` of `epoch`.
pub fn train_episode_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    Rng::derive_seed(seed, &[TRAIN, epoch as u64, index as u64])
}

/// Scores every episode, in parallel, keeping episode order.
pub fn score_episodes(
    model: &Model,
    episodes: &[Episode],
    corpus: &Corpus,
    table: &EmbeddingTable,
) -> Result<Vec<EpisodeScores>> {
    episodes
        .par_iter()
        .map(|ep| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let f = model.forward_episode(&mut tape, &bound, ep, corpus, table)?;
            let scores = tape.value(f.scores).data().to_vec();
            let gold = f.gold.data().iter().map(|&g| g == 1.0).collect();
            EpisodeScores::new(ep.n_way(), scores, gold)
        })
        .collect()
}

pub fn evaluate_episodes(
    model: &Model,
    episodes: &[Episode],
    corpus: &Corpus,
    table: &EmbeddingTable,
    threshold: Option<f64>,
) -> Result<EvalMetrics> {
    let n_way = episodes
        .first()
        .map(Episode::n_way)
        .ok_or_else(|| Error::Input("no episodes to evaluate".into()))?;
    let threshold = threshold_for(n_way, threshold)?;
    mean_metrics(&score_episodes(model, episodes, corpus, table)?, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Total loss of every training episode, in order.
    pub losses: Vec<f64>,
    pub mean_loss: f64,
    pub dev: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_dev_auc: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains one model. Each epoch takes one optimizer step per sampled
/// episode, then scores a fixed set of dev episodes; the best-dev-AUC model
/// is kept and training stops after `patience` epochs without improvement.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    let shape = config.shape();
    let table = &data.table;
    let mut init = Rng::new(config.seed).fork(&[INIT]);
    let mut model = Model::new(config.model_config(table.dim()), table, &mut init)?;
    let mut adam = AdamState::new(config.lr);
    let dev_episodes = sample_episodes(&data.dev, shape, config.eval_episodes, dev_episode_seed(config.seed))?;

    let mut best: Option<(Model, f64, usize)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        let mut losses = Vec::with_capacity(config.episodes_per_epoch);
        for i in 0..config.episodes_per_epoch {
            let seed = train_episode_seed(config.seed, epoch, i);
            let episode = sample_episode(&data.train, shape, &mut Rng::new(seed))?;
            let mut step = episode_loss(&model, &episode, &data.train, table, config)?;
            let value = step.tape.scalar(step.loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at epoch {epoch}, step {i} (episode seed {seed})"
                )));
            }
            step.tape.backward(step.loss)?;
            model.accumulate_grads(&step.tape, &step.bound, &step.forward)?;
            adam.step(&mut model.params.tensors_mut())?;
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameters became non-finite at epoch {epoch}, step {i} (episode seed {seed})"
                )));
            }
            losses.push(value);
        }
        let dev = evaluate_episodes(&model, &dev_episodes, &data.dev, table, config.threshold)?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4}, dev AUC {:.4}, dev F1 {:.4}",
            dev.auc,
            dev.macro_f1
        );
        log.push(EpochLog {
            epoch,
            losses,
            mean_loss,
            dev,
        });
        let improved = best.as_ref().is_none_or(|(_, auc, _)| dev.auc > *auc);
        if improved {
            best = Some((model.clone(), dev.auc, epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("no dev improvement for {stale} epochs; stopping");
                break;
            }
        }
    }
    let (best, best_dev_auc, best_epoch) = best.expect("at least one epoch ran");
    let outcome = TrainOutcome {
        best,
        last: model,
        best_dev_auc,
        best_epoch,
        log,
    };
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoints(&outcome, config, dir)?;
    }
    Ok(outcome)
}

pub fn save_checkpoints(outcome: &TrainOutcome, config: &TrainConfig, dir: &Path) -> Result<()> {
    let train = serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for (name, model) in [("best.json", &outcome.best), ("last.json", &outcome.last)] {
        let mut ck = Checkpoint::from_model(model, config.seed)?;
        ck.train = Some(train.clone());
        ck.best_dev_auc = Some(outcome.best_dev_auc);
        ck.best_epoch = Some(outcome.best_epoch);
        ck.save(&dir.join(name))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<SeedMetrics>,
    pub f1: RunSummary,
    pub auc: RunSummary,
}

/// Scores `model` on `eval_episodes` test episodes per seed and summarizes
/// across seeds.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    table: &EmbeddingTable,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one evaluation seed is required".into()));
    }
    if model.config.dim != table.dim() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}-d vectors, embeddings are {}-d",
            model.config.dim,
            table.dim()
        )));
    }
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let eps = sample_episodes(corpus, config.shape(), config.eval_episodes, test_episode_seed(seed))?;
            let metrics = evaluate_episodes(model, &eps, corpus, table, config.threshold)?;
            Ok(SeedMetrics { seed, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    let f1: Vec<f64> = per_seed.iter().map(|s| s.metrics.macro_f1).collect();
    let auc: Vec<f64> = per_seed.iter().map(|s| s.metrics.auc).collect();
    Ok(EvalReport {
        f1: aggregate_runs(&f1)?,
        auc: aggregate_runs(&auc)?,
        per_seed,
    })
}

#[cfg(test)]
mod tests;
