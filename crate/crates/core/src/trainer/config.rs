use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::EpisodeShape;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// The five model variants compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Base,
    Las,
    Lcl,
    Scl,
    Ldf,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Base, Self::Las, Self::Lcl, Self::Scl, Self::Ldf];

    /// `(use_las, use_lcl, use_scl)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Self::Base => (false, false, false),
            Self::Las => (true, false, false),
            Self::Lcl => (false, true, false),
            Self::Scl => (false, false, true),
            Self::Ldf => (true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Las => "las",
            Self::Lcl => "lcl",
            Self::Scl => "scl",
            Self::Ldf => "ldf",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (base|las|lcl|scl|ldf)")))
    }
}

/// Flat training configuration. Every key may be omitted from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub patience: usize,
    pub seed: u64,
    pub use_las: bool,
    pub use_lcl: bool,
    pub use_scl: bool,
    pub strict_negatives: bool,
    /// Prediction cutoff; chosen from `n_way` when absent.
    pub threshold: Option<f64>,
    pub hidden: usize,
    pub max_len: usize,
    pub train_embeddings: bool,
    pub las_on_queries: bool,
    pub train_corpus: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            queries_per_class: 5,
            epochs: 30,
            episodes_per_epoch: 800,
            eval_episodes: 600,
            lr: 1e-3,
            tau: 0.1,
            lambda: 0.2,
            patience: 3,
            seed: 5,
            use_las: true,
            use_lcl: true,
            use_scl: false,
            strict_negatives: false,
            threshold: None,
            hidden: 50,
            max_len: 64,
            train_embeddings: false,
            las_on_queries: false,
            train_corpus: None,
            dev_corpus: None,
            test_corpus: None,
            embeddings: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Reads a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.train_corpus,
            &mut config.dev_corpus,
            &mut config.test_corpus,
            &mut config.embeddings,
            &mut config.checkpoint_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_las, self.use_lcl, self.use_scl) = ablation.flags();
        self
    }

    /// The named variant these flags select, if any.
    pub fn ablation(&self) -> Option<Ablation> {
        let flags = (self.use_las, self.use_lcl, self.use_scl);
        Ablation::ALL.into_iter().find(|a| a.flags() == flags)
    }

    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            n_way: self.n_way,
            k_shot: self.k_shot,
            queries_per_class: self.queries_per_class,
        }
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            hidden: self.hidden,
            max_len: self.max_len,
            use_las: self.use_las,
            las_on_queries: self.las_on_queries,
            train_embeddings: self.train_embeddings,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("queries_per_class", self.queries_per_class),
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("eval_episodes", self.eval_episodes),
            ("patience", self.patience),
            ("hidden", self.hidden),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_way < 2 {
            return Err(Error::Config("n_way must be at least 2".into()));
        }
        if self.use_lcl && self.use_scl {
            return Err(Error::Config("use_lcl and use_scl are mutually exclusive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        crate::model::threshold_for(self.n_way, self.threshold)?;
        Ok(())
    }
}
