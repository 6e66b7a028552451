//! Corpora, episodic N-way K-shot sampling and synthetic corpora.

mod corpus;
mod sampler;
pub mod synthetic;

pub use corpus::{Corpus, Instance};
pub use sampler::{sample_episode, Episode, EpisodeShape, Query};
pub use synthetic::{make_synthetic_corpus, make_synthetic_splits, SyntheticSpec};
