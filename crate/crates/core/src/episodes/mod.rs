//! Synthetic multimodal data and N-way k-shot episode construction.

pub mod container;
mod dataset;
mod sampler;
pub mod vocab;

pub use dataset::{
    DataConfig, Dataset, Domain, MetaSplit, Partition, Scenario, SyntheticCategory, SyntheticSample,
};
pub use sampler::{
    sample_episode, Episode, EpisodeConfig, EpisodeStream, QueryItem, SupportItem, TaskKind,
};
pub use vocab::Vocabulary;
