//! Experiment orchestration shared by the command-line tool and the tests:
//! configuration, checkpoints, training runs and evaluation suites.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod suite;

use std::sync::Arc;

pub use checkpoint::{Checkpoint, TrainMode};
pub use config::{BudgetConfig, EvaluationConfig, ExperimentConfig, Seeds};
pub use suite::{run_suite, Suite};

use crate::episodes::{Dataset, EpisodeStream, Partition};
use crate::error::{Error, Result};
use crate::eval::{meta_test, EvalReport, EvalSpec};
use crate::meta::{
    meta_train, nonepisodic_train, FlatBatches, LogRecord, ParameterSet, TrainState,
};
use crate::model::{Backbones, MapperVariant, Model, NamedArrays, TextSample};
use crate::real::Real;

/// A validated configuration bound to its dataset and frozen model.
#[derive(Debug, Clone)]
pub struct Experiment<R: Real> {
    pub config: ExperimentConfig,
    pub dataset: Arc<Dataset>,
    pub model: Model<R>,
}

impl<R: Real> Experiment<R> {
    /// Binds `config` to an existing dataset, rejecting one generated from a
    /// different data section or seed.
    pub fn new(config: ExperimentConfig, dataset: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        if dataset.config != config.data {
            return Err(Error::Compatibility(format!(
                "dataset was generated from a different data configuration (dataset {}, config {})",
                crate::hash::digest(&(&dataset.config, dataset.config.seed)),
                crate::hash::digest(&(&config.data, config.data.seed)),
            )));
        }
        let backbones = Arc::new(Backbones::new(&config.backbone, config.data.image())?);
        let model = Model::new(backbones, config.mapper.clone());
        Ok(Experiment {
            config,
            dataset,
            model,
        })
    }

    /// Generates the dataset from the config.
    pub fn generate(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Arc::new(Dataset::generate(&config.data)?);
        Self::new(config, dataset)
    }

    /// Same data and frozen backbones with a different mapper architecture.
    pub fn with_mapper(&self, variant: MapperVariant) -> Self {
        let mut config = self.config.clone();
        config.mapper.variant = variant;
        Experiment {
            model: Model::new(self.model.backbones.clone(), config.mapper.clone()),
            config,
            dataset: self.dataset.clone(),
        }
    }

    /// Same model on a dataset regenerated from `config.data` (used when only
    /// the data section differs, e.g. the split scenario).
    pub fn with_dataset(&self, dataset: Arc<Dataset>) -> Result<Self> {
        let mut config = self.config.clone();
        config.data = dataset.config.clone();
        config.validate()?;
        Ok(Experiment {
            config,
            dataset,
            model: self.model.clone(),
        })
    }

    pub fn frozen_checksum(&self) -> String {
        self.model.backbones.checksum()
    }

    pub fn initial_state(&self) -> TrainState<R> {
        TrainState::new(
            self.model.init_theta(self.config.seeds.train),
            &self.config.meta,
        )
    }

    pub fn params(&self, theta: &NamedArrays<R>) -> ParameterSet<R> {
        ParameterSet::new(self.model.clone(), theta.clone())
    }

    pub fn train_stream(&self) -> EpisodeStream {
        EpisodeStream::new(
            self.dataset.clone(),
            Partition::MetaTrain,
            self.config.episode.clone(),
            self.config.seeds.train,
        )
        .with_shuffled_names(self.config.meta.shuffle_names)
    }

    /// Every meta-train caption, in sample-id order.
    pub fn flat_pool(&self) -> Vec<TextSample<'_>> {
        self.dataset
            .partition_samples(Partition::MetaTrain)
            .into_iter()
            .map(|s| TextSample {
                image: &s.image,
                input: &[],
                target: &s.caption,
            })
            .collect()
    }

    /// Samples one episodic meta-update consumes; the non-episodic baseline
    /// uses batches of this size so both see the same sample budget.
    pub fn samples_per_update(&self) -> usize {
        let e = &self.config.episode;
        self.config.meta.meta_batch_tasks * e.ways * (e.shots * e.repeats + e.queries_per_way)
    }

    /// Continues `state` until it reaches `max_updates`.
    pub fn train(
        &self,
        mode: TrainMode,
        state: &mut TrainState<R>,
        max_updates: u64,
        on_step: &mut dyn FnMut(&TrainState<R>, &LogRecord) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        match mode {
            TrainMode::Episodic => meta_train(
                &self.model,
                state,
                &self.train_stream(),
                &self.config.meta,
                max_updates,
                on_step,
            ),
            TrainMode::Nonepisodic => {
                let pool = self.flat_pool();
                let batches = FlatBatches::new(
                    pool.len(),
                    self.samples_per_update(),
                    self.config.seeds.train,
                )?;
                nonepisodic_train(&self.model, state, &pool, &batches, max_updates, on_step)
            }
        }
    }

    /// Trains from the initial state for `updates` steps, logging progress.
    pub fn train_fresh(&self, mode: TrainMode, updates: u64) -> Result<TrainState<R>> {
        let mut state = self.initial_state();
        let every = (updates / 10).max(1);
        self.train(mode, &mut state, updates, &mut |s, r| {
            if s.meta_step % every == 0 {
                log::info!(
                    "{} step {}/{updates}: query loss {:.4}",
                    mode.name(),
                    s.meta_step,
                    r.mean_query_loss
                );
            }
            Ok(())
        })?;
        Ok(state)
    }

    /// The standard evaluation cell described by the config.
    pub fn eval_spec(&self, label: &str) -> EvalSpec {
        EvalSpec {
            label: label.to_string(),
            episode: self.config.episode.clone(),
            adaptation_steps: self.config.evaluation.adaptation_steps,
            inner_lr: self.config.meta.inner_lr,
            generation: self.config.generation.clone(),
            episodes: self.config.evaluation.episodes,
            seed: self.config.seeds.eval,
            task_induction: self.config.evaluation.task_induction,
            execution: self.config.meta.execution,
        }
    }

    pub fn evaluate(&self, theta: &NamedArrays<R>, spec: &EvalSpec) -> Result<EvalReport> {
        let report = meta_test(&self.params(theta), &self.dataset, spec)?;
        log::info!(
            "{}: accuracy {:.3} ± {:.3} over {} episodes",
            spec.label,
            report.mean_accuracy,
            report.stderr,
            report.episodes.len()
        );
        Ok(report)
    }
}
