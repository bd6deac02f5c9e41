//! Bi-level optimisation: per-task inner adaptation of the mapper
//! parameters and the outer meta-update across a batch of tasks.

pub mod bilevel;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

pub use optim::AdamW;
pub use train::{
    inner_adapt, meta_gradient, meta_train, meta_update, nonepisodic_train, task_loss, FlatBatches,
    LogRecord, MetaMetrics, TrainState,
};

use crate::exec::Execution;
use crate::model::{Model, NamedArrays};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_steps: usize,
    /// Inner learning rate α.
    pub inner_lr: f64,
    /// Outer learning rate β.
    pub meta_lr: f64,
    pub meta_batch_tasks: usize,
    pub second_order: bool,
    pub weight_decay: f64,
    /// Re-draw the names of each meta-training episode's ways at random, so
    /// θ cannot memorize a fixed image-to-name map.
    pub shuffle_names: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_steps: 5,
            inner_lr: 0.01,
            meta_lr: 0.001,
            meta_batch_tasks: 4,
            second_order: true,
            weight_decay: 0.01,
            shuffle_names: true,
            execution: Execution::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            problems.push("meta.inner_lr must be finite and non-negative".into());
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            problems.push("meta.meta_lr must be finite and positive".into());
        }
        if self.meta_batch_tasks == 0 {
            problems.push("meta.meta_batch_tasks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            problems.push("meta.weight_decay must lie in [0, 1)".into());
        }
    }
}

/// Trainable mapper parameters together with the frozen model they drive.
/// Cloning is cheap: the backbones are shared.
#[derive(Debug, Clone)]
pub struct ParameterSet<R: Real> {
    pub model: Model<R>,
    pub theta: NamedArrays<R>,
}

impl<R: Real> ParameterSet<R> {
    pub fn new(model: Model<R>, theta: NamedArrays<R>) -> Self {
        ParameterSet { model, theta }
    }

    pub fn frozen_checksum(&self) -> String {
        self.model.backbones.checksum()
    }
}

#[cfg(test)]
mod tests;
