use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bilevel::{adapt, task_meta_gradient, TaskOutcome};
use super::{AdamW, MetaConfig, ParameterSet};
use crate::autodiff::Tensor;
use crate::episodes::{Episode, EpisodeStream};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Model, NamedArrays, TensorMap, TextSample};
use crate::real::Real;
use crate::rng;

fn ordered<R: Real>(theta: &NamedArrays<R>) -> (Vec<String>, Vec<(Vec<R>, Vec<usize>)>) {
    theta
        .iter()
        .map(|(k, a)| (k.clone(), (a.data.clone(), a.shape.clone())))
        .unzip()
}

fn named<R: Real>(names: &[String], tensors: &[Tensor<R>]) -> TensorMap<R> {
    names.iter().cloned().zip(tensors.iter().cloned()).collect()
}

fn loss_closure<'a, 'b: 'a, R: Real>(
    model: &'a Model<R>,
    names: &'a [String],
    samples: &'a [TextSample<'b>],
) -> impl Fn(&[Tensor<R>]) -> Result<Tensor<R>> + 'a {
    move |p| model.task_loss(&named(names, p), samples)
}

/// Mean target-token cross-entropy of `samples` at the current θ.
pub fn task_loss<R: Real>(
    params: &ParameterSet<R>,
    samples: &[TextSample<'_>],
) -> Result<Tensor<R>> {
    params.model.task_loss(&params.theta.to_params(), samples)
}

/// θ′ after `cfg.inner_steps` gradient steps on `support`. The input is left
/// untouched. Tracking changes only how θ′ was computed, not its value.
pub fn inner_adapt<R: Real>(
    params: &ParameterSet<R>,
    support: &[TextSample<'_>],
    cfg: &MetaConfig,
    track_for_meta: bool,
) -> Result<ParameterSet<R>> {
    if support.is_empty() {
        return Err(Error::Contract(
            "inner_adapt needs a nonempty support set".into(),
        ));
    }
    let (names, values) = ordered(&params.theta);
    let leaves = values
        .iter()
        .map(|(v, s)| Ok(Tensor::param(v.clone(), s)?))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_closure(&params.model, &names, support);
    let out = adapt(
        &leaves,
        &loss,
        cfg.inner_steps,
        cfg.inner_lr,
        track_for_meta,
    )?;
    Ok(ParameterSet::new(
        params.model.clone(),
        NamedArrays::from_ordered(&names, &out.params),
    ))
}

/// Per-batch averages reported by a meta-update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaMetrics {
    pub support_pre: f64,
    pub support_post: f64,
    pub query: f64,
}

fn task_outcome<R: Real>(
    model: &Model<R>,
    names: &[String],
    values: &[(Vec<R>, Vec<usize>)],
    episode: &Episode,
    cfg: &MetaConfig,
) -> Result<TaskOutcome<R>> {
    let support = episode.support_samples();
    let query = episode.query_samples();
    if support.is_empty() || query.is_empty() {
        return Err(Error::Contract(format!(
            "episode {} has an empty support or query set",
            episode.index
        )));
    }
    let support_loss = loss_closure(model, names, &support);
    let query_loss = loss_closure(model, names, &query);
    task_meta_gradient(
        values,
        &support_loss,
        &query_loss,
        cfg.inner_steps,
        cfg.inner_lr,
        cfg.second_order,
    )
}

/// Summed meta-gradient over `tasks`, plus per-task adapted parameters.
///
/// Tasks run independently (in parallel when enabled); the sum is reduced in
/// task order so the result does not depend on scheduling.
pub fn meta_gradient<R: Real>(
    params: &ParameterSet<R>,
    tasks: &[Episode],
    cfg: &MetaConfig,
) -> Result<(NamedArrays<R>, MetaMetrics, Vec<NamedArrays<R>>)> {
    if tasks.is_empty() {
        return Err(Error::Contract(
            "meta-update needs at least one task".into(),
        ));
    }
    let (names, values) = ordered(&params.theta);
    let outcomes = exec::map_indexed(tasks.len(), cfg.execution, |i| {
        task_outcome(&params.model, &names, &values, &tasks[i], cfg).map_err(|e| match e {
            Error::Divergence { step, .. } => Error::Divergence {
                step,
                task: Some(i),
            },
            other => other,
        })
    });
    let mut sum: Vec<Vec<R>> = values
        .iter()
        .map(|(v, _)| vec![R::zero(); v.len()])
        .collect();
    let mut metrics = MetaMetrics {
        support_pre: 0.0,
        support_post: 0.0,
        query: 0.0,
    };
    let mut adapted = Vec::with_capacity(tasks.len());
    for outcome in outcomes {
        let outcome = outcome?;
        for (acc, g) in sum.iter_mut().zip(&outcome.grads) {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        metrics.support_pre += outcome.support_pre;
        metrics.support_post += outcome.support_post;
        metrics.query += outcome.query;
        adapted.push(params.theta.unflatten(&outcome.adapted.concat()));
    }
    let n = tasks.len() as f64;
    metrics.support_pre /= n;
    metrics.support_post /= n;
    metrics.query /= n;
    Ok((params.theta.unflatten(&sum.concat()), metrics, adapted))
}

fn check_gradient<R: Real>(grads: &NamedArrays<R>, step: u64) -> Result<()> {
    if grads
        .iter()
        .all(|(_, a)| a.data.iter().all(|v| v.is_finite()))
    {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: step as usize,
            task: None,
        })
    }
}

/// One outer step on θ with the summed query-loss gradient of `tasks`.
pub fn meta_update<R: Real>(
    params: &mut ParameterSet<R>,
    optimizer: &mut AdamW<R>,
    tasks: &[Episode],
    cfg: &MetaConfig,
) -> Result<MetaMetrics> {
    let (grads, metrics, _) = meta_gradient(params, tasks, cfg)?;
    check_gradient(&grads, optimizer.step)?;
    optimizer.apply(&mut params.theta, &grads);
    Ok(metrics)
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<R: Real> {
    pub theta: NamedArrays<R>,
    pub optimizer: AdamW<R>,
    pub meta_step: u64,
}

impl<R: Real> TrainState<R> {
    pub fn new(theta: NamedArrays<R>, cfg: &MetaConfig) -> Self {
        let optimizer = AdamW::new(&theta, cfg.meta_lr, cfg.weight_decay);
        TrainState {
            theta,
            optimizer,
            meta_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub meta_step: u64,
    pub mean_support_loss_pre: f64,
    pub mean_support_loss_post: f64,
    pub mean_query_loss: f64,
    pub wall_time: f64,
}

/// Runs meta-updates until `state.meta_step` reaches `max_updates`.
///
/// Step `s` consumes episodes `s·B .. (s+1)·B` of `stream`, so a resumed
/// state replays exactly the episodes an uninterrupted run would have seen.
/// `on_step` sees the state after every update (checkpointing hooks in here).
pub fn meta_train<R: Real>(
    model: &Model<R>,
    state: &mut TrainState<R>,
    stream: &EpisodeStream,
    cfg: &MetaConfig,
    max_updates: u64,
    on_step: &mut dyn FnMut(&TrainState<R>, &LogRecord) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    let start = Instant::now();
    let batch = cfg.meta_batch_tasks as u64;
    let mut log = Vec::new();
    while state.meta_step < max_updates {
        let first = state.meta_step * batch;
        let tasks = (first..first + batch)
            .map(|i| stream.episode_at(i))
            .collect::<Result<Vec<_>>>()?;
        let mut params = ParameterSet::new(model.clone(), std::mem::take(&mut state.theta));
        let result = meta_update(&mut params, &mut state.optimizer, &tasks, cfg);
        state.theta = params.theta;
        let metrics = result?;
        let record = LogRecord {
            meta_step: state.meta_step,
            mean_support_loss_pre: metrics.support_pre,
            mean_support_loss_post: metrics.support_post,
            mean_query_loss: metrics.query,
            wall_time: start.elapsed().as_secs_f64(),
        };
        state.meta_step += 1;
        log::debug!(
            "meta-step {} support {:.4} -> {:.4}, query {:.4}",
            record.meta_step,
            record.mean_support_loss_pre,
            record.mean_support_loss_post,
            record.mean_query_loss
        );
        on_step(state, &record)?;
        log.push(record);
    }
    Ok(log)
}

/// Seeded reshuffling of a flat sample pool into fixed-size batches. Batch
/// `s` is a pure function of `(seed, s)`.
#[derive(Debug, Clone)]
pub struct FlatBatches {
    pool: usize,
    batch: usize,
    seed: u64,
}

impl FlatBatches {
    pub fn new(pool: usize, batch: usize, seed: u64) -> Result<Self> {
        if pool == 0 || batch == 0 {
            return Err(Error::Contract(
                "flat batches need a nonempty pool and batch".into(),
            ));
        }
        Ok(FlatBatches {
            pool,
            batch: batch.min(pool),
            seed,
        })
    }

    /// Pool indices of batch `step`. Batches walk through one permutation per
    /// epoch; a batch that would straddle two epochs starts the next one.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per_epoch = (self.pool / self.batch) as u64;
        let epoch = step / per_epoch;
        let offset = (step % per_epoch) as usize * self.batch;
        let mut rng = rng::stream(self.seed, rng::STREAM_SHUFFLE);
        let mut order: Vec<usize> = (0..self.pool).collect();
        for _ in 0..=epoch {
            order.shuffle(&mut rng);
        }
        order[offset..offset + self.batch].to_vec()
    }
}

/// Plain mini-batch training of θ on `task_loss` with the meta optimizer and
/// no inner loop. Shares the step counter and logging of [`meta_train`].
pub fn nonepisodic_train<R: Real>(
    model: &Model<R>,
    state: &mut TrainState<R>,
    pool: &[TextSample<'_>],
    batches: &FlatBatches,
    max_updates: u64,
    on_step: &mut dyn FnMut(&TrainState<R>, &LogRecord) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    let start = Instant::now();
    let mut log = Vec::new();
    while state.meta_step < max_updates {
        let samples: Vec<TextSample<'_>> = batches
            .batch_at(state.meta_step)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let theta = state.theta.to_params();
        let loss = model.task_loss(&theta, &samples)?;
        let value = loss.item().f64();
        let (names, leaves): (Vec<String>, Vec<Tensor<R>>) = theta.into_iter().unzip();
        let grads = crate::autodiff::grad(&loss, &leaves, false)?;
        let grads = NamedArrays::from_ordered(&names, &grads);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: state.meta_step as usize,
                task: None,
            });
        }
        check_gradient(&grads, state.meta_step)?;
        state.optimizer.apply(&mut state.theta, &grads);
        let record = LogRecord {
            meta_step: state.meta_step,
            mean_support_loss_pre: value,
            mean_support_loss_post: value,
            mean_query_loss: value,
            wall_time: start.elapsed().as_secs_f64(),
        };
        state.meta_step += 1;
        on_step(state, &record)?;
        log.push(record);
    }
    Ok(log)
}
