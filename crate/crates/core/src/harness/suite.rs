use std::sync::Arc;

use super::{Experiment, TrainMode};
use crate::episodes::{Dataset, EpisodeConfig, Scenario};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::meta::TrainState;
use crate::model::MapperVariant;
use crate::real::Real;

/// Evaluation suites: the standard cell plus the comparative ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Standard,
    EraseMetaKnowledge,
    MlpMapper,
    FixedTaskInduction,
    StepSweep,
    RepeatsVsShots,
    EpisodicVsNonepisodic,
    DomainShift,
}

pub const STEP_SWEEP: [usize; 4] = [0, 1, 3, 5];

impl Suite {
    pub const ABLATIONS: [Suite; 7] = [
        Suite::EraseMetaKnowledge,
        Suite::MlpMapper,
        Suite::FixedTaskInduction,
        Suite::StepSweep,
        Suite::RepeatsVsShots,
        Suite::EpisodicVsNonepisodic,
        Suite::DomainShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Standard => "standard",
            Suite::EraseMetaKnowledge => "erase_meta_knowledge",
            Suite::MlpMapper => "mlp_mapper",
            Suite::FixedTaskInduction => "fixed_task_induction",
            Suite::StepSweep => "step_sweep",
            Suite::RepeatsVsShots => "repeats_vs_shots",
            Suite::EpisodicVsNonepisodic => "episodic_vs_nonepisodic",
            Suite::DomainShift => "domain_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        std::iter::once(Suite::Standard)
            .chain(Suite::ABLATIONS)
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite `{s}`")))
    }
}

/// Runs `suite` against `trained` (a state of `exp`'s model). Cells that
/// need another trained model train it with the same number of updates and
/// the same seeds.
pub fn run_suite<R: Real>(
    exp: &Experiment<R>,
    trained: &TrainState<R>,
    suite: Suite,
) -> Result<Vec<EvalReport>> {
    let theta = &trained.theta;
    let budget = trained.meta_step;
    let base = exp.eval_spec(suite.name());
    let cell = |label: &str| {
        let mut spec = base.clone();
        spec.label = label.to_string();
        spec
    };
    let reports = match suite {
        Suite::Standard => vec![exp.evaluate(theta, &cell("standard"))?],
        Suite::EraseMetaKnowledge => {
            let erased = exp.model.init_theta(exp.config.seeds.train);
            vec![
                exp.evaluate(theta, &cell("intact"))?,
                exp.evaluate(&erased, &cell("erased"))?,
            ]
        }
        Suite::MlpMapper => {
            let (attn_exp, mlp_exp) = (
                exp.with_mapper(MapperVariant::SelfAttention),
                exp.with_mapper(MapperVariant::Mlp),
            );
            let attn_theta = match exp.config.mapper.variant {
                MapperVariant::SelfAttention => theta.clone(),
                MapperVariant::Mlp => attn_exp.train_fresh(TrainMode::Episodic, budget)?.theta,
            };
            let mlp_theta = match exp.config.mapper.variant {
                MapperVariant::Mlp => theta.clone(),
                MapperVariant::SelfAttention => {
                    mlp_exp.train_fresh(TrainMode::Episodic, budget)?.theta
                }
            };
            vec![
                attn_exp.evaluate(&attn_theta, &cell("self_attention"))?,
                mlp_exp.evaluate(&mlp_theta, &cell("mlp"))?,
            ]
        }
        Suite::FixedTaskInduction => {
            let mut with = cell("fixed_induction");
            with.task_induction = true;
            let mut without = cell("learned_induction");
            without.task_induction = false;
            vec![exp.evaluate(theta, &without)?, exp.evaluate(theta, &with)?]
        }
        Suite::StepSweep => STEP_SWEEP
            .iter()
            .map(|&steps| {
                let mut spec = cell(&format!("steps_{steps}"));
                spec.adaptation_steps = steps;
                exp.evaluate(theta, &spec)
            })
            .collect::<Result<Vec<_>>>()?,
        Suite::RepeatsVsShots => {
            let queries = base.episode.queries_per_way.max(6);
            let needed = 5 + queries;
            if exp.dataset.config.samples_per_category < needed {
                return Err(Error::config(format!(
                    "repeats_vs_shots needs data.samples_per_category >= {needed}"
                )));
            }
            [(1, 1), (5, 1), (1, 5), (5, 5)]
                .iter()
                .map(|&(shots, repeats)| {
                    let mut spec = cell(&format!("k{shots}_r{repeats}"));
                    spec.episode = EpisodeConfig {
                        shots,
                        repeats,
                        queries_per_way: queries,
                        ..base.episode.clone()
                    };
                    exp.evaluate(theta, &spec)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Suite::EpisodicVsNonepisodic => {
            let nonepisodic = exp.train_fresh(TrainMode::Nonepisodic, budget)?;
            vec![
                exp.evaluate(theta, &cell("episodic"))?,
                exp.evaluate(&nonepisodic.theta, &cell("nonepisodic"))?,
            ]
        }
        Suite::DomainShift => [Scenario::InDomain, Scenario::CrossDomain]
            .iter()
            .map(|&scenario| {
                let mut data = exp.config.data.clone();
                data.scenario = scenario;
                let shifted = exp.with_dataset(Arc::new(Dataset::generate(&data)?))?;
                let label = match scenario {
                    Scenario::InDomain => "in_domain",
                    Scenario::CrossDomain => "cross_domain",
                };
                shifted.evaluate(theta, &cell(label))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(reports)
}
