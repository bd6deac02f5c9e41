//! Meta-test protocol: adapt on each episode's support set, generate for
//! its queries, and score exact-match answers.

mod generate;
mod report;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use generate::{
    argmax, choose, filter_top_k, filter_top_p, generate, probabilities, GenerationConfig, Strategy,
};
pub use report::{
    csv_table, mean_and_stderr, EpisodeResult, EvalEcho, EvalReport, GenerationRecord, CSV_HEADER,
};

use crate::episodes::{Dataset, Episode, EpisodeConfig, EpisodeStream, Partition};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::meta::{inner_adapt, MetaConfig, ParameterSet};
use crate::model::TokenSeq;
use crate::real::Real;
use crate::rng;

/// Everything that defines one evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub label: String,
    pub episode: EpisodeConfig,
    pub adaptation_steps: usize,
    pub inner_lr: f64,
    pub generation: GenerationConfig,
    pub episodes: usize,
    pub seed: u64,
    /// Prepends "answer with ⟨a⟩ or ⟨b⟩ …" to every query input.
    pub task_induction: bool,
    #[serde(skip)]
    pub execution: Execution,
}

/// Tokens of the fixed instruction naming the episode's candidate answers.
pub fn induction_prompt(dataset: &Dataset, episode: &Episode) -> TokenSeq {
    let v = &dataset.vocab;
    let mut out = vec![v.word("answer"), v.word("with")];
    for (i, &name) in episode.names.iter().enumerate() {
        if i > 0 {
            out.push(v.word("or"));
        }
        out.push(name);
    }
    out
}

/// Scores an episode given a responder that sees one query (image, input)
/// at a time. Correct means the answer token appears in the response.
pub fn score_episode<F>(
    dataset: &Dataset,
    episode: &Episode,
    prompt: &[usize],
    mut respond: F,
) -> Result<EpisodeResult>
where
    F: FnMut(&[f64], &[usize]) -> Result<TokenSeq>,
{
    let vocab = &dataset.vocab;
    let mut generations = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        let mut input = prompt.to_vec();
        input.extend_from_slice(&q.input);
        let generated = respond(&q.image, &input)?;
        generations.push(GenerationRecord {
            answer: vocab.words()[q.answer].clone(),
            generated: vocab.decode(&generated),
            correct: generated.contains(&q.answer),
        });
    }
    Ok(EpisodeResult::new(episode.index, generations))
}

/// θ′ for one episode. Only the support set is visible here.
pub fn adapt_to_episode<R: Real>(
    params: &ParameterSet<R>,
    episode: &Episode,
    spec: &EvalSpec,
) -> Result<ParameterSet<R>> {
    let adapt_cfg = MetaConfig {
        inner_steps: spec.adaptation_steps,
        inner_lr: spec.inner_lr,
        ..MetaConfig::default()
    };
    inner_adapt(params, &episode.support_samples(), &adapt_cfg, false)
}

fn evaluate_episode<R: Real>(
    params: &ParameterSet<R>,
    dataset: &Dataset,
    episode: &Episode,
    spec: &EvalSpec,
) -> Result<EpisodeResult> {
    let adapted = adapt_to_episode(params, episode, spec)?;
    let theta = adapted.theta.to_constants();
    let prompt = if spec.task_induction {
        induction_prompt(dataset, episode)
    } else {
        Vec::new()
    };
    let mut rng = rng::stream(spec.seed, rng::STREAM_GENERATION_BASE + episode.index);
    score_episode(dataset, episode, &prompt, |image, input| {
        generate(
            &params.model,
            &theta,
            image,
            input,
            &spec.generation,
            &mut rng,
        )
    })
}

/// Runs `spec.episodes` meta-test episodes. Episodes are independent and may
/// run in parallel; the report keeps episode order.
pub fn meta_test<R: Real>(
    params: &ParameterSet<R>,
    dataset: &Arc<Dataset>,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    let mut problems = Vec::new();
    spec.episode.validate(&mut problems);
    spec.generation.validate(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let stream = EpisodeStream::new(
        dataset.clone(),
        Partition::MetaTest,
        spec.episode.clone(),
        spec.seed,
    );
    let results = exec::map_indexed(spec.episodes, spec.execution, |i| {
        let episode = stream.episode_at(i as u64)?;
        evaluate_episode(params, dataset, &episode, spec)
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(EvalEcho::new(spec, dataset), episodes))
}

#[cfg(test)]
mod tests;
