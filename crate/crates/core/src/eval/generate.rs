use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, TensorMap, TokenSeq, BOS, EOS};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
    TopP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            strategy: Strategy::Greedy,
            top_k: 5,
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: 5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.top_k == 0 {
            problems.push("generation.top_k must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            problems.push("generation.top_p must lie in (0, 1]".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push("generation.temperature must be positive".into());
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`.
pub fn probabilities(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Ids of tokens in descending probability, ties by id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn keep(probs: &[f64], kept: &[usize]) -> Vec<f64> {
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in kept {
        out[i] = probs[i] / mass;
    }
    out
}

/// Keeps the `k` most likely tokens and renormalises.
pub fn filter_top_k(probs: &[f64], k: usize) -> Vec<f64> {
    let order = ranked(probs);
    keep(probs, &order[..k.clamp(1, probs.len())])
}

/// Keeps the smallest most-likely prefix whose mass reaches `p` and
/// renormalises.
pub fn filter_top_p(probs: &[f64], p: f64) -> Vec<f64> {
    let order = ranked(probs);
    let mut mass = 0.0;
    let mut n = 0;
    for &i in &order {
        mass += probs[i];
        n += 1;
        // Tolerate rounding in the running sum.
        if mass >= p - 1e-12 {
            break;
        }
    }
    keep(probs, &order[..n])
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Next token under `cfg` given next-token logits.
pub fn choose(logits: &[f64], cfg: &GenerationConfig, rng: &mut Rng) -> usize {
    match cfg.strategy {
        Strategy::Greedy => argmax(logits),
        Strategy::TopK => draw(
            &filter_top_k(&probabilities(logits, cfg.temperature), cfg.top_k),
            rng,
        ),
        Strategy::TopP => draw(
            &filter_top_p(&probabilities(logits, cfg.temperature), cfg.top_p),
            rng,
        ),
    }
}

/// Continues `[BOS, input…]` until EOS, `max_new_tokens`, or the decoder
/// context runs out. Returns the new tokens without EOS.
pub fn generate<R: Real>(
    model: &Model<R>,
    theta: &TensorMap<R>,
    image: &[f64],
    input: &[usize],
    cfg: &GenerationConfig,
    rng: &mut Rng,
) -> Result<TokenSeq> {
    let prefix = model.prefix(theta, image)?.detach();
    let room = model
        .backbones
        .lm
        .context()
        .saturating_sub(prefix.shape()[0]);
    let mut tokens = Vec::with_capacity(input.len() + cfg.max_new_tokens + 1);
    tokens.push(BOS);
    tokens.extend_from_slice(input);
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && tokens.len() < room {
        let logits = model.token_logits(&prefix, &tokens)?;
        let vocab = logits.shape()[1];
        let last: Vec<f64> = logits.data()[(tokens.len() - 1) * vocab..]
            .iter()
            .map(|v| v.f64())
            .collect();
        let next = choose(&last, cfg, rng);
        if next == EOS {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}
