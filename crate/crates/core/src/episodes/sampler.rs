use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{TextSample, TokenSeq};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Captioning,
    Vqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_way: usize,
    pub repeats: usize,
    pub task_kind: TaskKind,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: 2,
            shots: 1,
            queries_per_way: 4,
            repeats: 1,
            task_kind: TaskKind::Captioning,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.ways == 0 || self.shots == 0 || self.repeats == 0 {
            problems
                .push("episode.ways, episode.shots and episode.repeats must be positive".into());
        }
        if self.queries_per_way <= self.shots {
            problems.push(format!(
                "episode.queries_per_way = {} must exceed episode.shots = {}",
                self.queries_per_way, self.shots
            ));
        }
        if self.task_kind == TaskKind::Vqa && self.ways < 2 {
            problems.push("vqa episodes need at least 2 ways".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub sample_id: usize,
    pub category: usize,
    pub image: Vec<f64>,
    pub caption: TokenSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    /// Samples the image was built from (two for question composites).
    pub sample_ids: Vec<usize>,
    /// Category the answer names.
    pub category: usize,
    pub image: Vec<f64>,
    /// Conditioning text (empty for captioning, the question for VQA).
    pub input: TokenSeq,
    /// Teacher-forced target text.
    pub target: TokenSeq,
    /// The single word scored by exact match.
    pub answer: usize,
}

/// One N-way k-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_way: usize,
    pub repeats: usize,
    pub task_kind: TaskKind,
    pub categories: Vec<usize>,
    /// Name token used for each way. Normally the category's own name.
    pub names: Vec<usize>,
    pub support: Vec<SupportItem>,
    pub query: Vec<QueryItem>,
}

impl Episode {
    pub fn support_samples(&self) -> Vec<TextSample<'_>> {
        self.support
            .iter()
            .map(|s| TextSample {
                image: &s.image,
                input: &[],
                target: &s.caption,
            })
            .collect()
    }

    pub fn query_samples(&self) -> Vec<TextSample<'_>> {
        self.query
            .iter()
            .map(|q| TextSample {
                image: &q.image,
                input: &q.input,
                target: &q.target,
            })
            .collect()
    }

    /// Renames way `i` to `names[i]` in every caption, target and answer.
    pub fn relabel(&mut self, names: &[usize]) {
        let map = |t: &mut usize| {
            if let Some(i) = self.names.iter().position(|n| n == t) {
                *t = names[i];
            }
        };
        for s in &mut self.support {
            s.caption.iter_mut().for_each(map);
        }
        for q in &mut self.query {
            q.target.iter_mut().for_each(map);
            map(&mut q.answer);
        }
        self.names = names.to_vec();
    }

    /// Checks every structural invariant of an episode.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("episode {}: {msg}", self.index)));
        let mut cats = self.categories.clone();
        cats.sort_unstable();
        cats.dedup();
        if cats.len() != self.ways {
            return fail(format!(
                "{} distinct categories for {} ways",
                cats.len(),
                self.ways
            ));
        }
        if self.support.len() != self.ways * self.shots * self.repeats {
            return fail(format!("support size {}", self.support.len()));
        }
        if self.query.len() != self.ways * self.queries_per_way {
            return fail(format!("query size {}", self.query.len()));
        }
        for &c in &self.categories {
            let mut ids: Vec<usize> = self
                .support
                .iter()
                .filter(|s| s.category == c)
                .map(|s| s.sample_id)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != self.shots {
                return fail(format!("category {c} has {} distinct shots", ids.len()));
            }
        }
        for q in &self.query {
            if !self.categories.contains(&q.category) {
                return fail(format!(
                    "query answer category {} not in support",
                    q.category
                ));
            }
            if q.sample_ids
                .iter()
                .any(|id| self.support.iter().any(|s| s.sample_id == *id))
            {
                return fail("a sample appears in both support and query".into());
            }
        }
        if self.queries_per_way <= self.shots {
            return fail("queries_per_way must exceed shots".into());
        }
        Ok(())
    }
}

/// Draws one episode from `partition`.
pub fn sample_episode(
    dataset: &Dataset,
    partition: Partition,
    cfg: &EpisodeConfig,
    index: u64,
    rng: &mut rng::Rng,
) -> Result<Episode> {
    let mut problems = Vec::new();
    cfg.validate(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let pool = dataset.split.categories(partition);
    if pool.len() < cfg.ways {
        return Err(Error::Sampling(format!(
            "{partition:?} has {} categories, {} ways requested",
            pool.len(),
            cfg.ways
        )));
    }
    let per_category = cfg.shots + cfg.queries_per_way;
    let categories: Vec<usize> = index::sample(rng, pool.len(), cfg.ways)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let mut support = Vec::with_capacity(cfg.ways * cfg.shots * cfg.repeats);
    let mut query_pools = Vec::with_capacity(cfg.ways);
    for &c in &categories {
        let ids = &dataset.by_category[c];
        if ids.len() < per_category {
            return Err(Error::Sampling(format!(
                "category {c} has {} samples, {per_category} needed",
                ids.len()
            )));
        }
        let picks: Vec<usize> = index::sample(rng, ids.len(), per_category)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        for &id in &picks[..cfg.shots] {
            let s = &dataset.samples[id];
            for _ in 0..cfg.repeats {
                support.push(SupportItem {
                    sample_id: id,
                    category: c,
                    image: s.image.clone(),
                    caption: s.caption.clone(),
                });
            }
        }
        query_pools.push(picks[cfg.shots..].to_vec());
    }

    let vocab = &dataset.vocab;
    let mut query = Vec::with_capacity(cfg.ways * cfg.queries_per_way);
    for (way, &c) in categories.iter().enumerate() {
        let answer = dataset.categories[c].name_token;
        for &id in &query_pools[way] {
            let s = &dataset.samples[id];
            let item = match cfg.task_kind {
                TaskKind::Captioning => QueryItem {
                    sample_ids: vec![id],
                    category: c,
                    image: s.image.clone(),
                    input: Vec::new(),
                    target: s.caption.clone(),
                    answer,
                },
                TaskKind::Vqa => {
                    let mut other_way = rng.random_range(0..cfg.ways - 1);
                    if other_way >= way {
                        other_way += 1;
                    }
                    let pool = &query_pools[other_way];
                    let other = pool[rng.random_range(0..pool.len())];
                    let on_left = rng.random_bool(0.5);
                    let (left, right) = if on_left { (id, other) } else { (other, id) };
                    let image = composite(
                        &dataset.samples[left].image,
                        &dataset.samples[right].image,
                        dataset.image_shape(),
                    );
                    let side = if on_left { "left" } else { "right" };
                    let input = ["what", "is", "on", "the", side]
                        .iter()
                        .map(|w| vocab.word(w))
                        .collect();
                    QueryItem {
                        sample_ids: vec![left, right],
                        category: c,
                        image,
                        input,
                        target: vec![answer],
                        answer,
                    }
                }
            };
            query.push(item);
        }
    }
    query.shuffle(rng);

    Ok(Episode {
        index,
        ways: cfg.ways,
        shots: cfg.shots,
        queries_per_way: cfg.queries_per_way,
        repeats: cfg.repeats,
        task_kind: cfg.task_kind,
        names: categories
            .iter()
            .map(|&c| dataset.categories[c].name_token)
            .collect(),
        categories,
        support,
        query,
    })
}

/// Left half of `left` beside the right half of `right`.
fn composite(left: &[f64], right: &[f64], shape: crate::model::ImageShape) -> Vec<f64> {
    let half = shape.width / 2;
    let mut out = Vec::with_capacity(left.len());
    for y in 0..shape.height {
        for x in 0..shape.width {
            let src = if x < half { left } else { right };
            let at = (y * shape.width + x) * shape.channels;
            out.extend_from_slice(&src[at..at + shape.channels]);
        }
    }
    out
}

/// Unbounded, seeded, restartable sequence of episodes. Episode `i` depends
/// only on `(seed, i)`.
#[derive(Debug, Clone)]
pub struct EpisodeStream {
    dataset: Arc<Dataset>,
    partition: Partition,
    config: EpisodeConfig,
    seed: u64,
    next: u64,
    shuffle_names: bool,
}

impl EpisodeStream {
    pub fn new(
        dataset: Arc<Dataset>,
        partition: Partition,
        config: EpisodeConfig,
        seed: u64,
    ) -> Self {
        EpisodeStream {
            dataset,
            partition,
            config,
            seed,
            next: 0,
            shuffle_names: false,
        }
    }

    /// Gives every episode a fresh random draw of names for its ways, taken
    /// from the whole name vocabulary, so a name never identifies a category.
    pub fn with_shuffled_names(mut self, shuffle: bool) -> Self {
        self.shuffle_names = shuffle;
        self
    }

    /// The same stream positioned at episode `step`.
    pub fn starting_at(mut self, step: u64) -> Self {
        self.next = step;
        self
    }

    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn episode_at(&self, index: u64) -> Result<Episode> {
        let mut rng = rng::stream(self.seed, rng::STREAM_EPISODE_BASE + index);
        let mut episode =
            sample_episode(&self.dataset, self.partition, &self.config, index, &mut rng)?;
        if self.shuffle_names {
            let all = &self.dataset.categories;
            let names: Vec<usize> = index::sample(&mut rng, all.len(), episode.ways)
                .into_iter()
                .map(|i| all[i].name_token)
                .collect();
            episode.relabel(&names);
        }
        Ok(episode)
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<Episode>> {
        (0..n)
            .map(|_| self.next().expect("stream is unbounded"))
            .collect()
    }
}

impl Iterator for EpisodeStream {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        let ep = self.episode_at(self.next);
        self.next += 1;
        Some(ep)
    }
}
