use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{vocab_size_for, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ImageShape, TokenSeq};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    InDomain,
    CrossDomain,
}

/// Rendering and caption style. Cross-domain splits render meta-test
/// categories in the second domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Primary,
    Shifted,
}

impl Domain {
    pub fn template(self) -> &'static [&'static str] {
        match self {
            Domain::Primary => &["this", "is", "a"],
            Domain::Shifted => &["a", "photo", "of"],
        }
    }

    fn render(self, prototype: f64, noise: f64, z: f64) -> f64 {
        match self {
            Domain::Primary => prototype + noise * z,
            Domain::Shifted => 0.8 * prototype + 0.25 + 1.2 * noise * z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_categories: usize,
    pub num_test_categories: usize,
    pub samples_per_category: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub render_noise: f64,
    pub scenario: Scenario,
    /// Supplied by the experiment's data seed, not the data section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_categories: 48,
            num_test_categories: 10,
            samples_per_category: 20,
            image_height: 8,
            image_width: 8,
            image_channels: 3,
            render_noise: 0.5,
            scenario: Scenario::InDomain,
            seed: 11,
        }
    }
}

impl DataConfig {
    pub fn image(&self) -> ImageShape {
        ImageShape {
            height: self.image_height,
            width: self.image_width,
            channels: self.image_channels,
        }
    }

    pub fn vocab_size(&self) -> usize {
        vocab_size_for(self.num_categories)
    }

    /// Checks the request against the largest episode it must support.
    pub fn validate(&self, max_ways: usize, problems: &mut Vec<String>) {
        if self.image_height == 0 || self.image_width == 0 || self.image_channels == 0 {
            problems.push("data.image_* must be positive".into());
        }
        if self.image_width % 2 != 0 {
            problems.push(
                "data.image_width must be even (question composites split it in half)".into(),
            );
        }
        if self.num_categories < 2 * max_ways {
            problems.push(format!(
                "data.num_categories = {} is below twice the episode ways ({max_ways})",
                self.num_categories
            ));
        }
        if self.num_test_categories < max_ways
            || self.num_categories < self.num_test_categories + max_ways
        {
            problems.push(format!(
                "data.num_test_categories = {} leaves fewer than {max_ways} categories in a partition",
                self.num_test_categories
            ));
        }
        if !(self.render_noise >= 0.0 && self.render_noise.is_finite()) {
            problems.push("data.render_noise must be a finite non-negative number".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCategory {
    pub id: usize,
    pub name_token: usize,
    pub prototype: Vec<f64>,
    pub render_noise: f64,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub category: usize,
    pub image: Vec<f64>,
    pub caption: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    MetaTrain,
    MetaTest,
}

/// Disjoint category partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSplit {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
    pub scenario: Scenario,
}

impl MetaSplit {
    pub fn categories(&self, partition: Partition) -> &[usize] {
        match partition {
            Partition::MetaTrain => &self.meta_train,
            Partition::MetaTest => &self.meta_test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.meta_train.iter().all(|c| !self.meta_test.contains(c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub vocab: Vocabulary,
    pub categories: Vec<SyntheticCategory>,
    pub samples: Vec<SyntheticSample>,
    pub split: MetaSplit,
    /// Sample ids per category, in generation order.
    pub by_category: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        let mut problems = Vec::new();
        config.validate(2, &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let vocab = Vocabulary::synthetic(config.num_categories, config.seed);
        let pixels = config.image().len();
        let first_name = vocab.len() - config.num_categories;

        let mut order: Vec<usize> = (0..config.num_categories).collect();
        order.shuffle(&mut rng::stream(config.seed, rng::STREAM_SPLIT));
        let train_count = config.num_categories - config.num_test_categories;
        let mut meta_train = order[..train_count].to_vec();
        let mut meta_test = order[train_count..].to_vec();
        meta_train.sort_unstable();
        meta_test.sort_unstable();

        let mut rng = rng::stream(config.seed, rng::STREAM_DATASET);
        let categories: Vec<SyntheticCategory> = (0..config.num_categories)
            .map(|id| {
                let domain = match config.scenario {
                    Scenario::CrossDomain if meta_test.contains(&id) => Domain::Shifted,
                    _ => Domain::Primary,
                };
                SyntheticCategory {
                    id,
                    name_token: first_name + id,
                    prototype: (0..pixels)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect(),
                    render_noise: config.render_noise,
                    domain,
                }
            })
            .collect();

        let mut samples = Vec::with_capacity(config.num_categories * config.samples_per_category);
        let mut by_category = vec![Vec::new(); config.num_categories];
        for cat in &categories {
            let mut caption: TokenSeq = cat
                .domain
                .template()
                .iter()
                .map(|w| vocab.word(w))
                .collect();
            caption.push(cat.name_token);
            for _ in 0..config.samples_per_category {
                let image = cat
                    .prototype
                    .iter()
                    .map(|&p| {
                        cat.domain
                            .render(p, cat.render_noise, StandardNormal.sample(&mut rng))
                    })
                    .collect();
                let id = samples.len();
                by_category[cat.id].push(id);
                samples.push(SyntheticSample {
                    id,
                    category: cat.id,
                    image,
                    caption: caption.clone(),
                });
            }
        }

        Ok(Dataset {
            config: config.clone(),
            vocab,
            categories,
            samples,
            split: MetaSplit {
                meta_train,
                meta_test,
                scenario: config.scenario,
            },
            by_category,
        })
    }

    pub fn image_shape(&self) -> ImageShape {
        self.config.image()
    }

    pub fn category_of_token(&self, token: usize) -> Option<usize> {
        self.categories
            .iter()
            .find(|c| c.name_token == token)
            .map(|c| c.id)
    }

    /// Every sample of a partition's categories, in id order.
    pub fn partition_samples(&self, partition: Partition) -> Vec<&SyntheticSample> {
        let cats = self.split.categories(partition);
        self.samples
            .iter()
            .filter(|s| cats.contains(&s.category))
            .collect()
    }

    /// One-line-per-category text summary.
    pub fn manifest(&self) -> String {
        let mut out = format!(
            "# categories={} meta_train={} meta_test={} samples_per_category={} scenario={:?} seed={}\n",
            self.categories.len(),
            self.split.meta_train.len(),
            self.split.meta_test.len(),
            self.config.samples_per_category,
            self.config.scenario,
            self.config.seed
        );
        out.push_str("category\tname\tpartition\tdomain\tsamples\n");
        for c in &self.categories {
            let part = if self.split.meta_test.contains(&c.id) {
                "meta_test"
            } else {
                "meta_train"
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{:?}\t{}\n",
                c.id,
                self.vocab.words()[c.name_token],
                part,
                c.domain,
                self.by_category[c.id].len()
            ));
        }
        out
    }
}
