use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodes::{vocab, DataConfig, EpisodeConfig, TaskKind};
use crate::error::{Error, Result};
use crate::eval::GenerationConfig;
use crate::hash;
use crate::meta::MetaConfig;
use crate::model::{BackboneConfig, MapperConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub adaptation_steps: usize,
    pub task_induction: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            episodes: 200,
            adaptation_steps: 5,
            task_induction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub meta_updates: u64,
    /// Write a checkpoint every this many updates (0 disables periodic ones).
    pub checkpoint_every: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            meta_updates: 2000,
            checkpoint_every: 500,
        }
    }
}

/// Three independent seeds so evaluation noise can be measured with the
/// data and training held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 11,
            train: 1,
            eval: 3,
        }
    }
}

/// Everything that determines a run. Every key is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub mapper: MapperConfig,
    pub meta: MetaConfig,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub evaluation: EvaluationConfig,
    pub generation: GenerationConfig,
    pub budget: BudgetConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        ExperimentConfig {
            backbone: BackboneConfig {
                vocab_size: data.vocab_size(),
                ..BackboneConfig::default()
            },
            mapper: MapperConfig::default(),
            meta: MetaConfig::default(),
            data,
            episode: EpisodeConfig::default(),
            evaluation: EvaluationConfig::default(),
            generation: GenerationConfig::default(),
            budget: BudgetConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

fn key_paths(value: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            if v.is_table() {
                key_paths(v, &path, out);
            } else {
                out.insert(path);
            }
        }
    }
}

/// The fixed key set, as dotted paths.
pub fn known_keys() -> BTreeSet<String> {
    let value =
        toml::Value::try_from(ExperimentConfig::default()).expect("default config serializes");
    let mut keys = BTreeSet::new();
    key_paths(&value, "", &mut keys);
    keys
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        let mut present = BTreeSet::new();
        key_paths(&value, "", &mut present);
        let known = known_keys();
        let mut problems: Vec<String> = known
            .difference(&present)
            .map(|k| format!("missing required key `{k}`"))
            .collect();
        problems.extend(
            present
                .difference(&known)
                .map(|k| format!("unknown key `{k}`")),
        );
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut config: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        config.data.seed = config.seeds.data;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `data=1,train=2,eval=3` style overrides (any subset).
    pub fn apply_seed_overrides(&mut self, spec: &str) -> Result<()> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("seed override `{part}` is not key=value")))?;
            let value: u64 = value.trim().parse().map_err(|_| {
                Error::config(format!("seed override `{part}` needs an unsigned integer"))
            })?;
            match key.trim() {
                "data" => self.seeds.data = value,
                "train" => self.seeds.train = value,
                "eval" => self.seeds.eval = value,
                other => {
                    return Err(Error::config(format!(
                        "unknown seed `{other}` (expected data, train or eval)"
                    )))
                }
            }
        }
        self.data.seed = self.seeds.data;
        Ok(())
    }

    /// Cross-section checks; lists every offending key.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.backbone.validate(&mut problems);
        self.mapper.validate(self.backbone.d_e, &mut problems);
        self.meta.validate(&mut problems);
        self.episode.validate(&mut problems);
        self.generation.validate(&mut problems);
        self.data.validate(self.episode.ways, &mut problems);
        let expected = vocab::vocab_size_for(self.data.num_categories);
        if self.backbone.vocab_size != expected {
            problems.push(format!(
                "backbone.vocab_size = {} but data.num_categories = {} needs {expected}",
                self.backbone.vocab_size, self.data.num_categories
            ));
        }
        if self.data.samples_per_category < self.episode.shots + self.episode.queries_per_way {
            problems.push(format!(
                "data.samples_per_category = {} is below episode.shots + episode.queries_per_way",
                self.data.samples_per_category
            ));
        }
        let longest = self.longest_sequence();
        if longest > self.backbone.context {
            problems.push(format!(
                "backbone.context = {} is shorter than the longest sequence ({longest})",
                self.backbone.context
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Prefix plus the longest teacher-forced or generated token block.
    pub fn longest_sequence(&self) -> usize {
        let caption = 4;
        let question = match self.episode.task_kind {
            TaskKind::Captioning => 0,
            TaskKind::Vqa => 5,
        };
        let induction = 2 * self.episode.ways + 1;
        let generated = self.generation.max_new_tokens.max(caption);
        self.mapper.prefix_len + 1 + induction + question + generated + 1
    }

    /// Digest of the whole configuration.
    pub fn hash(&self) -> String {
        hash::digest(self)
    }

    /// Digest of what determines trained parameters: evaluation settings and
    /// the eval seed may change without invalidating a checkpoint.
    pub fn training_hash(&self) -> String {
        hash::digest(&(
            &self.backbone,
            &self.mapper,
            &self.meta,
            &self.data,
            &self.episode,
            self.seeds.data,
            self.seeds.train,
        ))
    }
}
