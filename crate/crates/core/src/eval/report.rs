use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalSpec;
use crate::episodes::{Dataset, Scenario, TaskKind};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub answer: String,
    pub generated: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub generations: Vec<GenerationRecord>,
}

impl EpisodeResult {
    pub fn new(episode: u64, generations: Vec<GenerationRecord>) -> Self {
        let correct = generations.iter().filter(|g| g.correct).count();
        let total = generations.len();
        EpisodeResult {
            episode,
            correct,
            total,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            generations,
        }
    }
}

/// The settings a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub label: String,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_way: usize,
    pub repeats: usize,
    pub adaptation_steps: usize,
    pub scenario: Scenario,
    pub task_kind: TaskKind,
    pub task_induction: bool,
    pub seed: u64,
}

impl EvalEcho {
    pub fn new(spec: &EvalSpec, dataset: &Dataset) -> Self {
        EvalEcho {
            label: spec.label.clone(),
            ways: spec.episode.ways,
            shots: spec.episode.shots,
            queries_per_way: spec.episode.queries_per_way,
            repeats: spec.episode.repeats,
            adaptation_steps: spec.adaptation_steps,
            scenario: dataset.config.scenario,
            task_kind: spec.episode.task_kind,
            task_induction: spec.task_induction,
            seed: spec.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalEcho,
    pub episodes: Vec<EpisodeResult>,
    pub mean_accuracy: f64,
    /// Standard error of the mean over episodes.
    pub stderr: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    record: &'static str,
    config_hash: &'a str,
    config: &'a EvalEcho,
    episodes: usize,
    mean_accuracy: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    record: &'static str,
    config_hash: &'a str,
    label: &'a str,
    #[serde(flatten)]
    result: &'a EpisodeResult,
}

pub const CSV_HEADER: &str =
    "config_hash,label,ways,shots,queries_per_way,repeats,adaptation_steps,scenario,task_kind,task_induction,episodes,accuracy,stderr";

impl EvalReport {
    pub fn new(config: EvalEcho, episodes: Vec<EpisodeResult>) -> Self {
        let (mean_accuracy, stderr) =
            mean_and_stderr(&episodes.iter().map(|e| e.accuracy).collect::<Vec<_>>());
        EvalReport {
            config,
            episodes,
            mean_accuracy,
            stderr,
        }
    }

    /// One JSON line per episode, then one summary line.
    pub fn to_jsonl(&self, config_hash: &str) -> Result<String> {
        let mut out = String::new();
        for e in &self.episodes {
            let line = EpisodeLine {
                record: "episode",
                config_hash,
                label: &self.config.label,
                result: e,
            };
            out.push_str(
                &serde_json::to_string(&line).map_err(|e| crate::Error::Format(e.to_string()))?,
            );
            out.push('\n');
        }
        let summary = Summary {
            record: "summary",
            config_hash,
            config: &self.config,
            episodes: self.episodes.len(),
            mean_accuracy: self.mean_accuracy,
            stderr: self.stderr,
        };
        out.push_str(
            &serde_json::to_string(&summary).map_err(|e| crate::Error::Format(e.to_string()))?,
        );
        out.push('\n');
        Ok(out)
    }

    /// A row for the flat table (no trailing newline).
    pub fn csv_row(&self, config_hash: &str) -> String {
        let c = &self.config;
        let mut row = String::new();
        let _ = write!(
            row,
            "{config_hash},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
            c.label,
            c.ways,
            c.shots,
            c.queries_per_way,
            c.repeats,
            c.adaptation_steps,
            serde_plain(&c.scenario),
            serde_plain(&c.task_kind),
            c.task_induction,
            self.episodes.len(),
            self.mean_accuracy,
            self.stderr
        );
        row
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Flat table with a header row.
pub fn csv_table(reports: &[EvalReport], config_hash: &str) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row(config_hash));
        out.push('\n');
    }
    out
}
