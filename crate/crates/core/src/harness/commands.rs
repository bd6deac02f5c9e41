//! The four commands behind the `mmeta` binary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::{run_suite, Checkpoint, Experiment, ExperimentConfig, Suite, TrainMode};
use crate::episodes::{container, Dataset};
use crate::error::{Error, Result};
use crate::eval::{csv_table, EvalReport};
use crate::meta::{LogRecord, TrainState};
use crate::real::Real;

pub const DATASET_FILE: &str = "dataset.mmds";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Serialize)]
struct HashedRecord<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a LogRecord,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Fails if a command changed any frozen weight.
fn check_frozen<R: Real>(exp: &Experiment<R>, before: &str) -> Result<()> {
    let after = exp.frozen_checksum();
    if after != before {
        return Err(Error::Contract(format!(
            "frozen weights changed: {before} -> {after}"
        )));
    }
    log::info!("frozen checksum unchanged: {after}");
    Ok(())
}

fn load_dataset(config: &ExperimentConfig, path: Option<&Path>) -> Result<Arc<Dataset>> {
    match path {
        Some(p) => Ok(Arc::new(container::load(p)?)),
        None => {
            log::info!("no dataset given; regenerating it from the config");
            Ok(Arc::new(Dataset::generate(&config.data)?))
        }
    }
}

/// Writes the dataset container (and its manifest next to it).
pub fn generate_data(config: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    config.validate()?;
    let dataset = Dataset::generate(&config.data)?;
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    container::save(&dataset, out)?;
    log::info!(
        "{} categories ({} meta-train, {} meta-test), {} samples -> {}",
        dataset.categories.len(),
        dataset.split.meta_train.len(),
        dataset.split.meta_test.len(),
        dataset.samples.len(),
        out.display()
    );
    Ok(dataset)
}

pub struct TrainOutcome<R: Real> {
    pub checkpoint: Checkpoint<R>,
    pub log: Vec<LogRecord>,
}

/// Trains to the config's budget, starting fresh or from `resume`.
///
/// `interrupt_after` stops early after that many total updates, as if the
/// process had been killed right after a checkpoint.
pub fn train<R: Real>(
    config: &ExperimentConfig,
    dataset: &Path,
    mode: TrainMode,
    resume: Option<&Path>,
    out_dir: &Path,
    interrupt_after: Option<u64>,
) -> Result<TrainOutcome<R>> {
    ensure_dir(out_dir)?;
    let exp = Experiment::<R>::new(config.clone(), load_dataset(config, Some(dataset))?)?;
    let frozen = exp.frozen_checksum();
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::<R>::load(path)?;
            check_compatible(&exp, &ck)?;
            if ck.mode != mode {
                return Err(Error::Compatibility(format!(
                    "checkpoint was trained {}, resume requested {}",
                    ck.mode.name(),
                    mode.name()
                )));
            }
            log::info!("resuming from step {}", ck.state.meta_step);
            ck.state
        }
        None => exp.initial_state(),
    };
    let budget = config.budget.meta_updates;
    let stop = interrupt_after.map_or(budget, |s| s.min(budget));
    let hash = config.hash();
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)?;
    let snapshot = |state: &TrainState<R>| Checkpoint {
        config: config.clone(),
        mode,
        precision: R::NAME.to_string(),
        frozen_checksum: frozen.clone(),
        state: state.clone(),
    };
    let every = config.budget.checkpoint_every;
    let progress = (budget / 20).max(1);
    let log = exp.train(mode, &mut state, stop, &mut |s, record| {
        let line = serde_json::to_string(&HashedRecord {
            config_hash: &hash,
            record,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log_file, "{line}")?;
        if every > 0 && s.meta_step % every == 0 {
            snapshot(s).save(&out_dir.join(format!("checkpoint-{:06}.mmck", s.meta_step)))?;
        }
        if s.meta_step % progress == 0 {
            log::info!(
                "step {}/{budget}: support {:.4} -> {:.4}, query {:.4}",
                s.meta_step,
                record.mean_support_loss_pre,
                record.mean_support_loss_post,
                record.mean_query_loss
            );
        }
        Ok(())
    })?;
    let checkpoint = snapshot(&state);
    checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
    check_frozen(&exp, &frozen)?;
    Ok(TrainOutcome { checkpoint, log })
}

fn check_compatible<R: Real>(exp: &Experiment<R>, ck: &Checkpoint<R>) -> Result<()> {
    if ck.config.training_hash() != exp.config.training_hash() {
        return Err(Error::Compatibility(format!(
            "checkpoint was trained under config {} (training digest {}), this config has training digest {}",
            ck.config.hash(),
            ck.config.training_hash(),
            exp.config.training_hash()
        )));
    }
    if ck.frozen_checksum != exp.frozen_checksum() {
        return Err(Error::Compatibility(
            "checkpoint frozen-weight checksum does not match the backbones".into(),
        ));
    }
    Ok(())
}

/// Runs suites against a checkpoint and writes `<suite>.jsonl` and
/// `<suite>.csv` for each. Returns the reports per suite.
pub fn evaluate<R: Real>(
    config: &ExperimentConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    suites: &[Suite],
    out_dir: &Path,
) -> Result<Vec<(Suite, Vec<EvalReport>)>> {
    ensure_dir(out_dir)?;
    let exp = Experiment::<R>::new(config.clone(), load_dataset(config, dataset)?)?;
    let frozen = exp.frozen_checksum();
    let ck = Checkpoint::<R>::load(checkpoint)?;
    check_compatible(&exp, &ck)?;
    let hash = config.hash();
    let mut out = Vec::new();
    for &suite in suites {
        log::info!("suite {}", suite.name());
        let reports = run_suite(&exp, &ck.state, suite)?;
        let mut jsonl = String::new();
        for r in &reports {
            jsonl.push_str(&r.to_jsonl(&hash)?);
        }
        fs::write(out_dir.join(format!("{}.jsonl", suite.name())), jsonl)?;
        fs::write(
            out_dir.join(format!("{}.csv", suite.name())),
            csv_table(&reports, &hash),
        )?;
        out.push((suite, reports));
    }
    check_frozen(&exp, &frozen)?;
    Ok(out)
}

/// Default output path of `generate-data`.
pub fn dataset_path(out_dir: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| out_dir.join(DATASET_FILE), Path::to_path_buf)
}
