//! Versioned binary checkpoint: header, the embedded configuration, then
//! named θ arrays and optimizer moments. Frozen weights are not stored; they
//! are rebuilt from the backbone seed and verified by checksum.

use std::path::Path;

use super::config::ExperimentConfig;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::meta::{AdamW, TrainState};
use crate::model::{Array, NamedArrays};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Episodic,
    Nonepisodic,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Episodic => "episodic",
            TrainMode::Nonepisodic => "nonepisodic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "episodic" => Ok(TrainMode::Episodic),
            "nonepisodic" => Ok(TrainMode::Nonepisodic),
            other => Err(Error::config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<R: Real> {
    pub config: ExperimentConfig,
    pub mode: TrainMode,
    pub precision: String,
    pub frozen_checksum: String,
    pub state: TrainState<R>,
}

fn write_arrays<R: Real>(w: &mut Writer, arrays: &NamedArrays<R>) {
    w.len(arrays.len());
    for (name, a) in arrays.iter() {
        w.str(name);
        w.usizes(&a.shape);
        let values: Vec<f64> = a.data.iter().map(|v| v.f64()).collect();
        w.f64s(&values);
    }
}

fn read_arrays<R: Real>(r: &mut Reader<'_>) -> Result<NamedArrays<R>> {
    let n = r.len()?;
    let mut out = NamedArrays::new();
    for _ in 0..n {
        let name = r.str()?;
        let shape = r.usizes()?;
        let data: Vec<R> = r.f64s()?.into_iter().map(R::of).collect();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "array `{name}` has {} values for shape {shape:?}",
                data.len()
            )));
        }
        out.insert(&name, Array::new(shape, data));
    }
    Ok(out)
}

impl<R: Real> Checkpoint<R> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.hash());
        w.str(&self.config.training_hash());
        w.str(&self.config.to_toml());
        w.str(self.mode.name());
        w.str(&self.precision);
        w.str(&self.frozen_checksum);
        w.u64(self.config.seeds.data);
        w.u64(self.config.seeds.train);
        // Episode streams are positional: the meta-step is their whole state.
        w.u64(self.state.meta_step);
        write_arrays(&mut w, &self.state.theta);
        let opt = &self.state.optimizer;
        w.f64(opt.lr);
        w.f64(opt.beta1);
        w.f64(opt.beta2);
        w.f64(opt.eps);
        w.f64(opt.weight_decay);
        w.u64(opt.step);
        write_arrays(&mut w, &opt.m);
        write_arrays(&mut w, &opt.v);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hash = r.str()?;
        let training_hash = r.str()?;
        let config = ExperimentConfig::from_toml(&r.str()?)?;
        if config.hash() != hash || config.training_hash() != training_hash {
            return Err(Error::Format(
                "checkpoint header hash does not match its embedded config".into(),
            ));
        }
        let mode = TrainMode::parse(&r.str()?)?;
        let precision = r.str()?;
        if precision != R::NAME {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {precision} parameters, {} requested",
                R::NAME
            )));
        }
        let frozen_checksum = r.str()?;
        let (data_seed, train_seed) = (r.u64()?, r.u64()?);
        if (data_seed, train_seed) != (config.seeds.data, config.seeds.train) {
            return Err(Error::Format(
                "checkpoint seeds disagree with its config".into(),
            ));
        }
        let meta_step = r.u64()?;
        let theta = read_arrays(&mut r)?;
        let mut optimizer = AdamW::new(&theta, 0.0, 0.0);
        optimizer.lr = r.f64()?;
        optimizer.beta1 = r.f64()?;
        optimizer.beta2 = r.f64()?;
        optimizer.eps = r.f64()?;
        optimizer.weight_decay = r.f64()?;
        optimizer.step = r.u64()?;
        optimizer.m = read_arrays(&mut r)?;
        optimizer.v = read_arrays(&mut r)?;
        theta.check_layout(&optimizer.m)?;
        theta.check_layout(&optimizer.v)?;
        r.finish()?;
        Ok(Checkpoint {
            config,
            mode,
            precision,
            frozen_checksum,
            state: TrainState {
                theta,
                optimizer,
                meta_step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
