//! Binary dataset container: a header (magic, version, config digest, seed,
//! image dims, vocabulary) followed by categories, the split, and one record
//! per sample. All integers little-endian.

use std::path::Path;

use super::dataset::{
    DataConfig, Dataset, Domain, MetaSplit, Scenario, SyntheticCategory, SyntheticSample,
};
use super::vocab::Vocabulary;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::hash;

const MAGIC: &[u8; 4] = b"MMDS";
pub const VERSION: u32 = 1;

fn scenario_code(s: Scenario) -> u8 {
    match s {
        Scenario::InDomain => 0,
        Scenario::CrossDomain => 1,
    }
}

fn domain_code(d: Domain) -> u8 {
    match d {
        Domain::Primary => 0,
        Domain::Shifted => 1,
    }
}

pub fn to_bytes(ds: &Dataset) -> Vec<u8> {
    let c = &ds.config;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&hash::digest(c));
    w.u64(c.seed);
    w.len(c.num_categories);
    w.len(c.num_test_categories);
    w.len(c.samples_per_category);
    w.len(c.image_height);
    w.len(c.image_width);
    w.len(c.image_channels);
    w.f64(c.render_noise);
    w.u8(scenario_code(c.scenario));
    w.len(ds.vocab.len());
    for word in ds.vocab.words() {
        w.str(word);
    }
    w.len(ds.categories.len());
    for cat in &ds.categories {
        w.len(cat.id);
        w.len(cat.name_token);
        w.u8(domain_code(cat.domain));
        w.f64(cat.render_noise);
        w.f64s(&cat.prototype);
    }
    w.usizes(&ds.split.meta_train);
    w.usizes(&ds.split.meta_test);
    w.len(ds.samples.len());
    for s in &ds.samples {
        w.len(s.id);
        w.len(s.category);
        w.usizes(&s.caption);
        w.f64s(&s.image);
    }
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "dataset container version {version}, expected {VERSION}"
        )));
    }
    let digest = r.str()?;
    let seed = r.u64()?;
    let num_categories = r.len()?;
    let num_test_categories = r.len()?;
    let samples_per_category = r.len()?;
    let image_height = r.len()?;
    let image_width = r.len()?;
    let image_channels = r.len()?;
    let render_noise = r.f64()?;
    let scenario = match r.u8()? {
        0 => Scenario::InDomain,
        1 => Scenario::CrossDomain,
        x => return Err(Error::Format(format!("unknown scenario code {x}"))),
    };
    let config = DataConfig {
        num_categories,
        num_test_categories,
        samples_per_category,
        image_height,
        image_width,
        image_channels,
        render_noise,
        scenario,
        seed,
    };
    if hash::digest(&config) != digest {
        return Err(Error::Format(
            "dataset header digest does not match its fields".into(),
        ));
    }
    let words = (0..r.len()?).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_words(words);
    let categories = (0..r.len()?)
        .map(|_| {
            Ok(SyntheticCategory {
                id: r.len()?,
                name_token: r.len()?,
                domain: match r.u8()? {
                    0 => Domain::Primary,
                    1 => Domain::Shifted,
                    x => return Err(Error::Format(format!("unknown domain code {x}"))),
                },
                render_noise: r.f64()?,
                prototype: r.f64s()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta_train = r.usizes()?;
    let meta_test = r.usizes()?;
    let samples = (0..r.len()?)
        .map(|_| {
            Ok(SyntheticSample {
                id: r.len()?,
                category: r.len()?,
                caption: r.usizes()?,
                image: r.f64s()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let mut by_category = vec![Vec::new(); categories.len()];
    for s in &samples {
        by_category
            .get_mut(s.category)
            .ok_or_else(|| Error::Format(format!("sample {} has unknown category", s.id)))?
            .push(s.id);
    }
    Ok(Dataset {
        config,
        vocab,
        categories,
        samples,
        split: MetaSplit {
            meta_train,
            meta_test,
            scenario,
        },
        by_category,
    })
}

/// Writes the container to `path` and the text manifest next to it
/// (`<path>.manifest.tsv`).
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ds))?;
    std::fs::write(manifest_path(path), ds.manifest())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.tsv");
    path.with_file_name(name)
}
