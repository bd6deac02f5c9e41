//! Frozen backbones, the trainable mapper, and the composed image-to-text model.

pub mod backbone;
pub mod mapper;
pub mod params;

use std::sync::Arc;

pub use backbone::{
    BackboneConfig, Backbones, DecoderLayer, ImageShape, LanguageModel, VisionEncoder,
};
pub use mapper::{MapperConfig, MapperSpec, MapperVariant, MetaMapper};
pub use params::{Array, NamedArrays, TensorMap};

use crate::autodiff::{cross_entropy, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub type TokenSeq = Vec<usize>;

/// One teacher-forced example: the model reads the image and `input`, and is
/// scored on `target` followed by EOS.
#[derive(Debug, Clone, Copy)]
pub struct TextSample<'a> {
    pub image: &'a [f64],
    pub input: &'a [usize],
    pub target: &'a [usize],
}

/// Frozen backbones composed with a mapper architecture. The meta-parameters
/// are passed in explicitly so adapted copies can share one model.
#[derive(Debug, Clone)]
pub struct Model<R: Real> {
    pub backbones: Arc<Backbones<R>>,
    pub mapper: MapperSpec,
}

impl<R: Real> Model<R> {
    pub fn new(backbones: Arc<Backbones<R>>, mapper: MapperConfig) -> Self {
        let spec = MapperSpec::new(mapper, backbones.config.d_v, backbones.config.d_e);
        Model {
            backbones,
            mapper: spec,
        }
    }

    pub fn init_theta(&self, seed: u64) -> NamedArrays<R> {
        self.mapper.init(seed)
    }

    pub fn encode_image(&self, image: &[f64]) -> Result<Tensor<R>> {
        let pixels: Vec<R> = image.iter().map(|&v| R::of(v)).collect();
        self.backbones.encoder.encode_tensor(&pixels)
    }

    pub fn prefix(&self, theta: &TensorMap<R>, image: &[f64]) -> Result<Tensor<R>> {
        self.mapper.forward(theta, &self.encode_image(image)?)
    }

    /// Logits for the token block only: row `j` predicts token `j + 1`.
    pub fn token_logits(&self, prefix: &Tensor<R>, tokens: &[usize]) -> Result<Tensor<R>> {
        let lm = &self.backbones.lm;
        let logits = lm.forward_logits(prefix, &lm.embed_tokens(tokens)?)?;
        Ok(logits.slice(0, prefix.shape()[0], tokens.len())?)
    }

    /// `(mean NLL over scored positions, scored position count)` for one sample.
    pub fn sample_loss(
        &self,
        theta: &TensorMap<R>,
        sample: &TextSample<'_>,
    ) -> Result<(Tensor<R>, usize)> {
        let mut tokens = Vec::with_capacity(sample.input.len() + sample.target.len() + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(sample.input);
        tokens.extend_from_slice(sample.target);
        tokens.push(EOS);
        let prefix = self.prefix(theta, sample.image)?;
        let steps = tokens.len() - 1;
        let logits = self.token_logits(&prefix, &tokens[..steps])?;
        let targets = &tokens[1..];
        let first_scored = sample.input.len();
        let mask: Vec<bool> = (0..steps).map(|j| j >= first_scored).collect();
        let count = steps - first_scored;
        Ok((cross_entropy(&logits, targets, &mask)?, count))
    }

    /// Mean cross-entropy over every scored target token of `samples`,
    /// computed in one packed pass.
    pub fn task_loss(&self, theta: &TensorMap<R>, samples: &[TextSample<'_>]) -> Result<Tensor<R>> {
        if samples.is_empty() {
            return Err(Error::Contract(
                "task_loss needs at least one sample".into(),
            ));
        }
        let features = samples
            .iter()
            .map(|s| self.encode_image(s.image))
            .collect::<Result<Vec<_>>>()?;
        let prefixes = self.mapper.forward_batch(theta, &features)?;
        let l = self.mapper.config.prefix_len;
        let mut inputs = Vec::new();
        let mut lengths = Vec::with_capacity(samples.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for s in samples {
            let mut tokens = Vec::with_capacity(s.input.len() + s.target.len() + 2);
            tokens.push(BOS);
            tokens.extend_from_slice(s.input);
            tokens.extend_from_slice(s.target);
            tokens.push(EOS);
            let steps = tokens.len() - 1;
            for j in s.input.len()..steps {
                rows.push(offset + l + j);
                targets.push(tokens[j + 1]);
            }
            inputs.extend_from_slice(&tokens[..steps]);
            lengths.push(steps);
            offset += l + steps;
        }
        let lm = &self.backbones.lm;
        let logits = lm.forward_packed(&prefixes, l, &lm.embed_tokens(&inputs)?, &lengths)?;
        let scored = logits.gather_rows(&rows)?;
        Ok(cross_entropy(
            &scored,
            &targets,
            &vec![true; targets.len()],
        )?)
    }
}
