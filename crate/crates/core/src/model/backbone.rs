//! Frozen stand-ins for the pretrained vision encoder and language model.
//!
//! Both networks are drawn once from a seed and never change afterwards.
//! Their weights are shared read-only buffers, so forward passes on any
//! thread can wrap them as graph constants without copying.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mapper::{block_mask, masked_attention};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

pub const LN_EPS: f64 = 1e-5;
const TOKEN_STD: f64 = 1.0;
const POSITION_STD: f64 = 0.5;
/// Scale of the output head over `1/sqrt(d_e)`. A pretrained LM is sharp;
/// with unit-variance logits a short prefix can barely move the argmax.
const HEAD_GAIN: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Visual feature width.
    pub d_v: usize,
    /// Language embedding width.
    pub d_e: usize,
    /// Number of visual feature vectors per image.
    pub n_features: usize,
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Maximum length of the `[prefix; tokens]` sequence.
    pub context: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_v: 32,
            d_e: 48,
            n_features: 4,
            vocab_size: 64,
            layers: 2,
            heads: 2,
            ff_width: 96,
            context: 32,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        let positive = [
            ("backbone.d_v", self.d_v),
            ("backbone.d_e", self.d_e),
            ("backbone.n_features", self.n_features),
            ("backbone.vocab_size", self.vocab_size),
            ("backbone.layers", self.layers),
            ("backbone.heads", self.heads),
            ("backbone.ff_width", self.ff_width),
            ("backbone.context", self.context),
        ];
        for (key, v) in positive {
            if v == 0 {
                problems.push(format!("{key} must be positive"));
            }
        }
        if self.heads > 0 && self.d_e % self.heads != 0 {
            problems.push("backbone.heads must divide backbone.d_e".into());
        }
    }
}

/// Height × width × channels of the synthetic images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn normal_vec<R: Real>(rng: &mut rng::Rng, len: usize, std: f64) -> Arc<Vec<R>> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Arc::new((0..len).map(|_| R::of(dist.sample(rng))).collect())
}

fn constant<R: Real>(data: &Arc<Vec<R>>, shape: &[usize]) -> Tensor<R> {
    Tensor::shared(Arc::clone(data), shape).expect("frozen buffer matches shape")
}

/// Patch-grid linear encoder: the image is cut into `rows × cols` patches
/// and each flattened patch is projected to a `d_v` feature.
#[derive(Debug, Clone)]
pub struct VisionEncoder<R: Real> {
    image: ImageShape,
    grid: (usize, usize),
    d_v: usize,
    weight: Arc<Vec<R>>,
    bias: Arc<Vec<R>>,
}

impl<R: Real> VisionEncoder<R> {
    pub fn new(cfg: &BackboneConfig, image: ImageShape) -> Result<Self> {
        let n = cfg.n_features;
        let rows = (1..=n)
            .filter(|r| n % r == 0 && r * r <= n)
            .max()
            .unwrap_or(1);
        let cols = n / rows;
        if image.height % rows != 0 || image.width % cols != 0 {
            return Err(Error::config(format!(
                "a {rows}x{cols} patch grid (backbone.n_features = {n}) does not tile a {}x{} image",
                image.height, image.width
            )));
        }
        let patch = (image.height / rows) * (image.width / cols) * image.channels;
        let mut rng = rng::stream(cfg.seed, rng::STREAM_FROZEN_ENCODER);
        Ok(VisionEncoder {
            image,
            grid: (rows, cols),
            d_v: cfg.d_v,
            weight: normal_vec(&mut rng, patch * cfg.d_v, 1.0 / (patch as f64).sqrt()),
            bias: Arc::new(vec![R::zero(); cfg.d_v]),
        })
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image
    }

    pub fn n_features(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    /// Projection `[patch_len, d_v]` and bias `[d_v]`.
    pub fn weights(&self) -> (&[R], &[R]) {
        (&self.weight, &self.bias)
    }

    pub fn patch_len(&self) -> usize {
        (self.image.height / self.grid.0) * (self.image.width / self.grid.1) * self.image.channels
    }

    /// Flattened patches, one row per feature position.
    fn patches(&self, image: &[R]) -> Vec<R> {
        let ImageShape {
            width, channels, ..
        } = self.image;
        let ph = self.image.height / self.grid.0;
        let pw = width / self.grid.1;
        let mut out = Vec::with_capacity(image.len());
        for gr in 0..self.grid.0 {
            for gc in 0..self.grid.1 {
                for y in gr * ph..(gr + 1) * ph {
                    let start = (y * width + gc * pw) * channels;
                    out.extend_from_slice(&image[start..start + pw * channels]);
                }
            }
        }
        out
    }

    /// `n × d_v` features of an `H×W×C` image (row-major, channel last).
    pub fn encode(&self, image: &[R]) -> Result<Vec<R>> {
        if image.len() != self.image.len() {
            return Err(crate::autodiff::TensorError::Dimension {
                op: "encode_image",
                lhs: vec![self.image.height, self.image.width, self.image.channels],
                rhs: vec![image.len()],
            }
            .into());
        }
        let n = self.n_features();
        let patches = self.patches(image);
        let k = self.patch_len();
        let mut out = vec![R::zero(); n * self.d_v];
        for i in 0..n {
            let row = &mut out[i * self.d_v..(i + 1) * self.d_v];
            row.copy_from_slice(&self.bias);
            for p in 0..k {
                let x = patches[i * k + p];
                for (o, &w) in row
                    .iter_mut()
                    .zip(&self.weight[p * self.d_v..(p + 1) * self.d_v])
                {
                    *o += x * w;
                }
            }
        }
        Ok(out)
    }

    /// Features as a graph constant of shape `[n, d_v]`.
    pub fn encode_tensor(&self, image: &[R]) -> Result<Tensor<R>> {
        Ok(Tensor::from_vec(
            self.encode(image)?,
            &[self.n_features(), self.d_v],
        )?)
    }

    fn buffers(&self) -> Vec<&Arc<Vec<R>>> {
        vec![&self.weight, &self.bias]
    }
}

/// Weights of one pre-norm decoder block, all row-major `[in, out]`.
#[derive(Debug, Clone)]
pub struct DecoderLayer<R: Real> {
    pub wq: Arc<Vec<R>>,
    pub wk: Arc<Vec<R>>,
    pub wv: Arc<Vec<R>>,
    pub wo: Arc<Vec<R>>,
    pub w1: Arc<Vec<R>>,
    pub b1: Arc<Vec<R>>,
    pub w2: Arc<Vec<R>>,
    pub b2: Arc<Vec<R>>,
}

/// Frozen embedder plus causal pre-norm transformer decoder with learned
/// absolute positions over the `[prefix; tokens]` sequence.
#[derive(Debug, Clone)]
pub struct LanguageModel<R: Real> {
    d_e: usize,
    vocab: usize,
    heads: usize,
    ff: usize,
    context: usize,
    embedding: Arc<Vec<R>>,
    positions: Arc<Vec<R>>,
    layers: Vec<DecoderLayer<R>>,
    head: Arc<Vec<R>>,
}

impl<R: Real> LanguageModel<R> {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, rng::STREAM_FROZEN_LM);
        let d = cfg.d_e;
        let proj_std = 1.0 / (d as f64).sqrt();
        let embedding = normal_vec(&mut rng, cfg.vocab_size * d, TOKEN_STD);
        let positions = normal_vec(&mut rng, cfg.context * d, POSITION_STD);
        let layers = (0..cfg.layers)
            .map(|_| DecoderLayer {
                wq: normal_vec(&mut rng, d * d, proj_std),
                wk: normal_vec(&mut rng, d * d, proj_std),
                wv: normal_vec(&mut rng, d * d, proj_std),
                wo: normal_vec(&mut rng, d * d, proj_std),
                w1: normal_vec(&mut rng, d * cfg.ff_width, proj_std),
                b1: Arc::new(vec![R::zero(); cfg.ff_width]),
                w2: normal_vec(
                    &mut rng,
                    cfg.ff_width * d,
                    1.0 / (cfg.ff_width as f64).sqrt(),
                ),
                b2: Arc::new(vec![R::zero(); d]),
            })
            .collect();
        let head = normal_vec(&mut rng, d * cfg.vocab_size, HEAD_GAIN * proj_std);
        LanguageModel {
            d_e: d,
            vocab: cfg.vocab_size,
            heads: cfg.heads,
            ff: cfg.ff_width,
            context: cfg.context,
            embedding,
            positions,
            layers,
            head,
        }
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn ff_width(&self) -> usize {
        self.ff
    }

    /// Read-only views of the frozen weights: token embeddings
    /// `[vocab, d_e]`, positions `[context, d_e]`, blocks, head `[d_e, vocab]`.
    pub fn weights(&self) -> (&[R], &[R], &[DecoderLayer<R>], &[R]) {
        (&self.embedding, &self.positions, &self.layers, &self.head)
    }

    pub fn embedding_matrix(&self) -> Tensor<R> {
        constant(&self.embedding, &[self.vocab, self.d_e])
    }

    /// Row-gather from the frozen embedding table.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor<R>> {
        Ok(self.embedding_matrix().gather_rows(tokens)?)
    }

    /// Next-token logits at every position of `[prefix; tokens]`.
    pub fn forward_logits(&self, prefix: &Tensor<R>, tokens: &Tensor<R>) -> Result<Tensor<R>> {
        let d = self.d_e;
        for t in [prefix, tokens] {
            if t.rank() != 2 || t.shape()[1] != d {
                return Err(crate::autodiff::TensorError::Dimension {
                    op: "forward_logits",
                    lhs: t.shape().to_vec(),
                    rhs: vec![d],
                }
                .into());
            }
        }
        let len = prefix.shape()[0] + tokens.shape()[0];
        if len > self.context {
            return Err(Error::Capacity {
                len,
                limit: self.context,
            });
        }
        let positions = Tensor::from_vec(self.positions[..len * d].to_vec(), &[len, d])?;
        let x = Tensor::concat(&[prefix.clone(), tokens.clone()], 0)?.add(&positions)?;
        self.decode(x, &block_mask::<R>(&[len], true))
    }

    /// Several `[prefix_i; tokens_i]` sequences decoded in one packed pass.
    ///
    /// `prefixes` stacks `S` prefixes of `prefix_len` rows; `tokens` stacks
    /// the token blocks whose lengths are `lengths`. Output rows are ordered
    /// `[prefix_1; tokens_1; prefix_2; …]`.
    pub fn forward_packed(
        &self,
        prefixes: &Tensor<R>,
        prefix_len: usize,
        tokens: &Tensor<R>,
        lengths: &[usize],
    ) -> Result<Tensor<R>> {
        let d = self.d_e;
        let s = lengths.len();
        let total: usize = lengths.iter().sum();
        if prefixes.shape() != [s * prefix_len, d] || tokens.shape() != [total, d] {
            return Err(crate::autodiff::TensorError::Dimension {
                op: "forward_packed",
                lhs: prefixes.shape().to_vec(),
                rhs: tokens.shape().to_vec(),
            }
            .into());
        }
        if let Some(&longest) = lengths.iter().max() {
            if prefix_len + longest > self.context {
                return Err(Error::Capacity {
                    len: prefix_len + longest,
                    limit: self.context,
                });
            }
        }
        let blocks: Vec<usize> = lengths.iter().map(|t| prefix_len + t).collect();
        let mut rows = Vec::with_capacity(s * prefix_len + total);
        let mut pos = Vec::with_capacity((s * prefix_len + total) * d);
        let mut offset = s * prefix_len;
        for (i, &t) in lengths.iter().enumerate() {
            rows.extend(i * prefix_len..(i + 1) * prefix_len);
            rows.extend(offset..offset + t);
            offset += t;
            pos.extend_from_slice(&self.positions[..(prefix_len + t) * d]);
        }
        let packed = Tensor::concat(&[prefixes.clone(), tokens.clone()], 0)?.gather_rows(&rows)?;
        let positions = Tensor::from_vec(pos, &[rows.len(), d])?;
        self.decode(packed.add(&positions)?, &block_mask::<R>(&blocks, true))
    }

    fn decode(&self, mut x: Tensor<R>, mask: &Tensor<R>) -> Result<Tensor<R>> {
        let d = self.d_e;
        let eps = R::of(LN_EPS);
        let dh = d / self.heads;
        let scale = R::of(1.0 / (dh as f64).sqrt());
        for layer in &self.layers {
            let h = x.layer_norm(eps);
            let q = h.matmul(&constant(&layer.wq, &[d, d]))?;
            let k = h.matmul(&constant(&layer.wk, &[d, d]))?;
            let v = h.matmul(&constant(&layer.wv, &[d, d]))?;
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                heads.push(masked_attention(
                    &q.slice(1, hd * dh, dh)?,
                    &k.slice(1, hd * dh, dh)?,
                    &v.slice(1, hd * dh, dh)?,
                    scale,
                    Some(mask),
                )?);
            }
            let attn = Tensor::concat(&heads, 1)?.matmul(&constant(&layer.wo, &[d, d]))?;
            x = x.add(&attn)?;
            let h = x.layer_norm(eps);
            let hidden = h
                .matmul(&constant(&layer.w1, &[d, self.ff]))?
                .add_bcast(&constant(&layer.b1, &[1, self.ff]))?
                .gelu();
            let mlp = hidden
                .matmul(&constant(&layer.w2, &[self.ff, d]))?
                .add_bcast(&constant(&layer.b2, &[1, d]))?;
            x = x.add(&mlp)?;
        }
        Ok(x.layer_norm(eps)
            .matmul(&constant(&self.head, &[d, self.vocab]))?)
    }

    fn buffers(&self) -> Vec<&Arc<Vec<R>>> {
        let mut out = vec![&self.embedding, &self.positions];
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.push(&self.head);
        out
    }
}

/// The frozen encoder and language model, shared read-only.
#[derive(Debug, Clone)]
pub struct Backbones<R: Real> {
    pub config: BackboneConfig,
    pub encoder: VisionEncoder<R>,
    pub lm: LanguageModel<R>,
}

impl<R: Real> Backbones<R> {
    pub fn new(cfg: &BackboneConfig, image: ImageShape) -> Result<Self> {
        let mut problems = Vec::new();
        cfg.validate(&mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Backbones {
            config: cfg.clone(),
            encoder: VisionEncoder::new(cfg, image)?,
            lm: LanguageModel::new(cfg),
        })
    }

    /// SHA-256 over every frozen value, encoder first.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for buf in self.encoder.buffers().into_iter().chain(self.lm.buffers()) {
            for v in buf.iter() {
                hasher.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn frozen_parameter_count(&self) -> usize {
        self.encoder
            .buffers()
            .into_iter()
            .chain(self.lm.buffers())
            .map(|b| b.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad, gradcheck};

    fn image() -> ImageShape {
        ImageShape {
            height: 8,
            width: 8,
            channels: 3,
        }
    }

    fn backbones() -> Backbones<f64> {
        Backbones::new(&BackboneConfig::default(), image()).unwrap()
    }

    #[test]
    fn zero_image_encodes_to_zero() {
        let b = backbones();
        let feats = b.encoder.encode(&vec![0.0; image().len()]).unwrap();
        assert_eq!(feats.len(), 4 * 32);
        assert!(feats.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic_and_shape_checked() {
        let b = backbones();
        let img: Vec<f64> = (0..image().len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        assert_eq!(
            b.encoder.encode(&img).unwrap(),
            b.encoder.encode(&img).unwrap()
        );
        assert!(b.encoder.encode(&img[1..]).is_err());
    }

    #[test]
    fn patch_grid_must_tile_image() {
        let cfg = BackboneConfig {
            n_features: 3,
            ..BackboneConfig::default()
        };
        assert!(VisionEncoder::<f64>::new(&cfg, image()).is_err());
        let cfg = BackboneConfig {
            n_features: 1,
            ..BackboneConfig::default()
        };
        assert_eq!(
            VisionEncoder::<f64>::new(&cfg, image())
                .unwrap()
                .n_features(),
            1
        );
    }

    #[test]
    fn embed_tokens_edge_cases() {
        let b = backbones();
        let empty = b.lm.embed_tokens(&[]).unwrap();
        assert_eq!(empty.shape(), &[0, 48]);
        let bos = b.lm.embed_tokens(&[1]).unwrap();
        assert_eq!(bos.data(), &b.lm.embedding[48..96]);
        assert!(b.lm.embed_tokens(&[64]).is_err());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let b = backbones();
        let table = b.lm.embedding[..6 * 48].to_vec();
        let err = gradcheck::check(
            |p| p[0].gather_rows(&[1, 4, 4, 0]).unwrap().tanh().sum(),
            &[(table, vec![6, 48])],
            1e-5,
        );
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn forward_is_causal() {
        let b = backbones();
        let prefix = Tensor::from_vec(
            (0..4 * 48).map(|i| (i as f64 * 0.1).cos()).collect(),
            &[4, 48],
        )
        .unwrap();
        let a =
            b.lm.forward_logits(&prefix, &b.lm.embed_tokens(&[1, 5, 6, 7]).unwrap())
                .unwrap();
        let c =
            b.lm.forward_logits(&prefix, &b.lm.embed_tokens(&[1, 5, 7, 6]).unwrap())
                .unwrap();
        let v = 64;
        // Positions up to and including token index 1 (sequence index 5) see only [prefix, 1, 5].
        assert_eq!(&a.data()[..6 * v], &c.data()[..6 * v]);
        assert_ne!(&a.data()[6 * v..], &c.data()[6 * v..]);
    }

    #[test]
    fn empty_prefix_is_plain_language_model() {
        let b = backbones();
        let empty = Tensor::zeros(&[0, 48]);
        let logits =
            b.lm.forward_logits(&empty, &b.lm.embed_tokens(&[1, 3]).unwrap())
                .unwrap();
        assert_eq!(logits.shape(), &[2, 64]);
    }

    #[test]
    fn prefix_conditions_first_token_position() {
        let b = backbones();
        let toks = b.lm.embed_tokens(&[1, 3]).unwrap();
        let p1 =
            Tensor::from_vec((0..4 * 48).map(|i| (i as f64).sin()).collect(), &[4, 48]).unwrap();
        let p2 =
            Tensor::from_vec((0..4 * 48).map(|i| (i as f64).cos()).collect(), &[4, 48]).unwrap();
        let a = b.lm.forward_logits(&p1, &toks).unwrap();
        let c = b.lm.forward_logits(&p2, &toks).unwrap();
        assert_ne!(&a.data()[4 * 64..5 * 64], &c.data()[4 * 64..5 * 64]);
    }

    #[test]
    fn context_overflow_is_capacity_error() {
        let b = backbones();
        let prefix = Tensor::zeros(&[4, 48]);
        let toks = b.lm.embed_tokens(&vec![3; 29]).unwrap();
        assert!(matches!(
            b.lm.forward_logits(&prefix, &toks),
            Err(Error::Capacity { len: 33, limit: 32 })
        ));
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let b = backbones();
        let prefix = Tensor::param(vec![0.1; 4 * 48], &[4, 48]).unwrap();
        let emb = b.lm.embedding_matrix();
        let loss =
            b.lm.forward_logits(&prefix, &emb.gather_rows(&[1, 3]).unwrap())
                .unwrap()
                .sum();
        let before = b.checksum();
        let g = grad(&loss, &[prefix.clone(), emb.clone()], false).unwrap();
        assert!(g[0].data().iter().any(|&v| v != 0.0));
        assert!(g[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(before, b.checksum());
    }

    #[test]
    fn seed_determines_weights() {
        let a = backbones();
        let b = backbones();
        assert_eq!(a.checksum(), b.checksum());
        let cfg = BackboneConfig {
            seed: 8,
            ..BackboneConfig::default()
        };
        assert_ne!(
            a.checksum(),
            Backbones::<f64>::new(&cfg, image()).unwrap().checksum()
        );
    }
}
