//! The trainable bridge between visual features and the language model:
//! learnable prefix seeds are prepended to the projected features and the
//! whole set goes through one self-attention block. The first `l` outputs
//! are the visual prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Array, NamedArrays, TensorMap};
use crate::autodiff::{Tensor, TensorError};
use crate::error::Result;
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperVariant {
    SelfAttention,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    /// Number of prefix vectors `l`.
    pub prefix_len: usize,
    pub heads: usize,
    pub variant: MapperVariant,
    /// Hidden width of the MLP variant.
    pub mlp_hidden: usize,
    /// Drops the `1/sqrt(d_head)` score scaling.
    pub unscaled_attention: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            prefix_len: 4,
            heads: 2,
            variant: MapperVariant::SelfAttention,
            mlp_hidden: 96,
            unscaled_attention: false,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self, d_e: usize, problems: &mut Vec<String>) {
        if self.heads == 0 || d_e % self.heads != 0 {
            problems.push("mapper.heads must be positive and divide backbone.d_e".into());
        }
        if self.variant == MapperVariant::Mlp && self.mlp_hidden == 0 {
            problems.push("mapper.mlp_hidden must be positive".into());
        }
    }
}

/// Architecture of a mapper: config plus the widths it bridges.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperSpec {
    pub config: MapperConfig,
    pub d_v: usize,
    pub d_e: usize,
}

pub const SEEDS: &str = "prefix_seeds";
const PROJ_W: &str = "input_proj.weight";
const PROJ_B: &str = "input_proj.bias";
const NORM_GAIN: &str = "norm.gain";
const NORM_BIAS: &str = "norm.bias";

fn xavier<R: Real>(rng: &mut rng::Rng, fan_in: usize, fan_out: usize) -> Array<R> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| R::of(rng.random_range(-a..a)))
        .collect();
    Array::new(vec![fan_in, fan_out], data)
}

/// `softmax(q kᵀ · scale) v` for one head.
pub fn attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    scale: R,
) -> Result<Tensor<R>> {
    masked_attention(q, k, v, scale, None)
}

/// [`attention`] with an additive score mask.
pub fn masked_attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    scale: R,
    mask: Option<&Tensor<R>>,
) -> Result<Tensor<R>> {
    let mut scores = q.matmul(&k.t()?)?.scale(scale);
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    Ok(scores.softmax_last().matmul(v)?)
}

/// Additive mask over packed blocks of the given sizes: rows attend only
/// within their own block (and only backwards when `causal`).
pub fn block_mask<R: Real>(blocks: &[usize], causal: bool) -> Tensor<R> {
    let len: usize = blocks.iter().sum();
    let blocked = R::of(-1e9);
    let mut data = vec![blocked; len * len];
    let mut start = 0;
    for &b in blocks {
        for i in start..start + b {
            let end = if causal { i + 1 } else { start + b };
            for j in start..end {
                data[i * len + j] = R::zero();
            }
        }
        start += b;
    }
    Tensor::from_vec(data, &[len, len]).expect("square mask")
}

fn get<'a, R: Real>(theta: &'a TensorMap<R>, name: &str) -> Result<&'a Tensor<R>> {
    theta
        .get(name)
        .ok_or_else(|| crate::error::Error::Contract(format!("missing mapper parameter `{name}`")))
}

impl MapperSpec {
    pub fn new(config: MapperConfig, d_v: usize, d_e: usize) -> Self {
        MapperSpec { config, d_v, d_e }
    }

    /// Fresh θ: Xavier-uniform matrices and seeds, zero biases, unit gains.
    pub fn init<R: Real>(&self, seed: u64) -> NamedArrays<R> {
        let mut rng = rng::stream(seed, rng::STREAM_MAPPER_INIT);
        let (d, l) = (self.d_e, self.config.prefix_len);
        let mut theta = NamedArrays::new();
        theta.insert(SEEDS, xavier(&mut rng, l, d));
        theta.insert(PROJ_W, xavier(&mut rng, self.d_v, d));
        theta.insert(PROJ_B, Array::zeros(&[1, d]));
        match self.config.variant {
            MapperVariant::SelfAttention => {
                for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                    theta.insert(name, xavier(&mut rng, d, d));
                }
                theta.insert("attn.bo", Array::zeros(&[1, d]));
            }
            MapperVariant::Mlp => {
                let h = self.config.mlp_hidden;
                theta.insert("mlp.w1", xavier(&mut rng, d, h));
                theta.insert("mlp.b1", Array::zeros(&[1, h]));
                theta.insert("mlp.w2", xavier(&mut rng, h, d));
                theta.insert("mlp.b2", Array::zeros(&[1, d]));
            }
        }
        theta.insert(NORM_GAIN, Array::new(vec![1, d], vec![R::one(); d]));
        theta.insert(NORM_BIAS, Array::zeros(&[1, d]));
        theta
    }

    /// Visual prefix `[l × d_e]` for features `[n × d_v]`.
    pub fn forward<R: Real>(
        &self,
        theta: &TensorMap<R>,
        features: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        self.forward_batch(theta, std::slice::from_ref(features))
    }

    /// Prefixes for several images at once, stacked to `[S·l × d_e]`.
    ///
    /// Images share one graph: their sets are packed row-wise and a
    /// block-diagonal mask keeps attention within each image.
    pub fn forward_batch<R: Real>(
        &self,
        theta: &TensorMap<R>,
        features: &[Tensor<R>],
    ) -> Result<Tensor<R>> {
        let Some(first) = features.first() else {
            return Err(crate::error::Error::Contract(
                "map_to_prefix needs at least one image".into(),
            ));
        };
        let n = first.shape().first().copied().unwrap_or(0);
        for f in features {
            if f.rank() != 2 || f.shape()[1] != self.d_v || f.shape()[0] != n {
                return Err(TensorError::Dimension {
                    op: "map_to_prefix",
                    lhs: f.shape().to_vec(),
                    rhs: vec![n, self.d_v],
                }
                .into());
            }
        }
        let s = features.len();
        let l = self.config.prefix_len;
        let d = self.d_e;
        let seeds = get(theta, SEEDS)?;
        let stacked = if s == 1 {
            first.clone()
        } else {
            Tensor::concat(features, 0)?
        };
        let projected = stacked
            .matmul(get(theta, PROJ_W)?)?
            .add_bcast(get(theta, PROJ_B)?)?;

        let mixed = match self.config.variant {
            MapperVariant::SelfAttention => {
                let block = l + n;
                let set = if s == 1 {
                    Tensor::concat(&[seeds.clone(), projected], 0)?
                } else {
                    // Rows of [seeds; projected] rearranged to [seeds; proj_1; seeds; proj_2; …].
                    let rows: Vec<usize> = (0..s)
                        .flat_map(|i| (0..l).chain(l + i * n..l + (i + 1) * n))
                        .collect();
                    Tensor::concat(&[seeds.clone(), projected], 0)?.gather_rows(&rows)?
                };
                let mask = (s > 1).then(|| block_mask::<R>(&vec![block; s], false));
                let q = set.matmul(get(theta, "attn.wq")?)?;
                let k = set.matmul(get(theta, "attn.wk")?)?;
                let v = set.matmul(get(theta, "attn.wv")?)?;
                let heads = self.config.heads;
                let dh = d / heads;
                let scale = if self.config.unscaled_attention {
                    R::one()
                } else {
                    R::of(1.0 / (dh as f64).sqrt())
                };
                let outs = (0..heads)
                    .map(|h| {
                        masked_attention(
                            &q.slice(1, h * dh, dh)?,
                            &k.slice(1, h * dh, dh)?,
                            &v.slice(1, h * dh, dh)?,
                            scale,
                            mask.as_ref(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let attended = Tensor::concat(&outs, 1)?
                    .matmul(get(theta, "attn.wo")?)?
                    .add_bcast(get(theta, "attn.bo")?)?;
                let out = set.add(&attended)?;
                if s == 1 {
                    out.slice(0, 0, l)?
                } else {
                    let rows: Vec<usize> = (0..s).flat_map(|i| i * block..i * block + l).collect();
                    out.gather_rows(&rows)?
                }
            }
            MapperVariant::Mlp => {
                // Each seed position carries its image's pooled visual context.
                let pooled = if n == 0 {
                    Tensor::zeros(&[s, d])
                } else if s == 1 {
                    projected.sum_to(&[1, d])?.scale(R::of(1.0 / n as f64))
                } else {
                    let mut pool = vec![R::zero(); s * s * n];
                    for i in 0..s {
                        for j in 0..n {
                            pool[i * s * n + i * n + j] = R::of(1.0 / n as f64);
                        }
                    }
                    Tensor::from_vec(pool, &[s, s * n])?.matmul(&projected)?
                };
                let input = if s == 1 {
                    seeds.add_bcast(&pooled)?
                } else {
                    let seed_rows: Vec<usize> = (0..s).flat_map(|_| 0..l).collect();
                    let pooled_rows: Vec<usize> =
                        (0..s).flat_map(|i| std::iter::repeat(i).take(l)).collect();
                    seeds
                        .gather_rows(&seed_rows)?
                        .add(&pooled.gather_rows(&pooled_rows)?)?
                };
                let hidden = input
                    .matmul(get(theta, "mlp.w1")?)?
                    .add_bcast(get(theta, "mlp.b1")?)?
                    .gelu();
                let out = hidden
                    .matmul(get(theta, "mlp.w2")?)?
                    .add_bcast(get(theta, "mlp.b2")?)?;
                input.add(&out)?
            }
        };
        let normed = mixed.layer_norm(R::of(super::backbone::LN_EPS));
        Ok(normed
            .mul_bcast(get(theta, NORM_GAIN)?)?
            .add_bcast(get(theta, NORM_BIAS)?)?)
    }
}

/// A mapper together with its current meta-parameters.
#[derive(Debug, Clone)]
pub struct MetaMapper<R: Real> {
    pub spec: MapperSpec,
    pub theta: NamedArrays<R>,
}

impl<R: Real> MetaMapper<R> {
    pub fn new(spec: MapperSpec, seed: u64) -> Self {
        let theta = spec.init(seed);
        MetaMapper { spec, theta }
    }

    pub fn map_to_prefix(&self, features: &Tensor<R>) -> Result<Tensor<R>> {
        self.spec.forward(&self.theta.to_constants(), features)
    }

    /// Redraws all of θ from the initialization distribution.
    pub fn reinitialize(&mut self, seed: u64) {
        self.theta = self.spec.init(seed);
    }

    pub fn parameter_count(&self) -> usize {
        self.theta.element_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn spec(variant: MapperVariant) -> MapperSpec {
        MapperSpec::new(
            MapperConfig {
                variant,
                ..MapperConfig::default()
            },
            32,
            48,
        )
    }

    fn features(n: usize, offset: f64) -> Tensor<f64> {
        Tensor::from_vec(
            (0..n * 32)
                .map(|i| (i as f64 * 0.13 + offset).sin())
                .collect(),
            &[n, 32],
        )
        .unwrap()
    }

    #[test]
    fn prefix_shape_for_both_variants() {
        for variant in [MapperVariant::SelfAttention, MapperVariant::Mlp] {
            let m = MetaMapper::<f64>::new(spec(variant), 1);
            let p = m.map_to_prefix(&features(4, 0.0)).unwrap();
            assert_eq!(p.shape(), &[4, 48]);
        }
    }

    #[test]
    fn zero_inputs_give_zero_prefix() {
        let mut m = MetaMapper::<f64>::new(spec(MapperVariant::SelfAttention), 1);
        let seeds = m.theta.0.get_mut(SEEDS).unwrap();
        seeds.data.iter_mut().for_each(|v| *v = 0.0);
        let p = m.map_to_prefix(&Tensor::zeros(&[4, 32])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_visual_features_still_yields_prefix() {
        for variant in [MapperVariant::SelfAttention, MapperVariant::Mlp] {
            let m = MetaMapper::<f64>::new(spec(variant), 1);
            let p = m.map_to_prefix(&Tensor::zeros(&[0, 32])).unwrap();
            assert_eq!(p.shape(), &[4, 48]);
            assert!(p.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_feature_width_is_dimension_error() {
        let m = MetaMapper::<f64>::new(spec(MapperVariant::SelfAttention), 1);
        assert!(m.map_to_prefix(&Tensor::zeros(&[4, 31])).is_err());
    }

    #[test]
    fn single_head_attention_matches_hand_computation() {
        // Two-element set (one seed, one feature) with 2-dim rows.
        let x = [[0.5, -1.0], [2.0, 0.25]];
        let set = Tensor::<f64>::from_vec(x.iter().flatten().copied().collect(), &[2, 2]).unwrap();
        let out = attention(&set, &set, &set, 1.0).unwrap();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| x[i][0] * x[j][0] + x[i][1] * x[j][1])
                .collect();
            let z = s[0].exp() + s[1].exp();
            let w = [s[0].exp() / z, s[1].exp() / z];
            for c in 0..2 {
                let expected = w[0] * x[0][c] + w[1] * x[1][c];
                assert!((out.data()[i * 2 + c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reinitialize_is_seeded() {
        let mut a = MetaMapper::<f64>::new(spec(MapperVariant::SelfAttention), 1);
        let mut b = a.clone();
        a.reinitialize(5);
        b.reinitialize(5);
        assert_eq!(a.theta, b.theta);
        b.reinitialize(6);
        assert_ne!(a.theta, b.theta);
    }

    #[test]
    fn prefix_is_invariant_to_feature_order() {
        let m = MetaMapper::<f64>::new(spec(MapperVariant::SelfAttention), 2);
        let f = features(4, 0.3);
        let rows: Vec<Tensor<f64>> = (0..4).map(|i| f.slice(0, i, 1).unwrap()).collect();
        let permuted = Tensor::concat(
            &[
                rows[2].clone(),
                rows[0].clone(),
                rows[3].clone(),
                rows[1].clone(),
            ],
            0,
        )
        .unwrap();
        let a = m.map_to_prefix(&f).unwrap();
        let b = m.map_to_prefix(&permuted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        for variant in [MapperVariant::SelfAttention, MapperVariant::Mlp] {
            let s = spec(variant);
            let theta: NamedArrays<f64> = s.init(3);
            let names: Vec<String> = theta.names().map(String::from).collect();
            let inputs: Vec<(Vec<f64>, Vec<usize>)> = theta
                .iter()
                .map(|(_, a)| (a.data.clone(), a.shape.clone()))
                .collect();
            let f = features(4, 0.7);
            let weights = Tensor::from_vec(
                (0..4 * 48).map(|i| (i as f64 * 0.29).cos()).collect(),
                &[4, 48],
            )
            .unwrap();
            let err = gradcheck::check(
                |p| {
                    let map: TensorMap<f64> =
                        names.iter().cloned().zip(p.iter().cloned()).collect();
                    s.forward(&map, &f).unwrap().mul(&weights).unwrap().sum()
                },
                &inputs,
                1e-5,
            );
            assert!(err <= 1e-6, "{variant:?}: {err}");
        }
    }
}
