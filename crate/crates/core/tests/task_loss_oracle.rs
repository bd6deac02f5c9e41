//! The packed, graph-based task loss against a plain straight-line
//! reimplementation of encode, map, decode and cross-entropy.

use std::sync::Arc;

use metamap::episodes::{DataConfig, Dataset, EpisodeConfig, EpisodeStream, Partition, TaskKind};
use metamap::model::{
    BackboneConfig, Backbones, MapperConfig, Model, NamedArrays, TextSample, BOS, EOS,
};
use rand::Rng;

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, w: &[f64], cols: usize) -> Mat {
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    row.iter()
                        .enumerate()
                        .map(|(i, x)| x * w[i * cols + j])
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| add_row(&vec![r.clone()], s).remove(0))
        .collect()
}

fn layer_norm(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let visible = if causal { i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - max).exp() / total;
                for c in cols.clone() {
                    out[i][c] += w * v[j][c];
                }
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

struct Oracle<'a> {
    bb: &'a Backbones<f64>,
    theta: &'a NamedArrays<f64>,
    cfg: &'a BackboneConfig,
    image: (usize, usize, usize),
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> &[f64] {
        &self.theta.get(name).unwrap().data
    }

    fn features(&self, image: &[f64]) -> Mat {
        let (h, w, c) = self.image;
        let (w_enc, b_enc) = self.bb.encoder.weights();
        let (ph, pw) = (h / 2, w / 2);
        let mut out = Vec::new();
        for gr in 0..2 {
            for gc in 0..2 {
                let mut patch = Vec::new();
                for y in gr * ph..(gr + 1) * ph {
                    for x in gc * pw..(gc + 1) * pw {
                        patch.extend_from_slice(&image[(y * w + x) * c..(y * w + x + 1) * c]);
                    }
                }
                out.push(patch);
            }
        }
        add_row(&matmul(&out, w_enc, self.cfg.d_v), b_enc)
    }

    fn prefix(&self, image: &[f64], l: usize) -> Mat {
        let d = self.cfg.d_e;
        let seeds: Mat = self
            .p("prefix_seeds")
            .chunks(d)
            .map(<[f64]>::to_vec)
            .collect();
        let proj = add_row(
            &matmul(&self.features(image), self.p("input_proj.weight"), d),
            self.p("input_proj.bias"),
        );
        let set: Mat = seeds.into_iter().chain(proj).collect();
        let q = matmul(&set, self.p("attn.wq"), d);
        let k = matmul(&set, self.p("attn.wk"), d);
        let v = matmul(&set, self.p("attn.wv"), d);
        let attended = add_row(
            &matmul(&attention(&q, &k, &v, 2, false), self.p("attn.wo"), d),
            self.p("attn.bo"),
        );
        let out = add(&set, &attended);
        layer_norm(&out[..l].to_vec())
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(self.p("norm.gain"))
                    .zip(self.p("norm.bias"))
                    .map(|((x, g), b)| x * g + b)
                    .collect()
            })
            .collect()
    }

    /// Summed NLL over scored positions and their count.
    fn sample_nll(&self, s: &TextSample<'_>, l: usize) -> (f64, usize) {
        let d = self.cfg.d_e;
        let lm = &self.bb.lm;
        let (emb, pos, layers, head) = lm.weights();
        let mut tokens = vec![BOS];
        tokens.extend_from_slice(s.input);
        tokens.extend_from_slice(s.target);
        tokens.push(EOS);
        let steps = tokens.len() - 1;
        let mut x: Mat = self.prefix(s.image, l);
        x.extend(
            tokens[..steps]
                .iter()
                .map(|&t| emb[t * d..(t + 1) * d].to_vec()),
        );
        for (i, row) in x.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += pos[i * d + c];
            }
        }
        let ff = lm.ff_width();
        for layer in layers {
            let h = layer_norm(&x);
            let a = attention(
                &matmul(&h, &layer.wq, d),
                &matmul(&h, &layer.wk, d),
                &matmul(&h, &layer.wv, d),
                lm.heads(),
                true,
            );
            x = add(&x, &matmul(&a, &layer.wo, d));
            let h = layer_norm(&x);
            let hidden: Mat = add_row(&matmul(&h, &layer.w1, ff), &layer.b1)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            x = add(&x, &add_row(&matmul(&hidden, &layer.w2, d), &layer.b2));
        }
        let logits = matmul(&layer_norm(&x), head, lm.vocab_size());
        let mut nll = 0.0;
        for j in s.input.len()..steps {
            let row = &logits[l + j];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[tokens[j + 1]];
        }
        (nll, steps - s.input.len())
    }
}

fn setup(
    kind: TaskKind,
) -> (
    Arc<Dataset>,
    Model<f64>,
    NamedArrays<f64>,
    BackboneConfig,
    metamap::episodes::Episode,
) {
    let data = DataConfig {
        num_categories: 14,
        num_test_categories: 4,
        samples_per_category: 12,
        ..DataConfig::default()
    };
    let ds = Arc::new(Dataset::generate(&data).unwrap());
    let cfg = BackboneConfig {
        vocab_size: data.vocab_size(),
        ..BackboneConfig::default()
    };
    let model = Model::<f64>::new(
        Arc::new(Backbones::new(&cfg, data.image()).unwrap()),
        MapperConfig::default(),
    );
    // Perturb θ so zero biases and unit gains are not special.
    let mut theta = model.init_theta(4);
    let mut rng = metamap::rng::stream(99, 0);
    for a in theta.0.values_mut() {
        a.data
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let episode_cfg = EpisodeConfig {
        task_kind: kind,
        ..EpisodeConfig::default()
    };
    let ep = EpisodeStream::new(ds.clone(), Partition::MetaTrain, episode_cfg, 2)
        .episode_at(0)
        .unwrap();
    (ds, model, theta, cfg, ep)
}

fn check(
    samples: &[TextSample<'_>],
    model: &Model<f64>,
    theta: &NamedArrays<f64>,
    cfg: &BackboneConfig,
) {
    let oracle = Oracle {
        bb: &model.backbones,
        theta,
        cfg,
        image: (8, 8, 3),
    };
    let l = model.mapper.config.prefix_len;
    let (nll, count) = samples
        .iter()
        .map(|s| oracle.sample_nll(s, l))
        .fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    let expected = nll / count as f64;
    let got = model
        .task_loss(&theta.to_constants(), samples)
        .unwrap()
        .item();
    assert!(
        (got - expected).abs() <= 1e-10,
        "graph {got} vs oracle {expected}"
    );
}

#[test]
fn single_support_sample_matches_oracle() {
    let (_, model, theta, cfg, ep) = setup(TaskKind::Captioning);
    check(&ep.support_samples()[..1], &model, &theta, &cfg);
}

#[test]
fn packed_query_batch_matches_oracle() {
    let (_, model, theta, cfg, ep) = setup(TaskKind::Captioning);
    check(&ep.query_samples(), &model, &theta, &cfg);
}

#[test]
fn question_inputs_are_conditioned_on_but_not_scored() {
    let (_, model, theta, cfg, ep) = setup(TaskKind::Vqa);
    let mut samples = ep.support_samples();
    samples.extend(ep.query_samples());
    check(&samples, &model, &theta, &cfg);
}
