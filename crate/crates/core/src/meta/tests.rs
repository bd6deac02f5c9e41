use std::sync::Arc;

use super::*;
use crate::autodiff::{grad, gradcheck, Tensor};
use crate::episodes::{DataConfig, Dataset, Episode, EpisodeConfig, EpisodeStream, Partition};
use crate::exec::Execution;
use crate::model::{BackboneConfig, Backbones, MapperConfig, MapperVariant, TextSample};

struct Fixture {
    dataset: Arc<Dataset>,
    params: ParameterSet<f64>,
}

fn fixture(variant: MapperVariant) -> Fixture {
    let data = DataConfig {
        num_categories: 14,
        num_test_categories: 4,
        samples_per_category: 12,
        ..DataConfig::default()
    };
    let dataset = Arc::new(Dataset::generate(&data).unwrap());
    let backbone = BackboneConfig {
        vocab_size: data.vocab_size(),
        ..BackboneConfig::default()
    };
    let backbones = Arc::new(Backbones::new(&backbone, data.image()).unwrap());
    let model = Model::new(
        backbones,
        MapperConfig {
            variant,
            ..MapperConfig::default()
        },
    );
    let theta = model.init_theta(5);
    Fixture {
        dataset,
        params: ParameterSet::new(model, theta),
    }
}

fn episodes(f: &Fixture, n: u64, cfg: EpisodeConfig) -> Vec<Episode> {
    let stream = EpisodeStream::new(f.dataset.clone(), Partition::MetaTrain, cfg, 21);
    (0..n).map(|i| stream.episode_at(i).unwrap()).collect()
}

fn small_episode() -> EpisodeConfig {
    EpisodeConfig {
        queries_per_way: 2,
        ..EpisodeConfig::default()
    }
}

fn max_abs_diff(a: &NamedArrays<f64>, b: &NamedArrays<f64>) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Plain gradient of `Σ_tasks L_query(θ)` at θ.
fn direct_query_gradient(params: &ParameterSet<f64>, tasks: &[Episode]) -> NamedArrays<f64> {
    let theta = params.theta.to_params();
    let (names, leaves): (Vec<String>, Vec<Tensor<f64>>) = theta.clone().into_iter().unzip();
    let mut total: Option<Tensor<f64>> = None;
    for t in tasks {
        let l = params.model.task_loss(&theta, &t.query_samples()).unwrap();
        total = Some(match total {
            Some(acc) => acc.add(&l).unwrap(),
            None => l,
        });
    }
    let g = grad(&total.unwrap(), &leaves, false).unwrap();
    NamedArrays::from_ordered(&names, &g)
}

#[test]
fn zero_inner_lr_collapses_to_query_gradient() {
    let f = fixture(MapperVariant::SelfAttention);
    let tasks = episodes(&f, 2, small_episode());
    let cfg = MetaConfig {
        inner_lr: 0.0,
        inner_steps: 2,
        ..MetaConfig::default()
    };
    let (g, _, _) = meta_gradient(&f.params, &tasks, &cfg).unwrap();
    let direct = direct_query_gradient(&f.params, &tasks);
    assert!(max_abs_diff(&g, &direct) <= 1e-10);
    let first = MetaConfig {
        second_order: false,
        ..cfg
    };
    let (g_first, _, _) = meta_gradient(&f.params, &tasks, &first).unwrap();
    assert_eq!(g_first, g);
}

#[test]
fn zero_steps_give_identical_first_and_second_order() {
    let f = fixture(MapperVariant::SelfAttention);
    let tasks = episodes(&f, 1, small_episode());
    let second = MetaConfig {
        inner_steps: 0,
        ..MetaConfig::default()
    };
    let first = MetaConfig {
        second_order: false,
        ..second.clone()
    };
    let (a, _, adapted) = meta_gradient(&f.params, &tasks, &second).unwrap();
    let (b, _, _) = meta_gradient(&f.params, &tasks, &first).unwrap();
    assert_eq!(a, b);
    assert_eq!(adapted[0], f.params.theta);
    let same = inner_adapt(&f.params, &tasks[0].support_samples(), &second, true).unwrap();
    assert_eq!(same.theta, f.params.theta);
}

#[test]
fn first_order_gradient_is_query_gradient_at_adapted_params() {
    let f = fixture(MapperVariant::SelfAttention);
    let tasks = episodes(&f, 1, small_episode());
    let cfg = MetaConfig {
        inner_steps: 2,
        inner_lr: 0.05,
        second_order: false,
        ..MetaConfig::default()
    };
    let (g, _, adapted) = meta_gradient(&f.params, &tasks, &cfg).unwrap();
    let at_adapted = ParameterSet::new(f.params.model.clone(), adapted[0].clone());
    let direct = direct_query_gradient(&at_adapted, &tasks);
    assert!(max_abs_diff(&g, &direct) <= 1e-12);
}

#[test]
fn adapted_params_replay_bitwise() {
    let f = fixture(MapperVariant::SelfAttention);
    let tasks = episodes(&f, 2, small_episode());
    let cfg = MetaConfig {
        inner_steps: 2,
        inner_lr: 0.05,
        ..MetaConfig::default()
    };
    let (_, _, adapted) = meta_gradient(&f.params, &tasks, &cfg).unwrap();
    for (t, theta) in tasks.iter().zip(&adapted) {
        let replay = inner_adapt(&f.params, &t.support_samples(), &cfg, false).unwrap();
        assert_eq!(&replay.theta, theta);
    }
}

#[test]
fn duplicated_task_doubles_meta_gradient() {
    let f = fixture(MapperVariant::SelfAttention);
    let one = episodes(&f, 1, small_episode());
    let two = vec![one[0].clone(), one[0].clone()];
    let cfg = MetaConfig {
        inner_steps: 1,
        inner_lr: 0.1,
        ..MetaConfig::default()
    };
    let (g1, _, _) = meta_gradient(&f.params, &one, &cfg).unwrap();
    let (g2, _, _) = meta_gradient(&f.params, &two, &cfg).unwrap();
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert_eq!(2.0 * a, b);
    }
}

#[test]
fn scalar_toy_batch_of_two_sums_to_2_56() {
    let square = |p: &[Tensor<f64>]| -> crate::Result<Tensor<f64>> { Ok(p[0].square().sum()) };
    let theta = [(vec![1.0], vec![])];
    let total: f64 = (0..2)
        .map(|_| {
            bilevel::task_meta_gradient(&theta, &square, &square, 1, 0.1, true)
                .unwrap()
                .grads[0][0]
        })
        .sum();
    assert!((total - 2.56).abs() < 1e-10);
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let f = fixture(MapperVariant::SelfAttention);
    let tasks = episodes(&f, 1, small_episode());
    let cfg = MetaConfig {
        inner_steps: 1,
        inner_lr: 0.1,
        ..MetaConfig::default()
    };
    let (g, _, _) = meta_gradient(&f.params, &tasks, &cfg).unwrap();
    let query = tasks[0].query_samples();
    let support = tasks[0].support_samples();
    let objective = |flat: &[f64]| -> f64 {
        let p = ParameterSet::new(f.params.model.clone(), f.params.theta.unflatten(flat));
        let adapted = inner_adapt(&p, &support, &cfg, false).unwrap();
        task_loss(&adapted, &query).unwrap().item()
    };
    let theta = f.params.theta.flatten();
    let analytic = g.flatten();
    // Random directions plus a spread of single coordinates.
    let mut rng = crate::rng::stream(3, 0);
    let mut directions: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            use rand::Rng;
            (0..theta.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    for i in (0..theta.len()).step_by(theta.len() / 12) {
        let mut e = vec![0.0; theta.len()];
        e[i] = 1.0;
        directions.push(e);
    }
    let h = 1e-5;
    for dir in directions {
        let shifted =
            |s: f64| -> Vec<f64> { theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect() };
        let fd = (objective(&shifted(h)) - objective(&shifted(-h))) / (2.0 * h);
        let an: f64 = analytic.iter().zip(&dir).map(|(a, d)| a * d).sum();
        let err = gradcheck::relative_error(&[fd], &[an]);
        assert!(
            err <= 1e-4 || (fd - an).abs() < 1e-9,
            "fd {fd} analytic {an} rel {err}"
        );
    }
}

#[test]
fn loss_is_order_free() {
    let f = fixture(MapperVariant::SelfAttention);
    let ep = &episodes(&f, 1, EpisodeConfig::default())[0];
    let mut samples = ep.query_samples();
    let forward = task_loss(&f.params, &samples).unwrap().item();
    samples.reverse();
    let backward = task_loss(&f.params, &samples).unwrap().item();
    assert!((forward - backward).abs() < 1e-12);
    assert!(matches!(
        task_loss(&f.params, &[]),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn meta_update_touches_only_theta() {
    let f = fixture(MapperVariant::SelfAttention);
    let before = f.params.frozen_checksum();
    let mut params = f.params.clone();
    let cfg = MetaConfig {
        inner_steps: 1,
        ..MetaConfig::default()
    };
    let mut opt = AdamW::new(&params.theta, cfg.meta_lr, cfg.weight_decay);
    let tasks = episodes(&f, 2, small_episode());
    meta_update(&mut params, &mut opt, &tasks, &cfg).unwrap();
    assert_ne!(params.theta, f.params.theta);
    assert_eq!(params.frozen_checksum(), before);
}

#[test]
fn parallel_and_sequential_updates_agree_bitwise() {
    let f = fixture(MapperVariant::SelfAttention);
    let tasks = episodes(&f, 4, small_episode());
    let run = |execution| {
        let cfg = MetaConfig {
            inner_steps: 1,
            execution,
            ..MetaConfig::default()
        };
        meta_gradient(&f.params, &tasks, &cfg).unwrap().0
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn divergence_reports_the_task() {
    let f = fixture(MapperVariant::SelfAttention);
    let mut tasks = episodes(&f, 2, small_episode());
    tasks[1].support[0].image[0] = f64::NAN;
    let cfg = MetaConfig {
        inner_steps: 1,
        ..MetaConfig::default()
    };
    match meta_gradient(&f.params, &tasks, &cfg) {
        Err(crate::Error::Divergence {
            step: 0,
            task: Some(1),
        }) => {}
        other => panic!("unexpected {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn meta_train_budget_and_log() {
    let f = fixture(MapperVariant::Mlp);
    let cfg = MetaConfig {
        inner_steps: 1,
        meta_batch_tasks: 2,
        ..MetaConfig::default()
    };
    let stream = EpisodeStream::new(f.dataset.clone(), Partition::MetaTrain, small_episode(), 4);
    let mut state = TrainState::new(f.params.theta.clone(), &cfg);
    let log = meta_train(
        &f.params.model,
        &mut state,
        &stream,
        &cfg,
        0,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert!(log.is_empty());
    assert_eq!(state.theta, f.params.theta);

    let mut seen = 0;
    let log = meta_train(
        &f.params.model,
        &mut state,
        &stream,
        &cfg,
        3,
        &mut |_, _| {
            seen += 1;
            Ok(())
        },
    )
    .unwrap();
    assert_eq!((log.len(), seen, state.meta_step), (3, 3, 3));
    assert_eq!(
        log.iter().map(|r| r.meta_step).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );

    // Resuming from a snapshot replays the same episodes.
    let mut a = TrainState::new(f.params.theta.clone(), &cfg);
    meta_train(
        &f.params.model,
        &mut a,
        &stream,
        &cfg,
        2,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    let mut b = a.clone();
    meta_train(
        &f.params.model,
        &mut a,
        &stream,
        &cfg,
        4,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    let mut c = TrainState::new(f.params.theta.clone(), &cfg);
    meta_train(
        &f.params.model,
        &mut c,
        &stream,
        &cfg,
        4,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    meta_train(
        &f.params.model,
        &mut b,
        &stream,
        &cfg,
        4,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(a, c);
    assert_eq!(b, c);
}

fn flat_pool(ds: &Dataset, n: usize) -> Vec<TextSample<'_>> {
    ds.partition_samples(Partition::MetaTrain)
        .into_iter()
        .take(n)
        .map(|s| TextSample {
            image: &s.image,
            input: &[],
            target: &s.caption,
        })
        .collect()
}

#[test]
fn nonepisodic_full_batch_step_matches_collapsed_meta_update() {
    let f = fixture(MapperVariant::SelfAttention);
    let cfg = MetaConfig {
        inner_lr: 0.0,
        ..MetaConfig::default()
    };
    let pool = flat_pool(&f.dataset, 6);
    let batches = FlatBatches::new(pool.len(), pool.len(), 1).unwrap();
    let mut state = TrainState::new(f.params.theta.clone(), &cfg);
    nonepisodic_train(
        &f.params.model,
        &mut state,
        &pool,
        &batches,
        1,
        &mut |_, _| Ok(()),
    )
    .unwrap();

    // The same pool as the query set of a single task.
    let mut ep = episodes(&f, 1, small_episode()).remove(0);
    ep.query = pool
        .iter()
        .map(|s| crate::episodes::QueryItem {
            sample_ids: vec![],
            category: 0,
            image: s.image.to_vec(),
            input: vec![],
            target: s.target.to_vec(),
            answer: 0,
        })
        .collect();
    let mut params = f.params.clone();
    let mut opt = AdamW::new(&params.theta, cfg.meta_lr, cfg.weight_decay);
    meta_update(&mut params, &mut opt, &[ep], &cfg).unwrap();
    assert!(max_abs_diff(&params.theta, &state.theta) <= 1e-12);
}

#[test]
fn nonepisodic_overfits_a_small_pool() {
    let f = fixture(MapperVariant::SelfAttention);
    let before = f.params.frozen_checksum();
    let cfg = MetaConfig {
        meta_lr: 0.01,
        ..MetaConfig::default()
    };
    let pool = flat_pool(&f.dataset, 10);
    let batches = FlatBatches::new(pool.len(), 5, 2).unwrap();
    let mut state = TrainState::new(f.params.theta.clone(), &cfg);
    let start = task_loss(&f.params, &pool).unwrap().item();
    let log = nonepisodic_train(
        &f.params.model,
        &mut state,
        &pool,
        &batches,
        100,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(log.len(), 100);
    let trained = ParameterSet::new(f.params.model.clone(), state.theta.clone());
    let end = task_loss(&trained, &pool).unwrap().item();
    assert!(end < start, "{start} -> {end}");
    assert_eq!(trained.frozen_checksum(), before);
}

#[test]
fn flat_batches_cover_each_epoch_once() {
    let b = FlatBatches::new(10, 3, 9).unwrap();
    let mut epoch: Vec<usize> = (0..3).flat_map(|s| b.batch_at(s)).collect();
    epoch.sort_unstable();
    epoch.dedup();
    assert_eq!(epoch.len(), 9);
    assert_eq!(
        b.batch_at(5),
        FlatBatches::new(10, 3, 9).unwrap().batch_at(5)
    );
    assert_ne!(b.batch_at(0), b.batch_at(3));
}
