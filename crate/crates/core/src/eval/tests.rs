use std::sync::Arc;

use super::*;
use crate::episodes::DataConfig;
use crate::model::{BackboneConfig, Backbones, MapperConfig, Model};

fn setup() -> (Arc<Dataset>, ParameterSet<f64>) {
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
    let model = Model::new(
        Arc::new(Backbones::new(&backbone, data.image()).unwrap()),
        MapperConfig::default(),
    );
    let theta = model.init_theta(1);
    (dataset, ParameterSet::new(model, theta))
}

fn spec(episodes: usize, steps: usize) -> EvalSpec {
    EvalSpec {
        label: "test".into(),
        episode: EpisodeConfig::default(),
        adaptation_steps: steps,
        inner_lr: 0.01,
        generation: GenerationConfig::default(),
        episodes,
        seed: 17,
        task_induction: false,
        execution: Execution::default(),
    }
}

#[test]
fn zero_episodes_give_an_empty_report() {
    let (ds, params) = setup();
    let report = meta_test(&params, &ds, &spec(0, 1)).unwrap();
    assert!(report.episodes.is_empty());
    assert_eq!(report.mean_accuracy, 0.0);
    let jsonl = report.to_jsonl("abc").unwrap();
    assert_eq!(jsonl.lines().count(), 1);
}

#[test]
fn oracle_responder_scores_perfectly() {
    let (ds, _) = setup();
    let stream = EpisodeStream::new(ds.clone(), Partition::MetaTest, EpisodeConfig::default(), 3);
    for i in 0..5 {
        let ep = stream.episode_at(i).unwrap();
        let mut answers = ep.query.iter().map(|q| q.answer);
        let result = score_episode(&ds, &ep, &[], |_, _| {
            Ok(vec![ds.vocab.word("this"), answers.next().unwrap()])
        })
        .unwrap();
        assert_eq!(result.accuracy, 1.0);
        let wrong = score_episode(&ds, &ep, &[], |_, _| Ok(vec![crate::model::BOS])).unwrap();
        assert_eq!(wrong.accuracy, 0.0);
    }
}

#[test]
fn reports_are_reproducible_and_consistent() {
    let (ds, params) = setup();
    let s = spec(6, 1);
    let a = meta_test(&params, &ds, &s).unwrap();
    let b = meta_test(
        &params,
        &ds,
        &EvalSpec {
            execution: Execution::Sequential,
            ..s
        },
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_jsonl("h").unwrap(), b.to_jsonl("h").unwrap());
    let (mean, _) = mean_and_stderr(&a.episodes.iter().map(|e| e.accuracy).collect::<Vec<_>>());
    assert_eq!(mean, a.mean_accuracy);
    assert_eq!(a.episodes.len(), 6);
    assert!(a.episodes.iter().all(|e| e.total == 8));
}

#[test]
fn untrained_mapper_is_near_chance() {
    // Default 64-word vocabulary, where open-ended chance is about 1/64.
    let data = DataConfig::default();
    let ds = Arc::new(Dataset::generate(&data).unwrap());
    let backbone = BackboneConfig {
        vocab_size: data.vocab_size(),
        ..BackboneConfig::default()
    };
    let model = Model::<f64>::new(
        Arc::new(Backbones::new(&backbone, data.image()).unwrap()),
        MapperConfig::default(),
    );
    for seed in 0..4 {
        let params = ParameterSet::new(model.clone(), model.init_theta(seed));
        let report = meta_test(&params, &ds, &spec(100, 0)).unwrap();
        assert!(
            report.mean_accuracy <= 0.05,
            "seed {seed}: accuracy {}",
            report.mean_accuracy
        );
    }
}

#[test]
fn adaptation_never_sees_queries() {
    let (ds, params) = setup();
    let stream = EpisodeStream::new(ds.clone(), Partition::MetaTest, EpisodeConfig::default(), 3);
    let ep = stream.episode_at(0).unwrap();
    let mut scrambled = ep.clone();
    for q in &mut scrambled.query {
        q.image.iter_mut().for_each(|v| *v = -*v);
        q.target.reverse();
    }
    let s = spec(1, 2);
    assert_eq!(
        adapt_to_episode(&params, &ep, &s).unwrap().theta,
        adapt_to_episode(&params, &scrambled, &s).unwrap().theta
    );
}

#[test]
fn accuracy_is_invariant_to_query_order() {
    let (ds, params) = setup();
    let stream = EpisodeStream::new(ds.clone(), Partition::MetaTest, EpisodeConfig::default(), 3);
    let ep = stream.episode_at(0).unwrap();
    let mut reversed = ep.clone();
    reversed.query.reverse();
    let s = spec(1, 1);
    let a = evaluate_episode(&params, &ds, &ep, &s).unwrap();
    let b = evaluate_episode(&params, &ds, &reversed, &s).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn induction_prompt_names_candidates() {
    let (ds, _) = setup();
    let stream = EpisodeStream::new(ds.clone(), Partition::MetaTest, EpisodeConfig::default(), 3);
    let ep = stream.episode_at(0).unwrap();
    let text = ds.vocab.decode(&induction_prompt(&ds, &ep));
    let names: Vec<&str> = ep
        .categories
        .iter()
        .map(|&c| ds.vocab.words()[ds.categories[c].name_token].as_str())
        .collect();
    assert_eq!(text, format!("answer with {} or {}", names[0], names[1]));
}

#[test]
fn greedy_generation_is_deterministic() {
    let (ds, params) = setup();
    let theta = params.theta.to_constants();
    let image = &ds.samples[0].image;
    let cfg = GenerationConfig::default();
    let a = generate(
        &params.model,
        &theta,
        image,
        &[],
        &cfg,
        &mut rng::stream(0, 0),
    )
    .unwrap();
    let b = generate(
        &params.model,
        &theta,
        image,
        &[],
        &cfg,
        &mut rng::stream(9, 9),
    )
    .unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= cfg.max_new_tokens);
}
