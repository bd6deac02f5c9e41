//! One desk-scale meta-update (4 tasks, 5 second-order inner steps), with
//! the per-task work run sequentially or fanned out over the rayon pool.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use metamap::episodes::{DataConfig, Dataset, EpisodeConfig, EpisodeStream, Partition};
use metamap::exec::Execution;
use metamap::meta::{meta_gradient, MetaConfig, ParameterSet};
use metamap::model::{BackboneConfig, Backbones, MapperConfig, Model};

fn bench(c: &mut Criterion) {
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
    let params = ParameterSet::new(model.clone(), model.init_theta(1));
    let tasks = EpisodeStream::new(ds, Partition::MetaTrain, EpisodeConfig::default(), 5)
        .next_batch(4)
        .unwrap();

    let mut group = c.benchmark_group("meta_gradient");
    group.sample_size(10);
    for (name, execution) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ] {
        let cfg = MetaConfig {
            execution,
            ..MetaConfig::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| meta_gradient(&params, &tasks, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
