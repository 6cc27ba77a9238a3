use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;

use derrd::data::synthetic::PlantedBlocks;
use derrd::data::{build_negative_pool_with, FilterConfig, InteractionDataset};
use derrd::eval::{evaluate, Phase};
use derrd::gradcore::ParamStore;
use derrd::models::{BaseModelKind, Bound, Model, ModelSpec};
use derrd::par::Execution;
use derrd::rng::Rng;
use derrd::rrd::TeacherSnapshot;

fn dataset() -> InteractionDataset {
    let gen = PlantedBlocks {
        num_users: 1000,
        num_items: 2000,
        ..PlantedBlocks::default()
    };
    InteractionDataset::from_log(&gen.generate(7), FilterConfig::users(5)).unwrap()
}

fn model(ds: &InteractionDataset, kind: BaseModelKind) -> (Model, ParamStore) {
    let spec = ModelSpec {
        kind,
        num_users: ds.num_users,
        num_items: ds.num_items,
        width: 64,
        neumf_layers: 2,
    };
    let mut params = ParamStore::new();
    let m = Model::build(&spec, &mut params, "model", &mut Rng::seed_from_u64(1)).unwrap();
    (m, params)
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let ds = dataset();
    let pool = build_negative_pool_with(&ds, 0, Execution::Parallel);

    let mut g = c.benchmark_group("negative_pool");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| build_negative_pool_with(&ds, 0, exec)));
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for kind in [BaseModelKind::Bpr, BaseModelKind::NeuMf] {
        let (m, p) = model(&ds, kind);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, kind), &exec, |b, &exec| {
                b.iter(|| evaluate(&Bound::new(&m, &p), &ds, &pool, Phase::Test, exec))
            });
        }
    }
    g.finish();

    let mut g = c.benchmark_group("teacher_cache");
    g.sample_size(10);
    let (m, p) = model(&ds, BaseModelKind::Bpr);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| TeacherSnapshot::build(m.clone(), p.clone(), &ds, 500, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
