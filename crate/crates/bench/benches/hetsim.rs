use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hetsim_bench::{config, SHARED, SPLIT, TWO_ENCODERS};
use hetsim_core::bridge::plan_bridge;
use hetsim_core::engine::Engine;
use hetsim_core::grid::{BoundaryEdge, ModuleLayout};
use hetsim_core::oracle::oracle_step;
use hetsim_core::sched::{build_stage_graph, generate_1f1b_dispatch, ScheduleConfig};

fn bridge_planning(c: &mut Criterion) {
    let mut g = c.benchmark_group("plan_bridge");
    for (dp_s, dp_d) in [(4, 2), (32, 16), (8, 64)] {
        let src = ModuleLayout::new("images", 1, 1, 1, dp_s, 0).unwrap();
        let dst = ModuleLayout::new("language", 2, 1, 1, dp_d, dp_s).unwrap();
        let edge = BoundaryEdge::new(src, dst, 256, 64);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{dp_s}->{dp_d}")), &edge, |b, e| {
            b.iter(|| plan_bridge(black_box(e)).unwrap())
        });
    }
    g.finish();
}

fn dense_oracle(c: &mut Criterion) {
    let cfg = config(SPLIT);
    let model = cfg.tiny_model().unwrap();
    let params = model.init_params(cfg.run.seed);
    let batch = model.make_batch(cfg.run.global_batch, cfg.run.seed, 0);
    let flags = cfg.train_flags();
    c.bench_function("oracle_step", |b| {
        b.iter(|| oracle_step(&model, black_box(&params), &batch, cfg.run.num_microbatches, &flags))
    });
}

fn distributed_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("engine_step");
    for (name, text) in [("split", SPLIT), ("shared", SHARED), ("two_encoders", TWO_ENCODERS)] {
        let cfg = config(text);
        g.bench_function(name, |b| {
            b.iter_batched(
                || Engine::new(&cfg).unwrap(),
                |mut e| e.step().unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn dispatch_generation(c: &mut Criterion) {
    let cfg = config(TWO_ENCODERS);
    let graph = build_stage_graph(&cfg.modules, &cfg.edge_names()).unwrap();
    let mut g = c.benchmark_group("generate_1f1b_dispatch");
    for nmb in [4, 16, 64] {
        let sc = ScheduleConfig { num_microbatches: nmb };
        g.bench_with_input(BenchmarkId::from_parameter(nmb), &sc, |b, sc| {
            b.iter(|| generate_1f1b_dispatch(&graph, black_box(sc)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bridge_planning,
    dense_oracle,
    distributed_step,
    dispatch_generation
);
criterion_main!(benches);
