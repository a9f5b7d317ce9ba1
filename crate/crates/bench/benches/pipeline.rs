use std::hint::black_box;

use bustrace::dedup::{dedup_snapshot, DedupConfig};
use bustrace::ingest::{build_snapshots, RouteSet};
use bustrace::pipeline::{reconstruct, PipelineConfig};
use bustrace::sim::{emit_eta_feed, generate_world, WorldConfig};
use bustrace::stitch::{match_snapshots, MatchRef};
use criterion::{criterion_group, criterion_main, Criterion};

fn day() -> (RouteSet, Vec<bustrace::EtaObservation>) {
    let config = WorldConfig::non_cbd();
    let world = generate_world(&config).unwrap();
    let feed = emit_eta_feed(&world, &config);
    (RouteSet::new([world.route]), feed.observations)
}

fn bench_simulate(c: &mut Criterion) {
    let config = WorldConfig::non_cbd();
    c.bench_function("simulate_day", |b| {
        b.iter(|| {
            let world = generate_world(black_box(&config)).unwrap();
            emit_eta_feed(&world, &config)
        })
    });
}

fn bench_dedup(c: &mut Criterion) {
    let (routes, observations) = day();
    let route = routes.iter().next().unwrap();
    let index = build_snapshots(observations, 60).unwrap();
    let snapshots: Vec<_> = index.days.into_values().flatten().collect();
    let config = DedupConfig::default();
    c.bench_function("dedup_day", |b| {
        b.iter(|| {
            snapshots
                .iter()
                .map(|s| dedup_snapshot(black_box(s), route, &config).unwrap().len())
                .sum::<usize>()
        })
    });
}

fn bench_match(c: &mut Criterion) {
    let prev: Vec<MatchRef> = (0..12)
        .map(|i| MatchRef::at(20_000.0 - i as f64 * 1500.0))
        .collect();
    let next: Vec<f64> = (0..12).map(|i| 20_300.0 - i as f64 * 1500.0).collect();
    c.bench_function("match_snapshots_12", |b| {
        b.iter(|| match_snapshots(black_box(&prev), black_box(&next), 50.0))
    });
}

fn bench_reconstruct(c: &mut Criterion) {
    let (routes, observations) = day();
    let config = PipelineConfig::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("reconstruct_day", |b| {
        b.iter(|| reconstruct(black_box(observations.clone()), &routes, &config).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_simulate,
    bench_dedup,
    bench_match,
    bench_reconstruct
);
criterion_main!(benches);
