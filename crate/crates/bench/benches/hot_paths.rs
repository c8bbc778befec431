use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use latewalk::latepoints::{neighbor_pair_statistic, sample_uniform_subset, separation_statistic};
use latewalk::oracle::ChainProblem;
use latewalk::walk::{run_tracked, WalkConfig, Walker};
use latewalk::TorusGeometry;

fn walk_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("walk");
    let steps = 1_000_000u64;
    g.throughput(Throughput::Elements(steps));
    for n in [16usize, 64] {
        let cfg = WalkConfig::new(TorusGeometry::new(n, 3).unwrap(), 1);
        g.bench_with_input(BenchmarkId::new("steps", n), &cfg, |b, cfg| {
            b.iter(|| {
                let mut w = Walker::new(cfg, 0);
                for _ in 0..steps {
                    black_box(w.step());
                }
            })
        });
        g.bench_with_input(BenchmarkId::new("tracked_steps", n), &cfg, |b, cfg| {
            b.iter(|| black_box(run_tracked(cfg, 0, steps, false).1.unvisited_count()))
        });
    }
    g.finish();
}

fn statistics(c: &mut Criterion) {
    let geom = TorusGeometry::new(32, 3).unwrap();
    let mut g = c.benchmark_group("statistics");
    for m in [100usize, 2000] {
        let f = sample_uniform_subset(&geom, m, 3, 0).unwrap();
        g.bench_with_input(BenchmarkId::new("separation", m), &f.sites, |b, s| {
            b.iter(|| black_box(separation_statistic(&geom, s, 0.5).z_gamma))
        });
        g.bench_with_input(BenchmarkId::new("neighbor_pairs", m), &f.sites, |b, s| {
            b.iter(|| black_box(neighbor_pair_statistic(&geom, s)))
        });
    }
    g.finish();
}

fn oracle_solve(c: &mut Criterion) {
    let p = ChainProblem::new(TorusGeometry::new(12, 3).unwrap(), 0.0).unwrap();
    c.bench_function("oracle/expected_hitting_time_n12", |b| {
        b.iter(|| black_box(p.exact_expected_hitting_time(&[0]).unwrap().1))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = walk_steps, statistics, oracle_solve
}
criterion_main!(benches);
