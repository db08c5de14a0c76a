//! Sequential vs parallel sweeps. Compares a one-thread rayon pool with the
//! default pool; build with `--no-default-features` to benchmark the plain
//! iterator fallback instead (both groups then run sequentially).

use std::hint::black_box;

use cihj::ci_calculus::{FnFunctional, Functional};
use cihj::control::{solve_dp, BellmanData, DpOptions};
use cihj::doubling::{DoublingParams, DoublingProblem};
use cihj::path_space::{EnumeratedFamily, GridPath, GridSpec, PathFamily, DEFAULT_CAP};
use cihj::penalty::{penalty_suite, PenaltyParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn family() -> EnumeratedFamily {
    let spec = GridSpec::new(1.0, 1.0, 1, 1, 3).unwrap();
    PathFamily::new(spec, 1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![vec![0.0]], None, DEFAULT_CAP)
        .unwrap()
        .members()
        .unwrap()
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut v = vec![("1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if all > 1 {
        v.push((all.to_string(), rayon::ThreadPoolBuilder::new().build().unwrap()));
    }
    v
}

fn bench_penalty_suite(c: &mut Criterion) {
    let fam = family();
    let params = PenaltyParams::new(1.0).unwrap();
    let mut g = c.benchmark_group("penalty_suite");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("threads", name), &fam, |b, fam| {
            b.iter(|| pool.install(|| black_box(penalty_suite(fam, &params, None).unwrap())))
        });
    }
    g.finish();
}

fn bench_maximize_phi(c: &mut Criterion) {
    let fam = family();
    let value = solve_dp(&BellmanData::unit_speed(), &fam, &DpOptions::default()).unwrap().table;
    let bumped = {
        let v = value.clone();
        FnFunctional::new(move |t, x: &GridPath| {
            let time = x.spec().time(t);
            v.eval(t, x).unwrap() + time * (1.0 - time)
        })
    };
    let prob = DoublingProblem::new(&bumped, &value, &fam).unwrap();
    let p = DoublingParams { epsilon: 0.05, delta: 0.05, alpha: 0.0625 };
    let mut g = c.benchmark_group("maximize_phi");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("threads", name), |b| {
            b.iter(|| pool.install(|| black_box(prob.maximize(&p).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_penalty_suite, bench_maximize_phi);
criterion_main!(benches);
