use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urllc_core::beamform::{self, P2Context, ScaControls};
use urllc_core::channel::{self, Scenario};
use urllc_core::grouping::{self, GreedyRule, Grouping};
use urllc_core::{conic, fbl, oracle};

fn blocklength(c: &mut Criterion) {
    c.bench_function("blocklength", |b| {
        b.iter(|| fbl::blocklength(black_box(1e-5), black_box(3.7), black_box(256)))
    });
    c.bench_function("q_inverse", |b| b.iter(|| fbl::q_inverse(black_box(1e-7))));
}

fn conic_planted(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances: Vec<_> = (0..8).map(|_| oracle::planted_instance(&mut rng, 20)).collect();
    let settings = conic::SolverSettings::default();
    c.bench_function("conic_planted_x8", |b| {
        b.iter(|| {
            for inst in &instances {
                black_box(conic::solve(&inst.problem, &settings).unwrap());
            }
        })
    });
}

fn sca_subproblem(c: &mut Criterion) {
    let mut group = c.benchmark_group("sca_subproblem");
    group.sample_size(10);
    for n in [10, 20, 40] {
        let s = Scenario {
            users: 5,
            elements: n,
            payload_bits: vec![256; 5],
            ..Scenario::default()
        };
        let real = channel::generate_realization(&s, 0).unwrap();
        let g = Grouping::single(&s.payload_bits);
        let ctx = P2Context {
            realization: &real,
            grouping: &g,
            eps_max: s.eps_max,
            tx_power_w: s.tx_power_w,
            noise_power_w: s.noise_power_w,
        };
        let controls = ScaControls::default();
        let state = beamform::initialize(&ctx, &controls).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| beamform::sca_step(&ctx, &state, &controls).unwrap())
        });
    }
    group.finish();
}

fn grouping_search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let snrs: Vec<f64> = (0..8).map(|_| 10f64.powf(rng.random_range(-1.0..2.0))).collect();
    let payloads = vec![256; 8];
    c.bench_function("greedy_k8", |b| {
        b.iter(|| grouping::greedy_grouping(&snrs, &payloads, 1e-5, GreedyRule::Min).unwrap())
    });
    c.bench_function("exhaustive_k8", |b| {
        b.iter(|| {
            grouping::exhaustive_grouping(&payloads, 8, |g| grouping::fixed_snr_latency(g, &snrs, 1e-5)).unwrap()
        })
    });
}

criterion_group!(benches, blocklength, conic_planted, sca_subproblem, grouping_search);
criterion_main!(benches);
