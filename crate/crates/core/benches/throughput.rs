//! Sequential versus data-parallel paths: the selective scan (reference,
//! tree scan, and the per-channel scan the model runs) and batch
//! enhancement. Build with `--no-default-features` to see the parallel
//! entries fall back to the sequential code.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sebench_core::eval::bench_inputs;
use sebench_core::model::{EnhancementModel, ModelConfig};
use sebench_core::par;
use sebench_core::ssm::{selective_scan_par, selective_scan_seq};
use sebench_core::verify::random_scan_case;
use sebench_core::Var;

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    for len in [250usize, 1250] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let [u, dl, a, b, cc, d] = random_scan_case::<f32>(&mut rng, len, 512, 16);
        g.bench_with_input(BenchmarkId::new("sequential", len), &len, |bch, _| {
            bch.iter(|| black_box(selective_scan_seq(&u, &dl, &a, &b, &cc, &d).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("parallel", len), &len, |bch, _| {
            bch.iter(|| black_box(selective_scan_par(&u, &dl, &a, &b, &cc, &d).unwrap()))
        });
        let vars = [&u, &dl, &a, &b, &cc, &d].map(|t| Var::constant(t.clone()));
        g.bench_with_input(BenchmarkId::new("channel_parallel", len), &len, |bch, _| {
            bch.iter(|| {
                let [u, dl, a, b, cc, d] = &vars;
                black_box(u.selective_scan(dl, a, b, cc, d).unwrap())
            })
        });
    }
    g.finish();
}

fn enhance(c: &mut Criterion) {
    let model = EnhancementModel::<f32>::build(&ModelConfig::from_name("BiMamba-3").unwrap(), 0).unwrap();
    let inputs = bench_inputs(2.0, 4);
    let mut g = c.benchmark_group("enhance_batch4_2s");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(inputs.iter().map(|w| model.enhance(w).unwrap()).collect::<Vec<_>>()))
    });
    g.bench_function("parallel", |b| {
        b.iter(|| black_box(par::map_slice(&inputs, |w| model.enhance(w).unwrap())))
    });
    g.finish();
}

criterion_group!(benches, scan, enhance);
criterion_main!(benches);
