//! Candidate-batch cost evaluation, sequential vs the rayon pool.
//!
//! One optimizer evolution scores a population of pulse candidates against
//! the same random-sequence batch; that map is the hot loop of the whole
//! calibration. Run with `--features parallel` (default) to get both rows;
//! without the feature the "parallel" row degrades to sequential.

use criterion::{criterion_group, criterion_main, Criterion};
use czcal::calibration::{evaluate_candidate, split_rng, OrbitConfig};
use czcal::device::DeviceParams;
use czcal::parallel::Parallelism;
use czcal::pulse::{FourierParams, PulseParams};
use czcal::rb::build_rb_sequences;
use std::hint::black_box;

fn candidate_batch(c: &mut Criterion) {
    let dev = DeviceParams::default();
    let cfg = OrbitConfig { sequences: 4, ..OrbitConfig::default() };
    let mut rng = split_rng(99, &[0]);
    let seqs = build_rb_sequences(2, cfg.sequences, 0, &mut rng).unwrap();
    let candidates: Vec<PulseParams> = (0..8)
        .map(|i| {
            PulseParams::Fourier(FourierParams {
                amplitude: 0.10 + 0.002 * i as f64,
                width: 50e-9,
                lambdas: vec![1.0, 0.05, 0.0, 0.0, 0.0],
                phi1: 0.0,
                phi2: 0.0,
            })
        })
        .collect();
    let run = |par: &Parallelism| {
        par.map(candidates.len(), |i| {
            evaluate_candidate(&dev, None, &candidates[i], &seqs, &cfg, 1, 2, i as u64, None)
                .unwrap()
        })
    };

    let mut group = c.benchmark_group("candidate_batch");
    group.sample_size(10);
    let seq = Parallelism::sequential();
    group.bench_function("sequential", |b| b.iter(|| black_box(run(&seq))));
    let par = Parallelism::default();
    group.bench_function("parallel", |b| b.iter(|| black_box(run(&par))));
    group.finish();
}

criterion_group!(benches, candidate_batch);
criterion_main!(benches);
