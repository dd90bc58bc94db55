use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use gtrs_bench::fixture;
use gtrs_core::losses::{mesh_losses, LossWeights};
use gtrs_core::{Rng, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 512] {
        let mut rng = Rng::new(0);
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(20);
    for m in [450usize, 6890] {
        let f = fixture(m);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |bench, _| {
            bench.iter(|| black_box(f.model.predict(&f.pose2d, &f.asset.vertices).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let f = fixture(450);
    let gt = f.asset.vertices.clone();
    let gt_pose = f.asset.regress(&gt).unwrap();
    let weights = LossWeights::default();
    c.bench_function("forward_backward/450", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let out = f.model.forward(&tape, &f.pose2d, &f.asset.vertices).unwrap();
            let l = mesh_losses(out.mesh, &gt, &gt_pose, &f.asset.regressor, &f.asset.faces, &weights).unwrap();
            black_box(tape.backward(l.total, &f.model.store).unwrap())
        })
    });
}

criterion_group!(benches, matmul, forward, train_step);
criterion_main!(benches);
