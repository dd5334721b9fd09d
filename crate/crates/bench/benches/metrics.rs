use criterion::{criterion_group, criterion_main, Criterion};
use distill_bench::rng;
use distill_core::losses::{nlu_weighted_grad_logits, ReferenceDistribution};
use distill_core::metrics::mig;
use distill_core::tensor::Tensor;
use rand::Rng;
use std::hint::black_box;

fn mig_10k(c: &mut Criterion) {
    let mut r = rng(0);
    let n = 10_000;
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..10)).collect();
    let own =
        Tensor::new(vec![n, 4], (0..n * 4).map(|i| y[i / 4] as f32 + r.random::<f32>()).collect()).unwrap();
    let other = Tensor::new(vec![n, 16], (0..n * 16).map(|_| r.random::<f32>()).collect()).unwrap();
    c.bench_function("mig/10k/20bins", |b| {
        b.iter(|| black_box(mig(&[&own, &other], std::slice::from_ref(&y), 20).unwrap()))
    });
}

fn nlu_gradients(c: &mut Criterion) {
    let mut r = rng(1);
    let q = ReferenceDistribution::uniform(10);
    let logits: Vec<Vec<f64>> =
        (0..1000).map(|_| (0..10).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
    c.bench_function("nlu_weighted_grad/1000x10", |b| {
        b.iter(|| {
            for t in &logits {
                black_box(nlu_weighted_grad_logits(t, 3, &q).unwrap());
            }
        })
    });
}

criterion_group!(benches, mig_10k, nlu_gradients);
criterion_main!(benches);
