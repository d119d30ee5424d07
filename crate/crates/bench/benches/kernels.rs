use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trimkv::attnkern::{gated_attention_tiled, AttnInput};
use trimkv::losses::{capacity_loss_grad, capacity_loss_tiled};
use trimkv::numkern::Tensor;

fn tiled_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("gated_attention_tiled");
    for t in [128usize, 512] {
        let d = 16;
        let q = Tensor::<f32>::randn(&[t, d], 1.0, &mut rng);
        let k = Tensor::randn(&[t, d], 1.0, &mut rng);
        let v = Tensor::randn(&[t, d], 1.0, &mut rng);
        let betas: Vec<f32> = (0..t).map(|_| rng.random_range(0.9..0.9999)).collect();
        let input = AttnInput::new(q, k, v, 0.25).unwrap().with_betas(&betas).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(t), &input, |b, input| {
            b.iter(|| black_box(gated_attention_tiled(input, 64).unwrap()))
        });
    }
    group.finish();
}

fn capacity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 1024;
    let lbs: Vec<f64> = (0..t).map(|_| rng.random_range(0.9f64..0.9999).ln()).collect();
    c.bench_function("capacity_loss/1024", |b| b.iter(|| black_box(capacity_loss_tiled(&lbs, 256, 64).unwrap())));
    c.bench_function("capacity_loss_grad/1024", |b| b.iter(|| black_box(capacity_loss_grad(&lbs, 256, 64).unwrap())));
}

criterion_group!(benches, tiled_attention, capacity);
criterion_main!(benches);
