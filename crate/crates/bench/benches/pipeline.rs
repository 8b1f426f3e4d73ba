//! Hot-path benchmarks: convolution, the two network forwards, one full
//! episode with backward, and ground-truth density rendering.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use crowdadapt_bench::default_fixture;
use crowdadapt_core::models::{count_forward, guide};
use crowdadapt_core::norm::GbnParams;
use crowdadapt_core::scene::{density_from_heads, DensityConfig};
use crowdadapt_core::tensor::{Graph, Tensor};
use crowdadapt_core::train::{as_batch, build_guided_episode};

use rand::Rng;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = rand::thread_rng();
    let x = rand_tensor(&[1, 32, 8, 12], &mut rng);
    let w = rand_tensor(&[32, 32, 3, 3], &mut rng);
    let b = rand_tensor(&[32], &mut rng);
    c.bench_function("conv2d 32x32 dilated on 8x12", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xn = g.leaf(black_box(&x));
            let wn = g.leaf(&w);
            let bn = g.leaf(&b);
            black_box(g.conv2d(xn, wn, bn, 1, 2, 2).unwrap());
        })
    });
}

fn bench_guide(c: &mut Criterion) {
    let (model, scene) = default_fixture();
    let z = as_batch(&scene.images[0]);
    c.bench_function("guiding forward 64x96", |bench| {
        bench
            .iter(|| black_box(guide(std::slice::from_ref(&z), &model.theta, &model.arch).unwrap()))
    });
}

fn bench_count_forward(c: &mut Criterion) {
    let (model, scene) = default_fixture();
    let phi = GbnParams::identity(model.arch.phi_layout());
    let x = as_batch(&scene.images[0]);
    c.bench_function("counting forward 64x96", |bench| {
        bench.iter(|| black_box(count_forward(&x, &phi, &model.psi, &model.arch).unwrap()))
    });
}

fn bench_episode(c: &mut Criterion) {
    let (model, scene) = default_fixture();
    c.bench_function("episode forward+backward (m=4)", |bench| {
        bench.iter(|| {
            let ep = build_guided_episode(&model, &scene, 0, &[1, 2, 3, 4], true).unwrap();
            black_box(ep.graph.backward(ep.loss).unwrap());
        })
    });
}

fn bench_density(c: &mut Criterion) {
    let (_, scene) = default_fixture();
    let cfg = DensityConfig::default();
    c.bench_function("density map from 20 heads", |bench| {
        bench.iter(|| black_box(density_from_heads(&scene.heads[0], (8, 12), 8, &cfg).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_guide,
    bench_count_forward,
    bench_episode,
    bench_density
);
criterion_main!(benches);
