//! Rendering and training-step benchmarks comparing the rayon-parallel
//! paths against their sequential fallbacks.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gswm_core::image::ImageBuffer;
use gswm_core::raster::{
    random_scene, render, render_backward, render_backward_seq, render_seq, RasterConfig,
};
use gswm_core::rng::stream;

fn bench_render(c: &mut Criterion) {
    let (scene, cam) = random_scene(500, 7);
    let cfg = RasterConfig::default();
    let mut group = c.benchmark_group("render_500_64x64");
    group.bench_function("parallel", |b| b.iter(|| render(&scene, &cam, &cfg)));
    group.bench_function("sequential", |b| b.iter(|| render_seq(&scene, &cam, &cfg)));
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let (scene, cam) = random_scene(500, 8);
    let cfg = RasterConfig::default();
    let mut rng = stream(9, &[0]);
    let cot = ImageBuffer {
        width: 64,
        height: 64,
        pixels: (0..64 * 64 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    };
    let mut group = c.benchmark_group("render_backward_500_64x64");
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| render_backward(&scene, &cam, &cfg, &cot).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| render_backward_seq(&scene, &cam, &cfg, &cot).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_render, bench_backward);
criterion_main!(benches);
