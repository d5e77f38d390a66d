use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sft_core::harness::{batch_gradients, PreparedSet};
use sft_core::kernels::{matmul_acc, Padding};
use sft_core::model::logits;
use sft_core::preproc::{preprocess_clip, PreprocConfig};
use sft_core::synthdata::{render_clip, GestureClass, SceneConfig};
use sft_core::{Graph, LongLossParams, Rng, SftConfig, SftParams, Tensor};

fn kernels(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = Tensor::<f32>::randn(&[64, 128], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[128, 64], 1.0, &mut rng);
    c.bench_function("matmul_64x128x64", |bench| {
        let mut out = vec![0.0f32; 64 * 64];
        bench.iter(|| {
            out.fill(0.0);
            matmul_acc(a.data(), b.data(), &mut out, 64, 128, 64);
            black_box(&out);
        })
    });

    let x = Tensor::<f32>::randn(&[8, 1, 32, 32], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[16, 1, 3, 3], 0.5, &mut rng);
    let bias = Tensor::<f32>::zeros(&[16]);
    c.bench_function("conv2d_forward_backward_8x1x32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.param(w.clone());
            let bi = g.param(bias.clone());
            let y = g.conv2d(xi, wi, bi, 2, Padding::Same).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let cfg = SftConfig::default();
    let mut rng = Rng::new(2);
    let params = SftParams::<f32>::init(&cfg, &mut rng).unwrap();
    let frames = Tensor::<f32>::rand_uniform(&cfg.input_shape(), 0.0, 1.0, &mut rng);
    c.bench_function("sft_forward", |bench| bench.iter(|| black_box(logits(&params, &frames).unwrap())));

    let set = PreparedSet {
        frames: vec![frames; 16],
        labels: (0..16).map(|i| i % 10).collect(),
        distances: (0..16).map(|i| 4.0 + i as f64).collect(),
    };
    let batch: Vec<usize> = (0..16).collect();
    c.bench_function("sft_batch16_gradients", |bench| {
        bench.iter(|| black_box(batch_gradients(&params, &set, &batch, &LongLossParams::default(), false).unwrap()))
    });
}

fn data(c: &mut Criterion) {
    let scene = SceneConfig::default();
    c.bench_function("render_clip_84x96x96", |bench| {
        bench.iter(|| black_box(render_clip(GestureClass::Spin, 12.0, &scene, &mut Rng::new(3)).unwrap()))
    });
    let (clip, _) = render_clip(GestureClass::Spin, 12.0, &scene, &mut Rng::new(3)).unwrap();
    let pc = PreprocConfig::default();
    c.bench_function("preprocess_clip_84_to_8", |bench| {
        bench.iter(|| black_box(preprocess_clip(&clip, &pc, &mut Rng::new(4)).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels, model, data
}
criterion_main!(benches);
