use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use clstm_core::flow::{farneback_flow, FlowParams};
use clstm_core::models::Batch;
use clstm_core::nn::{clstm_step, ClstmNodes, Mode};
use clstm_core::rng::stream;
use clstm_core::train::bce_loss;
use clstm_core::{Graph, Model, ModelConfig, Modality, Padding, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::uniform(&[n, n], -1.0, 1.0, &mut stream(1));
        let b = Tensor::uniform(&[n, n], -1.0, 1.0, &mut stream(2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    let x = Tensor::uniform(&[4, 32, 32, 32], -1.0, 1.0, &mut stream(3));
    let k = Tensor::uniform(&[5, 5, 32, 32], -0.1, 0.1, &mut stream(4));
    c.bench_function("conv2d_fwd_bwd_4x32x32x32_k5", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xi = g.param(x.clone());
            let ki = g.param(k.clone());
            let y = g.conv2d(xi, ki, None, Padding::Same).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn clstm(c: &mut Criterion) {
    let (cin, hidden, k) = (32, 32, 5);
    let x = Tensor::uniform(&[4, 16, 16, cin], -1.0, 1.0, &mut stream(5));
    let gate = |cin: usize, seed: u64| Tensor::uniform(&[k, k, cin, hidden], -0.1, 0.1, &mut stream(seed));
    c.bench_function("clstm_two_steps_4x16x16x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let wx = [0, 1, 2, 3].map(|i| g.param(gate(cin, 10 + i)));
            let wh = [0, 1, 2, 3].map(|i| g.param(gate(hidden, 20 + i)));
            let b = [0, 1, 2, 3].map(|_| g.param(Tensor::zeros(&[hidden])));
            let w = ClstmNodes::from_gates(&mut g, wx, wh, b).unwrap();
            let xi = g.constant(x.clone());
            let s1 = clstm_step(&mut g, xi, None, &w).unwrap();
            let s2 = clstm_step(&mut g, xi, Some(s1), &w).unwrap();
            let total = g.sum(s2.h);
            black_box(g.backward(total).unwrap());
        })
    });
}

fn flow(c: &mut Criterion) {
    let a = Tensor::uniform(&[64, 64], 0.0, 1.0, &mut stream(6));
    let b = Tensor::uniform(&[64, 64], 0.0, 1.0, &mut stream(7));
    let p = FlowParams::default();
    c.bench_function("farneback_64x64", |bench| bench.iter(|| black_box(farneback_flow(&a, &b, &p).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        hidden: 8,
        kernel: 3,
        ..ModelConfig::clstm1(Modality::Rgb).with_resolution(32, 32)
    };
    let model = Model::build(cfg, 1).unwrap();
    let batch = Batch {
        rgb: Some(Tensor::uniform(&[4, 10, 32, 32, 3], 0.0, 1.0, &mut stream(8))),
        flow: None,
    };
    let y = Tensor::full(&[4, 10, 2], 0.5);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("clstm1_fwd_bwd_4x10x32x32_h8", |bench| {
        bench.iter(|| {
            let mut pass = model.forward(&batch, Mode::Train, &mut stream(9)).unwrap();
            let loss = bce_loss(&mut pass.graph, pass.probs, &y).unwrap();
            black_box(pass.graph.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, conv2d, clstm, flow, train_step);
criterion_main!(benches);
