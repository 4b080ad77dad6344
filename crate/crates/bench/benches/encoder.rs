use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spmim::sparse::sparse_conv;
use spmim::{build_encoder, ConvSpec, EncoderConfig, Mode, ParamStore, Session, SparseExec, Tensor};
use spmim_bench::{batch, masks};

const SIZE: usize = 128;

fn encoder_forward(c: &mut Criterion) {
    let (encoder, store, _) = build_encoder(&EncoderConfig::default(), 0).unwrap();
    let x = batch(2, SIZE, 1);
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    group.bench_function("dense", |b| {
        b.iter(|| {
            let mut s = Session::new(&store, Mode::Eval, 0);
            let xv = s.input(x.clone());
            encoder.forward(&mut s, xv, None, SparseExec::Compact).unwrap();
        })
    });
    for ratio in [0.0, 0.3, 0.6, 0.9] {
        let m = masks(2, SIZE, ratio, 5);
        group.bench_with_input(BenchmarkId::new("sparse", ratio), &m, |b, m| {
            b.iter(|| {
                let mut s = Session::new(&store, Mode::Eval, 0);
                let xv = s.input(x.clone());
                encoder.forward(&mut s, xv, Some(m), SparseExec::Compact).unwrap();
            })
        });
    }
    group.finish();
}

fn conv_kernel(c: &mut Criterion) {
    let x = Tensor::uniform(&[2, 32, 32, 32], -1.0, 1.0, &mut spmim::rng::rng_from_seed(2));
    let w = Tensor::uniform(&[32, 32, 3, 3], -0.1, 0.1, &mut spmim::rng::rng_from_seed(3));
    let store = ParamStore::new();
    let mut group = c.benchmark_group("conv3x3");
    group.sample_size(20);
    group.bench_function("dense", |b| {
        b.iter(|| {
            let mut s = Session::new(&store, Mode::Eval, 0);
            let xv = s.input(x.clone());
            let wv = s.input(w.clone());
            s.graph.conv2d(xv, wv, None, ConvSpec::new(1, 1, 1)).unwrap();
        })
    });
    let m = masks(2, 32, 0.6, 7);
    for exec in [SparseExec::Compact, SparseExec::Emulate] {
        group.bench_function(format!("sparse_{exec:?}").to_lowercase(), |b| {
            b.iter(|| {
                let mut s = Session::new(&store, Mode::Eval, 0);
                let xv = s.input(x.clone());
                let wv = s.input(w.clone());
                sparse_conv(&mut s, xv, wv, None, ConvSpec::new(1, 1, 1), &m[0], &m[0], exec).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, encoder_forward, conv_kernel);
criterion_main!(benches);
