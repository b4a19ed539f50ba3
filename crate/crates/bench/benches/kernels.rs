use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use windformer_core::data::synthesize_wake_dataset;
use windformer_core::spatial::stack_batch;
use windformer_core::tensor::matmul;
use windformer_core::{
    AblationSpec, Ctx, Mode, ModelConfig, ParamStore, Tape, Tensor, TurbineLayout, WakeConfig, Windformer,
};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng());
        let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng());
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::<f32>::randn(&[4, 16, 16, 48], 1.0, &mut rng());
    let w = Tensor::<f32>::randn(&[48, 48, 3, 3], 0.1, &mut rng());
    c.bench_function("conv2d 4x16x16x48 k3", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = tape.leaf(x.clone(), false).conv2d(tape.leaf(w.clone(), true), None).unwrap();
            let v = y.value().data()[0];
            black_box(v)
        })
    });
}

fn desk_model() -> (Windformer, ParamStore<f32>, Tensor<f32>, Tensor<f32>) {
    let layout = TurbineLayout::random(16, 16, 200, 0).unwrap();
    let wake = WakeConfig { steps: 64, ..WakeConfig::default() };
    let seqs = synthesize_wake_dataset(&layout, &wake, 30, 4).unwrap();
    let batch: Vec<_> = seqs.iter().take(4).collect();
    let (x, y) = stack_batch::<f32>(&batch).unwrap();
    let mut store = ParamStore::new();
    let model = Windformer::new(&ModelConfig::default(), AblationSpec::default(), &layout, &mut store, &mut rng())
        .unwrap();
    (model, store, x, y)
}

fn bench_model(c: &mut Criterion) {
    let (model, store, x, y) = desk_model();
    let mut g = c.benchmark_group("windformer batch 4");
    g.sample_size(10);
    g.bench_function("forward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval);
            let out = model.forward(&ctx, ctx.input(x.clone())).unwrap();
            let v = out.value().data()[0];
            black_box(v)
        })
    });
    g.bench_function("forward and backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Train);
            let out = model.forward(&ctx, ctx.input(x.clone())).unwrap();
            let loss = out.masked_mse(&y, &vec![true; y.numel()]).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_conv, bench_model);
criterion_main!(benches);
