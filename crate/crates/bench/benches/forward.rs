use criterion::{black_box, criterion_group, criterion_main, Criterion};
use multiattn::{Graph, Model, ModelConfig, Profile, Tensor};
use multiattn_bench::samples;

fn conv(c: &mut Criterion) {
    let s = &samples(Profile::Tiny, 1)[0];
    let x = s.subsets[0].clone();
    let kernel = Tensor::new([32, 4, 5, 5], (0..32 * 4 * 25).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect()).unwrap();
    let bias = Tensor::<f32>::zeros([32]);
    c.bench_function("conv2d 4x24x24 -> 32, 5x5", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.input(&x), g.input(&kernel), g.input(&bias));
            let y = g.conv2d(xv, kv, bv).unwrap();
            black_box(g.value(y).data()[0])
        })
    });
}

fn model(c: &mut Criterion) {
    let batch = samples(Profile::Tiny, 4);
    let model = Model::<f32>::init(ModelConfig::tiny(8), 1).unwrap();
    let s = &batch[0];
    c.bench_function("infer tiny", |b| b.iter(|| black_box(model.infer(&s.subsets).unwrap())));
    let labels = s.label_tensor();
    c.bench_function("loss and gradients tiny", |b| {
        b.iter(|| black_box(model.loss_and_grads(&s.subsets, &labels).unwrap().0))
    });

    let big = &samples(Profile::BigEarthNetShaped, 1)[0];
    let full = Model::<f32>::init(ModelConfig::bigearthnet(), 1).unwrap();
    let mut group = c.benchmark_group("full geometry");
    group.sample_size(10);
    group.bench_function("infer 120x120", |b| b.iter(|| black_box(full.infer(&big.subsets).unwrap())));
    group.finish();
}

criterion_group!(benches, conv, model);
criterion_main!(benches);
