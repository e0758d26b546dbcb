use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use vidcompress::tensor::ops;
use vidcompress::{PoolConfig, Tensor};

fn filled(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37 % 101) as f32 - 50.0) / 50.0).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for rows in [64, 512, 2048] {
        let a = filled(&[rows, 64]);
        let b = filled(&[64, 64]);
        group.throughput(Throughput::Elements((rows * 64 * 64) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(rows), &rows, |bch, _| {
            bch.iter(|| ops::matmul(&a, &b).unwrap())
        });
    }
    group.finish();
}

fn pooling(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_pool");
    for grid in [2, 4, 8, 16] {
        let x = filled(&[8, grid, grid, 64]);
        let w = filled(&[3, 3, 3, 64]);
        group.bench_with_input(BenchmarkId::from_parameter(grid), &grid, |b, _| {
            b.iter(|| ops::conv3d_pool(&x, &w, PoolConfig::HALVE_SPATIAL).unwrap())
        });
    }
    group.finish();
}

fn attention_rows(c: &mut Criterion) {
    let logits = filled(&[512, 2048]);
    c.bench_function("softmax_rows/512x2048", |b| b.iter(|| ops::softmax_rows(&logits)));
}

criterion_group!(benches, matmul, pooling, attention_rows);
criterion_main!(benches);
