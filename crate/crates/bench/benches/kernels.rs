use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use massweights::tensor::kernels::{matmul, matmul_bt};
use massweights::Tensor;

fn filled(rows: usize, cols: usize, salt: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![rows, cols], |i| ((i * 7919 + salt) % 1000) as f32 / 1000.0 - 0.5)
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = filled(n, n, 1);
        let b = filled(n, n, 2);
        group.bench_with_input(BenchmarkId::new("ab", n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("abt", n), &n, |bench, _| {
            bench.iter(|| matmul_bt(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul);
criterion_main!(benches);
