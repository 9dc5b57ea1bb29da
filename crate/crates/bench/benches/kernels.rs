use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use curvebert::{Graph, Tensor};
use std::hint::black_box;

fn filled(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
        .collect();
    Tensor::new(&[rows, cols], data).unwrap().with_grad()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let (a, b) = (filled(n, n), filled(n, n));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.leaf(&a), g.leaf(&b));
                black_box(g.matmul(x, y).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.leaf(&a), g.leaf(&b));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).map(|d| d[0]));
            })
        });
    }
    group.finish();
}

fn conv1d(c: &mut Criterion) {
    let signal = Tensor::vector((0..1000).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
    let kernels = filled(256, 100);
    let bias = Tensor::zeros(&[256]).unwrap();
    c.bench_function("conv1d_tokenize_1000x100_to_256", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (s, k, b) = (g.constant(&signal), g.leaf(&kernels), g.leaf(&bias));
            black_box(g.conv1d(s, k, b, 100).unwrap());
        })
    });
}

criterion_group!(benches, matmul, conv1d);
criterion_main!(benches);
