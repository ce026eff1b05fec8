use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use glyphnet::linalg::MatRef;
use glyphnet::ops::{conv2d, pool2d};
use glyphnet::{Padding, PoolKind, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn gemm<T: Real>(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("gemm_{}", T::NAME));
    for n in [64usize, 256] {
        let a = random::<T>(&[n, n], 1);
        let b = random::<T>(&[n, n], 2);
        let mut out = vec![T::zero(); n * n];
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                T::gemm(
                    MatRef::row_major(a.data(), n, n),
                    MatRef::row_major(b.data(), n, n),
                    &mut out,
                    n,
                    false,
                )
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_f32");
    group.sample_size(20);
    // a 3×3 same-padded layer at the scale of the first residual stage
    for (cin, cout, hw) in [(1usize, 32usize, 32usize), (32, 64, 16), (64, 128, 8)] {
        let x = random::<f32>(&[16, cin, hw, hw], 3);
        let w = random::<f32>(&[cout, cin, 3, 3], 4);
        group.bench_function(format!("{cin}x{hw}x{hw}->{cout}"), |bench| {
            bench.iter(|| conv2d(&x, &w, None, 1, Padding::Same).unwrap())
        });
    }
    group.finish();
}

fn pool(c: &mut Criterion) {
    let x = random::<f32>(&[16, 64, 16, 16], 5);
    c.bench_function("max_pool_2x2_f32", |bench| {
        bench.iter(|| pool2d(&x, PoolKind::Max, 2, 2, Padding::Valid).unwrap())
    });
}

criterion_group!(benches, gemm::<f32>, gemm::<f64>, conv, pool);
criterion_main!(benches);
