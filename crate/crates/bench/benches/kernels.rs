use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use inferlab_core::kernels::{sparse_lengths_sum, EmbeddingTable, GemmKernel, GemmProblem, RowQuantizedTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &(m, n, k) in &[(1, 1024, 1024), (16, 1024, 1024), (256, 256, 256)] {
        group.throughput(Throughput::Elements((2 * m * n * k) as u64));
        for kernel in GemmKernel::ALL {
            let p = GemmProblem::new(kernel, m, n, k, 7).expect("valid problem");
            group.bench_with_input(BenchmarkId::new(kernel.name(), format!("{m}x{n}x{k}")), &p, |b, p| {
                b.iter(|| p.run().expect("kernel runs"))
            });
        }
    }
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let (rows, dim, batch, pooling) = (100_000, 64, 64, 32);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..rows * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let idx: Vec<i64> = (0..batch * pooling).map(|_| r.gen_range(0..rows as i64)).collect();
    let lengths = vec![pooling as i64; batch];
    let f32_table = EmbeddingTable::f32(data.clone(), rows, dim).expect("table");
    let q_table = EmbeddingTable::RowQuantized(RowQuantizedTable::quantize(&data, rows, dim).expect("table"));
    let mut group = c.benchmark_group("sparse_lengths_sum");
    group.throughput(Throughput::Elements((batch * pooling * dim) as u64));
    group.bench_function("f32", |b| b.iter(|| sparse_lengths_sum(&f32_table, &idx, &lengths).expect("sls")));
    group.bench_function("row_u8", |b| b.iter(|| sparse_lengths_sum(&q_table, &idx, &lengths).expect("sls")));
    group.finish();
}

criterion_group!(benches, gemm, embedding);
criterion_main!(benches);
