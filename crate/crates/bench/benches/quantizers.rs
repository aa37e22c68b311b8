use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use codeq::codeq::{Codeq, CodeqConfig};
use codeq::stream::{build_method, Method, MethodConfig};
use codeq_bench::fixture;

const DIM: usize = 32;

fn build(c: &mut Criterion) {
    let (data, ids) = fixture(10_000, DIM, 10_000);
    let rows = &data.data[..ids.len() * DIM];
    let mut g = c.benchmark_group("build");
    g.sample_size(10);
    // Tree depth is capped by the block width.
    for (blocks, bits) in [(8, 4), (4, 8)] {
        g.bench_function(format!("codeq_m{blocks}_l{bits}"), |b| {
            b.iter(|| Codeq::build(CodeqConfig::new(DIM, blocks, bits, 1), &ids, rows).unwrap())
        });
    }
    g.finish();
}

/// One insert followed by deleting the same point, so the index size holds steady.
fn update(c: &mut Criterion) {
    let (data, ids) = fixture(20_000, DIM, 10_000);
    let mut g = c.benchmark_group("insert_delete");
    for method in [Method::Codeq, Method::OnlinePq, Method::QuadSketch] {
        let mut q = build_method(method, &MethodConfig::new(8, 4, 1), &data, &ids).unwrap();
        let mut next = ids.len();
        g.bench_function(method.to_string(), |b| {
            b.iter(|| {
                let x = data.row(next);
                q.insert(next as u64, x).unwrap();
                q.delete(next as u64, x).unwrap();
                next = if next + 1 == data.len() { ids.len() } else { next + 1 };
            })
        });
    }
    g.finish();
}

fn query(c: &mut Criterion) {
    let (data, ids) = fixture(20_000, DIM, 10_000);
    let mut g = c.benchmark_group("knn_query_k10");
    for method in [Method::Codeq, Method::FrozenPq, Method::QuadSketch] {
        let q = build_method(method, &MethodConfig::new(8, 4, 1), &data, &ids).unwrap();
        let mut i = ids.len();
        g.bench_function(method.to_string(), |b| {
            b.iter_batched(
                || {
                    i = if i + 1 == data.len() { ids.len() } else { i + 1 };
                    data.row(i).to_vec()
                },
                |x| q.knn_query(&x, 10).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, build, update, query);
criterion_main!(benches);
