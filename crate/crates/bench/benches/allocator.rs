use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sea_alloc::allocator::{brute_force_optimum, final_resolve, greedy_allocate};
use sea_alloc_bench::instance;
use std::hint::black_box;

fn allocator(c: &mut Criterion) {
    let mut group = c.benchmark_group("allocator");
    for n in [74, 300, 1000] {
        let inst = instance(n, 1);
        group.bench_with_input(BenchmarkId::new("greedy", n), &inst, |b, i| {
            b.iter(|| greedy_allocate(black_box(&i.scores), &i.costs, &i.eligible, i.budget).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("final_resolve", n), &inst, |b, i| {
            b.iter(|| final_resolve(black_box(&i.scores), &i.costs, &i.eligible, i.budget).unwrap())
        });
    }
    for n in [10, 15] {
        let inst = instance(n, 2);
        group.bench_with_input(BenchmarkId::new("brute_force", n), &inst, |b, i| {
            b.iter(|| brute_force_optimum(black_box(&i.scores), &i.costs, &i.eligible, i.budget).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, allocator);
criterion_main!(benches);
