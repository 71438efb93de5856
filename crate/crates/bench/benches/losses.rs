use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ctkd::distill::kd_loss;
use ctkd::rnnt::{enumerate_alignments_oracle, rnnt_loss};
use ctkd_bench::random_lattice;

fn transducer(c: &mut Criterion) {
    let mut g = c.benchmark_group("rnnt_loss");
    for (t, u, v) in [(8, 4, 8), (32, 16, 8), (100, 50, 32)] {
        let (lat, labels) = random_lattice(t, u, v, 3);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{t}x{u}x{v}")), &(lat, labels), |b, (lat, labels)| {
            b.iter(|| rnnt_loss(black_box(lat), black_box(labels)).unwrap())
        });
    }
    g.finish();

    let (lat, labels) = random_lattice(4, 3, 3, 5);
    c.bench_function("alignment_oracle 4x3x3", |b| {
        b.iter(|| enumerate_alignments_oracle(black_box(&lat), black_box(&labels)).unwrap())
    });
}

fn distillation(c: &mut Criterion) {
    let mut g = c.benchmark_group("kd_loss");
    for (t, u, v) in [(8, 4, 8), (32, 16, 8), (100, 50, 32)] {
        let (teacher, _) = random_lattice(t, u, v, 7);
        let (student, _) = random_lattice(t, u, v, 8);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{t}x{u}x{v}")), &(teacher, student), |b, (tl, sl)| {
            b.iter(|| kd_loss(black_box(tl), black_box(sl)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, transducer, distillation);
criterion_main!(benches);
