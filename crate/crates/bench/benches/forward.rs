//! Teacher-forced forward pass of the original, masked and sliced models
//! (the Table 3 workload) across batch sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use prunelab::attention::HeadMask;
use prunelab::model::Batch;
use prunelab_bench::{fixture, half_sliced};

fn forward(c: &mut Criterion) {
    let f = fixture(2, 8, 64);
    let sliced = half_sliced(&f.model);
    let masked = f.model.with_mask(HeadMask::closing(
        f.model.head_ids().into_iter().filter(|id| id.head % 2 == 1),
    ));
    let mut group = c.benchmark_group("forward");
    for bs in [1usize, 16, 64] {
        let batch = Batch::new(&f.corpus.eval_in_domain[..bs]).expect("batch");
        group.throughput(Throughput::Elements(bs as u64));
        for (name, model) in [("original", &f.model), ("masked", &masked), ("sliced", &sliced)] {
            group.bench_with_input(BenchmarkId::new(name, bs), &batch, |b, batch| {
                b.iter(|| black_box(model.logits(batch).expect("forward")))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
