//! Criterion benchmarks for the inference and learning hot paths on the
//! 17-state loop environment.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use odohmm::inference::e_step;
use odohmm::model::{ConstraintRegime, CoordinateRegime};
use odohmm::reestimate::{em_step, EmConfig};
use odohmm::sim::{build_environment, loop17_spec, sample_experience};

fn bench_em(c: &mut Criterion) {
    let spec = loop17_spec(CoordinateRegime::Global, ConstraintRegime::AntiSymmetric);
    let model = build_environment(&spec, 1).unwrap();
    let (e, _) = sample_experience(&model, 500, 2).unwrap();
    let config = EmConfig::new(ConstraintRegime::AntiSymmetric, CoordinateRegime::Global);

    c.bench_function("e_step_loop17_t500", |b| {
        b.iter(|| e_step(&model, &e, true).unwrap())
    });

    c.bench_function("em_step_loop17_t500", |b| {
        b.iter_batched(
            || model.clone(),
            |m| em_step(&m, &e, &config).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let additive = {
        let spec = loop17_spec(CoordinateRegime::Global, ConstraintRegime::Additive);
        build_environment(&spec, 1).unwrap()
    };
    let additive_config = EmConfig::new(ConstraintRegime::Additive, CoordinateRegime::Global);
    c.bench_function("em_step_additive_loop17_t500", |b| {
        b.iter_batched(
            || additive.clone(),
            |m| em_step(&m, &e, &additive_config).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_em);
criterion_main!(benches);
