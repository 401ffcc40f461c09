// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequential versus parallel execution of the two sweep-shaped workloads:
//! a causal-trace grid and a DAS localization grid. Untrained models are
//! fine here since the cost does not depend on the weights.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use intervene::harness::data::{Dataset, Task};
use intervene::harness::default_schema;
use intervene::harness::localize::{localize, PronounSet};
use intervene::harness::trace::Tracer;
use intervene::model::{Component, Model};
use intervene::par::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn trace_grid(c: &mut Criterion) {
    let data = Dataset::generate(Task::FactLookup, 0);
    let vocab = data.vocab();
    let model = Model::build_with_vocab(default_schema(Task::FactLookup, vocab.len()), vocab.clone(), 0).unwrap();
    let Dataset::FactLookup(fd) = &data else { unreachable!() };
    let case = fd.trace_cases(&vocab, 1, 0).unwrap().remove(0);
    let tracer = Tracer::new(&model, case.prompt, case.gold, case.subject, None, 0).unwrap();
    let streams = [Component::BlockOutput, Component::MlpActivation, Component::AttentionOutput];

    let mut group = c.benchmark_group("trace_grid");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| tracer.grid(&streams, exec).unwrap()));
    }
    group.finish();
}

fn localization(c: &mut Criterion) {
    let data = Dataset::generate(Task::Pronoun, 0);
    let vocab = data.vocab();
    let model = Model::build_with_vocab(default_schema(Task::Pronoun, vocab.len()), vocab.clone(), 0).unwrap();
    let Dataset::Pronoun(pd) = &data else { unreachable!() };
    let set = PronounSet::encode(pd, &vocab).unwrap();
    let eval = set.eval_pairs(32, 0);

    let mut group = c.benchmark_group("localization");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| localize(&model, &set, &eval, 5, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, trace_grid, localization);
criterion_main!(benches);
