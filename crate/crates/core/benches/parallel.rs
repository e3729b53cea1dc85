use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hybrid_ddf::par::Execution;
use hybrid_ddf::sim::{run, Mode, Scenario};

fn desk_run(c: &mut Criterion) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/desk.json");
    let scn = Scenario::load(&path).expect("desk scenario");
    let mut group = c.benchmark_group("desk_distributed_run");
    group.sample_size(10);
    let mut modes = vec![("sequential", Execution::Sequential)];
    if cfg!(feature = "parallel") {
        modes.push(("parallel", Execution::Parallel));
    }
    for (name, exec) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(run(&scn, Mode::Distributed, 7, exec).expect("run")))
        });
    }
    group.finish();
}

criterion_group!(benches, desk_run);
criterion_main!(benches);
