use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vidcompress::Branch;
use vidcompress_bench::{clip, config, model};

/// One clip through a session whose cache is already full.
fn push_clip(c: &mut Criterion) {
    let mut group = c.benchmark_group("push_clip");
    group.sample_size(10);
    for m in [3, 7] {
        let cfg = config(m);
        let model = model(&cfg);
        let mut session = model.session(model.prompt("what happens").unwrap());
        for i in 0..m {
            session.push_clip(&clip(&cfg, i)).unwrap();
        }
        let next = clip(&cfg, m);
        group.bench_with_input(BenchmarkId::new("memory_size", m), &m, |b, _| {
            b.iter(|| session.push_clip(&next).unwrap())
        });
    }
    group.finish();
}

fn branches(c: &mut Criterion) {
    let mut group = c.benchmark_group("branch");
    group.sample_size(10);
    for branch in Branch::ALL {
        let cfg = vidcompress::RunConfig {
            branch: *branch,
            ..config(3)
        };
        let model = model(&cfg);
        let input = clip(&cfg, 0);
        let prompt = model.prompt("what happens").unwrap();
        group.bench_function(branch.as_str(), |b| {
            b.iter(|| model.session(prompt.clone()).push_clip(&input).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, push_clip, branches);
criterion_main!(benches);
