use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use globalmerge::synth::scene_sequence;
use globalmerge::{
    build_partition, match_tokens, merge, unmerge, FrameLayout, MergeConfig, MergeRule,
};

fn merge_path(c: &mut Criterion) {
    let layout = FrameLayout::patch_only(128).unwrap();
    let cfg = MergeConfig::default();
    let mut group = c.benchmark_group("merge");
    group.sample_size(10);
    for frames in [8usize, 32] {
        let seq = scene_sequence(layout, frames, 64, 3);
        let n = seq.n_tokens();
        group.bench_with_input(BenchmarkId::new("partition", n), &seq, |b, s| {
            b.iter(|| build_partition(black_box(s), &cfg).unwrap())
        });
        let p = build_partition(&seq, &cfg).unwrap();
        group.bench_with_input(BenchmarkId::new("match", n), &seq, |b, s| {
            b.iter(|| match_tokens(black_box(s), &p).unwrap())
        });
        let map = match_tokens(&seq, &p).unwrap();
        group.bench_with_input(BenchmarkId::new("merge_unmerge", n), &seq, |b, s| {
            b.iter(|| {
                let reduced = merge(black_box(s.features()), &map, MergeRule::Uniform).unwrap();
                unmerge(&reduced, &map).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, merge_path);
criterion_main!(benches);
