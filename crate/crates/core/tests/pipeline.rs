use globalmerge::synth::{generate, scene_sequence, FixtureKind};
use globalmerge::{
    build_partition, forward, match_tokens, merge, unmerge, Component, ForwardOptions, FrameLayout,
    MergeConfig, MergeRule, Mode, ModelConfig, ModelWeights, StrategyVariant, TokenSequence,
};

fn model() -> ModelConfig {
    ModelConfig {
        n_blocks: 6,
        dim: 32,
        n_heads: 4,
        keep_layers: vec![2, 5],
        weight_seed: 9,
    }
}

#[test]
fn fixture_round_trip_preserves_bits() {
    let layout = FrameLayout::new(1, 4, 5, 7).unwrap();
    for kind in [FixtureKind::Scene, FixtureKind::Random, FixtureKind::Rank1] {
        let seq = generate(kind, layout, 3, 16, 4);
        let mut buf = Vec::new();
        seq.write_to(&mut buf).unwrap();
        let back = TokenSequence::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.layout(), seq.layout());
        assert!(back.features().bitwise_eq(seq.features()));
    }
}

#[test]
fn truncated_fixture_is_rejected() {
    let seq = scene_sequence(FrameLayout::patch_only(6).unwrap(), 2, 4, 1);
    let mut buf = Vec::new();
    seq.write_to(&mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(TokenSequence::read_from(buf.as_slice()).is_err());
}

#[test]
fn component_flops_add_up_to_the_counter() {
    let m = model();
    let w = ModelWeights::generate(&m);
    let seq = scene_sequence(FrameLayout::new(1, 2, 4, 4).unwrap(), 4, m.dim, 2);
    for variant in StrategyVariant::ALL {
        let cfg = variant.configure(&MergeConfig {
            start_block: 2,
            ..Default::default()
        });
        for mode in [Mode::Dense, Mode::Merged] {
            let out = forward(&seq, &m, &w, &cfg, mode, &ForwardOptions::default()).unwrap();
            let p = &out.profile;
            assert_eq!(
                p.total_flops(),
                p.counter_delta,
                "{} {}",
                variant.name(),
                mode.name()
            );
            assert_eq!(p.blocks.len(), m.n_blocks);
            if mode == Mode::Dense {
                assert_eq!(p.component_flops(Component::MergeOverhead), 0);
            }
        }
    }
}

#[test]
fn parallel_forward_matches_sequential() {
    let m = model();
    let w = ModelWeights::generate(&m);
    let seq = scene_sequence(FrameLayout::patch_only(40).unwrap(), 6, m.dim, 5);
    let cfg = MergeConfig::default();
    let par = ForwardOptions {
        parallel: true,
        ..Default::default()
    };
    for mode in [Mode::Dense, Mode::Merged] {
        let a = forward(&seq, &m, &w, &cfg, mode, &ForwardOptions::default()).unwrap();
        let b = forward(&seq, &m, &w, &cfg, mode, &par).unwrap();
        for ((_, x), (_, y)) in a.retained.iter().zip(&b.retained) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(a.profile.counter_delta, b.profile.counter_delta, "{mode:?}");
    }
}

#[test]
fn merged_error_grows_with_ratio() {
    let m = model();
    let w = ModelWeights::generate(&m);
    let seq = scene_sequence(FrameLayout::new(1, 4, 8, 8).unwrap(), 4, m.dim, 3);
    let opts = ForwardOptions::default();
    let dense = forward(&seq, &m, &w, &MergeConfig::default(), Mode::Dense, &opts).unwrap();
    let err = |ratio: f64| {
        let cfg = StrategyVariant::Random.configure(&MergeConfig {
            merge_ratio: ratio,
            ..Default::default()
        });
        let out = forward(&seq, &m, &w, &cfg, Mode::Merged, &opts).unwrap();
        globalmerge::relative_l2(&out.retained[1].1, &dense.retained[1].1).unwrap()
    };
    let (lo, hi) = (err(0.2), err(0.9));
    assert!(lo > 0.0 && lo < hi, "{lo} {hi}");
}

#[test]
fn sequential_rule_differs_only_for_larger_groups() {
    let seq = scene_sequence(FrameLayout::patch_only(16).unwrap(), 3, 8, 1);
    let cfg = MergeConfig::default();
    let p = build_partition(&seq, &cfg).unwrap();
    let map = match_tokens(&seq, &p).unwrap();
    let uni = merge(seq.features(), &map, MergeRule::Uniform).unwrap();
    let seqr = merge(seq.features(), &map, MergeRule::Sequential).unwrap();
    for (row, &tok) in map.kept_order.iter().enumerate() {
        let size = map.groups.iter().find(|g| g.0 == tok).map_or(1, |g| g.1);
        if size <= 2 {
            for (a, b) in uni.row(row).iter().zip(seqr.row(row)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }
    assert_eq!(unmerge(&seqr, &map).unwrap().rows(), seq.n_tokens());
}
