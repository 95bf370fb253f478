//! Component-wise timing and FLOP accounting for forward passes.
//!
//! A [`ProfileReport`] records, for every block, three components: frame
//! attention, global attention, and merge overhead (partition, matching,
//! merging and unmerging). Per-component FLOPs come from the per-thread
//! counter, so they sum exactly to the counter delta of the pass.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attnstack::{forward, ForwardOptions, Mode, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::numkernel::Real;
use crate::partitioner::MergeConfig;
use crate::synth;
use crate::tokenmodel::{FrameLayout, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FrameAttn,
    GlobalAttn,
    MergeOverhead,
}

impl Component {
    pub const ALL: [Component; 3] = [Self::FrameAttn, Self::GlobalAttn, Self::MergeOverhead];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FrameAttn => "frame_attn",
            Self::GlobalAttn => "global_attn",
            Self::MergeOverhead => "merge_overhead",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentProfile {
    pub component: Component,
    pub time_ns: u64,
    /// All matrix-product FLOPs of the component.
    pub flops: u64,
    /// Score and weighted-sum products only.
    pub attention_flops: u64,
    /// Tokens entering the component and tokens it operated on (they differ
    /// only for merged global attention and merge overhead).
    pub tokens_in: usize,
    pub tokens_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    pub block: usize,
    /// Rows entering and leaving the block.
    pub rows_in: usize,
    pub rows_out: usize,
    pub components: Vec<ComponentProfile>,
}

impl BlockProfile {
    pub fn component(&self, c: Component) -> Option<&ComponentProfile> {
        self.components.iter().find(|p| p.component == c)
    }

    pub fn time_ns(&self) -> u64 {
        self.components.iter().map(|c| c.time_ns).sum()
    }
}

/// Profile of one forward configuration (a single pass, or the per-entry
/// median over repeats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub mode: Mode,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub n_tokens: usize,
    pub layout: FrameLayout,
    pub model: ModelConfig,
    pub merge: MergeConfig,
    pub parallel: bool,
    pub repeats: usize,
    pub float_bits: u32,
    pub blocks: Vec<BlockProfile>,
    pub peak_retained_buffers: usize,
    /// Per-thread FLOP counter delta over the pass.
    pub counter_delta: u64,
}

impl ProfileReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_pass(
        seq: &TokenSequence,
        model: &ModelConfig,
        cfg: &MergeConfig,
        mode: Mode,
        parallel: bool,
        blocks: Vec<BlockProfile>,
        peak_retained_buffers: usize,
        counter_delta: u64,
    ) -> Self {
        Self {
            mode,
            n_frames: seq.n_frames(),
            tokens_per_frame: seq.layout().tokens_per_frame(),
            dim: seq.dim(),
            n_tokens: seq.n_tokens(),
            layout: *seq.layout(),
            model: model.clone(),
            merge: cfg.clone(),
            parallel,
            repeats: 1,
            float_bits: (std::mem::size_of::<Real>() * 8) as u32,
            blocks,
            peak_retained_buffers,
            counter_delta,
        }
    }

    pub fn total_time_ns(&self) -> u64 {
        self.blocks.iter().map(|b| b.time_ns()).sum()
    }

    fn sum_over(&self, c: Component, f: impl Fn(&ComponentProfile) -> u64) -> u64 {
        self.blocks
            .iter()
            .filter_map(|b| b.component(c))
            .map(f)
            .sum()
    }

    pub fn component_time_ns(&self, c: Component) -> u64 {
        self.sum_over(c, |p| p.time_ns)
    }

    pub fn component_flops(&self, c: Component) -> u64 {
        self.sum_over(c, |p| p.flops)
    }

    pub fn component_attention_flops(&self, c: Component) -> u64 {
        self.sum_over(c, |p| p.attention_flops)
    }

    pub fn total_flops(&self) -> u64 {
        Component::ALL
            .iter()
            .map(|&c| self.component_flops(c))
            .sum()
    }

    /// Share of total time spent in global attention.
    pub fn global_share(&self) -> f64 {
        let total = self.total_time_ns();
        if total == 0 {
            return 0.0;
        }
        self.component_time_ns(Component::GlobalAttn) as f64 / total as f64
    }

    fn same_setup(&self, other: &ProfileReport) -> bool {
        self.n_frames == other.n_frames
            && self.layout == other.layout
            && self.dim == other.dim
            && self.model == other.model
            && self.merge == other.merge
    }

    /// Builds a report whose times are per-entry medians over `runs`.
    pub fn median_of(runs: &[ProfileReport]) -> Result<ProfileReport> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Comparison("no runs to aggregate".into()))?;
        if runs.iter().any(|r| {
            !r.same_setup(first) || r.mode != first.mode || r.blocks.len() != first.blocks.len()
        }) {
            return Err(Error::Comparison("runs differ in setup".into()));
        }
        let mut out = first.clone();
        out.repeats = runs.len();
        for (bi, block) in out.blocks.iter_mut().enumerate() {
            for (ci, comp) in block.components.iter_mut().enumerate() {
                let mut times: Vec<u64> = runs
                    .iter()
                    .map(|r| r.blocks[bi].components[ci].time_ns)
                    .collect();
                times.sort_unstable();
                comp.time_ns = times[times.len() / 2];
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Stable CSV header for [`reports_to_csv`].
pub const CSV_HEADER: &str =
    "mode,n_frames,tokens_per_frame,dim,n_tokens,block,component,time_ns,flops,attention_flops,tokens_in,tokens_out";

/// One row per report × block × component. `time_ns` is the only
/// timing-dependent column.
pub fn reports_to_csv(reports: &[ProfileReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for b in &r.blocks {
            for c in &b.components {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.mode.name(),
                    r.n_frames,
                    r.tokens_per_frame,
                    r.dim,
                    r.n_tokens,
                    b.block,
                    c.component.name(),
                    c.time_ns,
                    c.flops,
                    c.attention_flops,
                    c.tokens_in,
                    c.tokens_out
                );
            }
        }
    }
    out
}

fn check_comparable(dense: &ProfileReport, merged: &ProfileReport) -> Result<()> {
    if !dense.same_setup(merged) {
        return Err(Error::Comparison(format!(
            "{} frames x {} tokens (dim {}) vs {} frames x {} tokens (dim {}), or differing model/merge settings",
            dense.n_frames,
            dense.tokens_per_frame,
            dense.dim,
            merged.n_frames,
            merged.tokens_per_frame,
            merged.dim
        )));
    }
    Ok(())
}

/// Total dense time over total merged time.
pub fn speedup(dense: &ProfileReport, merged: &ProfileReport) -> Result<f64> {
    check_comparable(dense, merged)?;
    Ok(dense.total_time_ns() as f64 / merged.total_time_ns().max(1) as f64)
}

/// Same ratio restricted to the global-attention component.
pub fn global_speedup(dense: &ProfileReport, merged: &ProfileReport) -> Result<f64> {
    check_comparable(dense, merged)?;
    Ok(dense.component_time_ns(Component::GlobalAttn) as f64
        / merged.component_time_ns(Component::GlobalAttn).max(1) as f64)
}

/// One point of a benchmark ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSize {
    pub n_frames: usize,
    pub layout: FrameLayout,
    pub dim: usize,
}

impl BenchSize {
    /// Patch-only frames of `tokens_per_frame` tokens.
    pub fn new(n_frames: usize, tokens_per_frame: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            n_frames,
            layout: FrameLayout::patch_only(tokens_per_frame)?,
            dim,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_frames * self.layout.tokens_per_frame()
    }

    /// Rough peak working-set estimate of one forward pass in bytes.
    pub fn estimated_bytes(&self, model: &ModelConfig, parallel: bool) -> u128 {
        let n = self.n_tokens() as u128;
        let c = self.dim as u128;
        let real = std::mem::size_of::<Real>() as u128;
        let threads = if parallel {
            rayon::current_num_threads() as u128
        } else {
            1
        };
        let rows = n * c * real * (12 + model.keep_layers.len() as u128);
        let scores = 128 * n * real * threads;
        rows + scores
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    pub parallel: bool,
    /// Sizes whose estimated working set exceeds this are skipped.
    pub max_bytes: u128,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 1,
            parallel: false,
            max_bytes: 8 << 30,
        }
    }
}

/// Reports for every feasible size (dense then merged) and the sizes that
/// were skipped, with the reason.
#[derive(Debug, Default)]
pub struct BenchOutcome {
    pub reports: Vec<ProfileReport>,
    pub skipped: Vec<(BenchSize, String)>,
    pub wall_time_ns: u128,
}

impl BenchOutcome {
    /// Dense/merged report pairs in ladder order.
    pub fn pairs(&self) -> Vec<(&ProfileReport, &ProfileReport)> {
        self.reports
            .chunks_exact(2)
            .map(|p| (&p[0], &p[1]))
            .collect()
    }
}

/// Median-of-`repeats` profiles for dense and merged forwards on identical
/// synthetic inputs at each size.
pub fn run_benchmark(
    model: &ModelConfig,
    cfg: &MergeConfig,
    sizes: &[BenchSize],
    opts: &BenchOptions,
    seed: u64,
) -> Result<BenchOutcome> {
    run_benchmark_modes(model, cfg, sizes, opts, seed, &[Mode::Dense, Mode::Merged])
}

/// [`run_benchmark`] restricted to the given modes.
pub fn run_benchmark_modes(
    model: &ModelConfig,
    cfg: &MergeConfig,
    sizes: &[BenchSize],
    opts: &BenchOptions,
    seed: u64,
    modes: &[Mode],
) -> Result<BenchOutcome> {
    let started = Instant::now();
    if opts.repeats == 0 {
        return Err(Error::Config("at least one repeat is required".into()));
    }
    let mut outcome = BenchOutcome::default();
    for &size in sizes {
        let model = ModelConfig {
            dim: size.dim,
            ..model.clone()
        };
        model.validate()?;
        let need = size.estimated_bytes(&model, opts.parallel);
        if size.n_frames == 0 || need > opts.max_bytes {
            outcome.skipped.push((
                size,
                Error::Resource(format!(
                    "{} tokens need about {need} bytes (limit {})",
                    size.n_tokens(),
                    opts.max_bytes
                ))
                .to_string(),
            ));
            continue;
        }
        let seq = synth::scene_sequence(size.layout, size.n_frames, size.dim, seed);
        let weights = ModelWeights::generate(&model);
        let fopts = ForwardOptions {
            parallel: opts.parallel,
            ..Default::default()
        };
        for &mode in modes {
            for _ in 0..opts.warmup {
                forward(&seq, &model, &weights, cfg, mode, &fopts)?;
            }
            let runs = (0..opts.repeats)
                .map(|_| forward(&seq, &model, &weights, cfg, mode, &fopts).map(|o| o.profile))
                .collect::<Result<Vec<_>>>()?;
            outcome.reports.push(ProfileReport::median_of(&runs)?);
        }
    }
    outcome.wall_time_ns = started.elapsed().as_nanos();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_blocks: 3,
            dim: 16,
            n_heads: 2,
            keep_layers: vec![2],
            weight_seed: 1,
        }
    }

    fn quick() -> BenchOptions {
        BenchOptions {
            repeats: 3,
            warmup: 1,
            ..Default::default()
        }
    }

    #[test]
    fn flops_close_against_counter() {
        let sizes = [BenchSize::new(4, 16, 16).unwrap()];
        let out =
            run_benchmark(&tiny_model(), &MergeConfig::default(), &sizes, &quick(), 3).unwrap();
        assert_eq!(out.reports.len(), 2);
        for r in &out.reports {
            assert_eq!(r.total_flops(), r.counter_delta);
            assert_eq!(r.repeats, 3);
            assert!(r
                .blocks
                .iter()
                .all(|b| b.rows_in == r.n_tokens && b.rows_out == r.n_tokens));
        }
    }

    #[test]
    fn attention_flop_ratio_is_squared_token_ratio() {
        let sizes = [BenchSize::new(4, 16, 16).unwrap()];
        let out =
            run_benchmark(&tiny_model(), &MergeConfig::default(), &sizes, &quick(), 3).unwrap();
        let (dense, merged) = out.pairs()[0];
        for (bd, bm) in dense.blocks.iter().zip(&merged.blocks) {
            let d = bd.component(Component::GlobalAttn).unwrap();
            let m = bm.component(Component::GlobalAttn).unwrap();
            let (n, kept) = (d.tokens_out as u64, m.tokens_out as u64);
            assert!(kept < n);
            assert_eq!(m.attention_flops * n * n, d.attention_flops * kept * kept);
        }
    }

    #[test]
    fn identical_reports_have_unit_speedup() {
        let sizes = [BenchSize::new(2, 8, 16).unwrap()];
        let out =
            run_benchmark(&tiny_model(), &MergeConfig::default(), &sizes, &quick(), 3).unwrap();
        let r = &out.reports[0];
        assert_eq!(speedup(r, r).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_reports_are_rejected() {
        let out = run_benchmark(
            &tiny_model(),
            &MergeConfig::default(),
            &[
                BenchSize::new(2, 8, 16).unwrap(),
                BenchSize::new(3, 8, 16).unwrap(),
            ],
            &quick(),
            3,
        )
        .unwrap();
        assert!(matches!(
            speedup(&out.reports[0], &out.reports[3]),
            Err(Error::Comparison(_))
        ));
    }

    #[test]
    fn oversized_inputs_are_skipped() {
        let opts = BenchOptions {
            max_bytes: 1 << 10,
            ..quick()
        };
        let out = run_benchmark(
            &tiny_model(),
            &MergeConfig::default(),
            &[BenchSize::new(64, 64, 16).unwrap()],
            &opts,
            0,
        )
        .unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.skipped.len(), 1);
        assert!(out.skipped[0].1.contains("resource"));
    }

    #[test]
    fn median_takes_middle_time() {
        let sizes = [BenchSize::new(2, 8, 16).unwrap()];
        let out =
            run_benchmark(&tiny_model(), &MergeConfig::default(), &sizes, &quick(), 3).unwrap();
        let mut runs = vec![out.reports[0].clone(); 3];
        for (i, r) in runs.iter_mut().enumerate() {
            r.blocks[0].components[0].time_ns = [30, 10, 20][i];
        }
        let m = ProfileReport::median_of(&runs).unwrap();
        assert_eq!(m.blocks[0].components[0].time_ns, 20);
    }

    #[test]
    fn csv_has_one_row_per_block_component() {
        let sizes = [BenchSize::new(2, 8, 16).unwrap()];
        let out =
            run_benchmark(&tiny_model(), &MergeConfig::default(), &sizes, &quick(), 3).unwrap();
        let csv = reports_to_csv(&out.reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 3 * 3);
    }
}
