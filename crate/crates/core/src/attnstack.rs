//! Alternating frame/global attention stack with an optional merge path.
//!
//! Each block applies frame attention (tokens attend within their own frame)
//! followed by global attention (all tokens attend to all tokens). Both
//! sublayers are residual; there is no MLP and no normalization. In merged
//! mode, global attention from `start_block` onward runs on the merged
//! sequence and its output is unmerged back to full length before the
//! residual is added.
//!
//! Only the outputs of `keep_layers` are retained. Block outputs are tracked
//! buffers, so the peak number of simultaneously live outputs is measured
//! rather than inferred.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::rc::Rc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mergecore::{match_tokens_with, merge, unmerge, MergeMap};
use crate::numkernel::{
    flops, gemm, matmul, prng_matrix, softmax_rows_in_place, Matrix, Operand, Real,
};
use crate::partitioner::{
    build_partition_with_salient, mix_seed, salient_for, MergeConfig, Strategy,
};
use crate::profiler::{BlockProfile, Component, ComponentProfile, ProfileReport};
use crate::tokenmodel::{Partition, TokenSequence};

/// Query rows processed per score block.
const QUERY_BLOCK: usize = 128;

/// Shape of the synthetic model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub keep_layers: Vec<usize>,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 24,
            dim: 64,
            n_heads: 4,
            keep_layers: vec![4, 11, 17, 23],
            weight_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible into {} heads",
                self.dim, self.n_heads
            )));
        }
        if let Some(&bad) = self.keep_layers.iter().find(|&&l| l >= self.n_blocks) {
            return Err(Error::Config(format!(
                "keep layer {bad} outside {} blocks",
                self.n_blocks
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Keep every block output.
    pub fn keep_all(mut self) -> Self {
        self.keep_layers = (0..self.n_blocks).collect();
        self
    }
}

/// Projections of one attention sublayer, each `dim×dim`.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

impl AttnWeights {
    /// Seeded projections; `seed` is mixed with a per-role tag.
    pub fn generate(dim: usize, seed: u64) -> Self {
        Self::generate_scaled(dim, seed, 1.0)
    }

    /// As [`AttnWeights::generate`], with the output projection multiplied
    /// by `output_scale`.
    pub fn generate_scaled(dim: usize, seed: u64, output_scale: Real) -> Self {
        let m = |tag: u64| prng_matrix(dim, dim, mix_seed(seed, tag));
        let mut output = m(4);
        if output_scale != 1.0 {
            output.scale(output_scale);
        }
        Self {
            query: m(1),
            key: m(2),
            value: m(3),
            output,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub frame: AttnWeights,
    pub global: AttnWeights,
}

/// All block weights, derived from `weight_seed ⊕ block ⊕ role`.
///
/// Output projections are scaled by `1/√(2·n_blocks)` so that the `2·L`
/// unnormalized residual branches keep activations bounded.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
}

impl ModelWeights {
    pub fn generate(model: &ModelConfig) -> Self {
        let out_scale = (1.0 / (2.0 * model.n_blocks.max(1) as f64).sqrt()) as Real;
        let blocks = (0..model.n_blocks)
            .map(|b| {
                let base = mix_seed(model.weight_seed, b as u64);
                BlockWeights {
                    frame: AttnWeights::generate_scaled(model.dim, mix_seed(base, 0xF), out_scale),
                    global: AttnWeights::generate_scaled(model.dim, mix_seed(base, 0x6), out_scale),
                }
            })
            .collect();
        Self { blocks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dense,
    Merged,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Merged => "merged",
        }
    }
}

/// Attention sublayer output before the residual, with the cost of the
/// score and weighted-sum products (`4·n²·dim` for one span of `n` rows).
#[derive(Debug)]
pub struct AttentionOutput {
    pub delta: Matrix,
    pub attention_flops: u64,
}

/// Multi-head softmax attention computed independently inside consecutive
/// spans of `span_len` rows (`span_len == x.rows()` is full attention).
pub fn attention(
    x: &Matrix,
    w: &AttnWeights,
    n_heads: usize,
    span_len: usize,
    parallel: bool,
) -> Result<AttentionOutput> {
    let (n, dim) = x.shape();
    if w.dim() != dim {
        return Err(Error::Shape(format!(
            "features of width {dim} with weights of width {}",
            w.dim()
        )));
    }
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::Shape(format!("{dim} columns into {n_heads} heads")));
    }
    if span_len == 0 || n % span_len != 0 {
        return Err(Error::Shape(format!("{n} rows into spans of {span_len}")));
    }
    let q = matmul(x, &w.query)?;
    let k = matmul(x, &w.key)?;
    let v = matmul(x, &w.value)?;

    let head_dim = dim / n_heads;
    let scale = 1.0 / (head_dim as Real).sqrt();
    let mut heads = Matrix::zeros(n, dim);

    // One task per (span, query block); tasks own disjoint output rows.
    let mut tasks: Vec<(usize, usize, &mut [Real])> = Vec::new();
    let mut rest = heads.data_mut();
    for span_start in (0..n).step_by(span_len) {
        for q0 in (span_start..span_start + span_len).step_by(QUERY_BLOCK) {
            let rows = QUERY_BLOCK.min(span_start + span_len - q0);
            let (chunk, tail) = rest.split_at_mut(rows * dim);
            rest = tail;
            tasks.push((span_start, q0, chunk));
        }
    }

    let run = |(span_start, q0, out): (usize, usize, &mut [Real])| -> u64 {
        let rows = out.len() / dim;
        let mut scores = vec![0.0 as Real; rows * span_len];
        let (_, cost) = flops::measure(|| {
            for h in 0..n_heads {
                let col = h * head_dim;
                gemm(
                    rows,
                    head_dim,
                    span_len,
                    scale,
                    Operand::row_major(&q.data()[q0 * dim + col..], dim),
                    Operand::transposed(&k.data()[span_start * dim + col..], dim),
                    0.0,
                    &mut scores,
                    span_len,
                );
                softmax_rows_in_place(&mut scores, span_len);
                gemm(
                    rows,
                    span_len,
                    head_dim,
                    1.0,
                    Operand::row_major(&scores, span_len),
                    Operand::row_major(&v.data()[span_start * dim + col..], dim),
                    0.0,
                    &mut out[col..],
                    dim,
                );
            }
        });
        cost
    };

    let attention_flops = if parallel {
        flops::credit_parallel(|| tasks.into_par_iter().map(run).sum())
    } else {
        tasks.into_iter().map(run).sum()
    };

    let delta = matmul(&heads, &w.output)?;
    Ok(AttentionOutput {
        delta,
        attention_flops,
    })
}

/// Per-head `n×n` probability matrices of full attention over `x`.
pub fn attention_maps(x: &Matrix, w: &AttnWeights, n_heads: usize) -> Result<Vec<Matrix>> {
    let (n, dim) = x.shape();
    if w.dim() != dim || n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::Shape(format!(
            "features {:?} with weights of width {} and {n_heads} heads",
            x.shape(),
            w.dim()
        )));
    }
    let q = matmul(x, &w.query)?;
    let k = matmul(x, &w.key)?;
    let head_dim = dim / n_heads;
    let scale = 1.0 / (head_dim as Real).sqrt();
    (0..n_heads)
        .map(|h| {
            let col = h * head_dim;
            let mut p = Matrix::zeros(n, n);
            gemm(
                n,
                head_dim,
                n,
                scale,
                Operand::row_major(&q.data()[col..], dim),
                Operand::transposed(&k.data()[col..], dim),
                0.0,
                p.data_mut(),
                n,
            );
            softmax_rows_in_place(p.data_mut(), n);
            Ok(p)
        })
        .collect()
}

/// Within-frame attention plus residual.
pub fn frame_attention(
    seq: &TokenSequence,
    w: &AttnWeights,
    n_heads: usize,
) -> Result<TokenSequence> {
    let out = attention(
        seq.features(),
        w,
        n_heads,
        seq.layout().tokens_per_frame(),
        false,
    )?;
    seq.with_features(seq.features().add(&out.delta)?)
}

/// Attention across all tokens plus residual.
pub fn global_attention_dense(
    seq: &TokenSequence,
    w: &AttnWeights,
    n_heads: usize,
) -> Result<TokenSequence> {
    let out = attention(seq.features(), w, n_heads, seq.n_tokens(), false)?;
    seq.with_features(seq.features().add(&out.delta)?)
}

/// Global attention on the merged sequence, unmerged back to `N` rows, plus
/// residual. Blocks before `cfg.start_block` take the dense path.
pub fn global_attention_merged(
    seq: &TokenSequence,
    w: &AttnWeights,
    n_heads: usize,
    cfg: &MergeConfig,
    block_idx: usize,
) -> Result<TokenSequence> {
    if block_idx < cfg.start_block {
        return global_attention_dense(seq, w, n_heads);
    }
    let block_cfg = MergeConfig {
        seed: cfg.block_seed(block_idx),
        ..cfg.clone()
    };
    let partition = crate::partitioner::build_partition(seq, &block_cfg)?;
    let map = match_tokens_with(seq.features(), &partition, false)?;
    let reduced = merge(seq.features(), &map, cfg.merge_rule)?;
    let out = attention(&reduced, w, n_heads, reduced.rows(), false)?;
    let full = unmerge(&out.delta, &map)?;
    seq.with_features(seq.features().add(&full)?)
}

/// Forward-pass switches that do not affect values.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Let the attention kernel split work across threads.
    pub parallel: bool,
    /// Blocks whose global-attention probability maps are captured.
    pub capture_blocks: Vec<usize>,
}

/// Global-attention probabilities captured at one block (one matrix per head).
#[derive(Debug, Clone)]
pub struct CapturedAttention {
    pub block: usize,
    pub heads: Vec<Matrix>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `(block, output)` for every block in `keep_layers`, ascending.
    pub retained: Vec<(usize, Matrix)>,
    pub profile: ProfileReport,
    pub captured: Vec<CapturedAttention>,
    /// Partition used at each merged block (empty in dense mode).
    pub partitions: Vec<(usize, Partition)>,
}

/// Counts live block-output buffers and remembers the peak.
#[derive(Debug, Default)]
struct BufferTracker {
    live: Cell<usize>,
    peak: Cell<usize>,
}

struct TrackedBuffer {
    matrix: Matrix,
    tracker: Rc<BufferTracker>,
}

impl TrackedBuffer {
    fn new(matrix: Matrix, tracker: &Rc<BufferTracker>) -> Self {
        let live = tracker.live.get() + 1;
        tracker.live.set(live);
        tracker.peak.set(tracker.peak.get().max(live));
        Self {
            matrix,
            tracker: Rc::clone(tracker),
        }
    }
}

impl Drop for TrackedBuffer {
    fn drop(&mut self) {
        self.tracker.live.set(self.tracker.live.get() - 1);
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, u64, u64)> {
    let start = Instant::now();
    let (out, cost) = flops::measure(f);
    let ns = start.elapsed().as_nanos() as u64;
    Ok((out?, ns, cost))
}

/// Runs all blocks, retaining only `keep_layers` outputs.
pub fn forward(
    seq: &TokenSequence,
    model: &ModelConfig,
    weights: &ModelWeights,
    cfg: &MergeConfig,
    mode: Mode,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    model.validate()?;
    cfg.validate()?;
    if seq.dim() != model.dim {
        return Err(Error::Shape(format!(
            "sequence width {} for a model of width {}",
            seq.dim(),
            model.dim
        )));
    }
    if weights.blocks.len() < model.n_blocks {
        return Err(Error::Shape(format!(
            "{} weight blocks for {} model blocks",
            weights.blocks.len(),
            model.n_blocks
        )));
    }

    let keep: BTreeSet<usize> = model.keep_layers.iter().copied().collect();
    let capture: BTreeSet<usize> = opts.capture_blocks.iter().copied().collect();
    let n = seq.n_tokens();
    let tpf = seq.layout().tokens_per_frame();
    let tracker = Rc::new(BufferTracker::default());
    let counter_start = flops::local_count();
    let mut capture_flops = 0u64;

    let mut retained: Vec<(usize, Rc<TrackedBuffer>)> = Vec::new();
    let mut current: Option<Rc<TrackedBuffer>> = None;
    let mut blocks = Vec::with_capacity(model.n_blocks);
    let mut captured = Vec::new();
    let mut partitions = Vec::new();
    let mut salient: Option<Vec<usize>> = None;
    let mut reused: Option<Partition> = None;

    for (b, bw) in weights.blocks.iter().enumerate().take(model.n_blocks) {
        let input = current.as_ref().map_or(seq.features(), |c| &c.matrix);

        let (framed, frame_ns, frame_cost) = timed(|| {
            let out = attention(input, &bw.frame, model.n_heads, tpf, opts.parallel)?;
            Ok((input.add(&out.delta)?, out.attention_flops))
        })?;
        let (framed, frame_attn_flops) = framed;
        let frame = ComponentProfile {
            component: Component::FrameAttn,
            time_ns: frame_ns,
            flops: frame_cost,
            attention_flops: frame_attn_flops,
            tokens_in: n,
            tokens_out: n,
        };

        if capture.contains(&b) {
            // Instrumentation only: kept out of every component and the counter delta.
            let (heads, cost) =
                flops::measure(|| attention_maps(&framed, &bw.global, model.n_heads));
            capture_flops += cost;
            captured.push(CapturedAttention {
                block: b,
                heads: heads?,
            });
        }

        let merging = mode == Mode::Merged && b >= cfg.start_block;
        let mut overhead = ComponentProfile {
            component: Component::MergeOverhead,
            time_ns: 0,
            flops: 0,
            attention_flops: 0,
            tokens_in: n,
            tokens_out: n,
        };

        let (output, global) = if merging {
            let framed_seq = seq.with_features(framed)?;
            let ((map, reduced), t_pre, c_pre) = timed(|| {
                let partition = match &reused {
                    Some(p) => p.clone(),
                    None => {
                        let sal = salient.get_or_insert_with(|| salient_for(&framed_seq, cfg));
                        let block_cfg = MergeConfig {
                            seed: cfg.block_seed(b),
                            ..cfg.clone()
                        };
                        build_partition_with_salient(&framed_seq, &block_cfg, sal)?
                    }
                };
                if cfg.reuse_partition && reused.is_none() {
                    reused = Some(partition.clone());
                }
                let map = match_tokens_with(framed_seq.features(), &partition, opts.parallel)?;
                partitions.push((b, partition));
                let reduced = merge(framed_seq.features(), &map, cfg.merge_rule)?;
                Ok((map, reduced))
            })?;
            let m = reduced.rows();
            let (attn, t_attn, c_attn) =
                timed(|| attention(&reduced, &bw.global, model.n_heads, m, opts.parallel))?;
            let (full, t_post, c_post) = timed(|| unmerge(&attn.delta, &map))?;
            let (output, t_res, c_res) = timed(|| framed_seq.features().add(&full))?;
            overhead.time_ns = t_pre + t_post;
            overhead.flops = c_pre + c_post;
            overhead.tokens_out = m;
            let global = ComponentProfile {
                component: Component::GlobalAttn,
                time_ns: t_attn + t_res,
                flops: c_attn + c_res,
                attention_flops: attn.attention_flops,
                tokens_in: m,
                tokens_out: m,
            };
            debug_assert_merge_shape(&map, n);
            (output, global)
        } else {
            let (out, t, c) = timed(|| {
                let attn = attention(&framed, &bw.global, model.n_heads, n, opts.parallel)?;
                Ok((framed.add(&attn.delta)?, attn.attention_flops))
            })?;
            let (output, attention_flops) = out;
            let global = ComponentProfile {
                component: Component::GlobalAttn,
                time_ns: t,
                flops: c,
                attention_flops,
                tokens_in: n,
                tokens_out: n,
            };
            (output, global)
        };

        let rows_out = output.rows();
        let out = Rc::new(TrackedBuffer::new(output, &tracker));
        if keep.contains(&b) {
            retained.push((b, Rc::clone(&out)));
        }
        current = Some(out);

        blocks.push(BlockProfile {
            block: b,
            rows_in: n,
            rows_out,
            components: vec![frame, global, overhead],
        });
    }
    drop(current);

    let counter_delta = flops::local_count() - counter_start - capture_flops;
    let peak = tracker.peak.get();
    let retained = retained
        .into_iter()
        .map(|(b, buf)| {
            let matrix = match Rc::try_unwrap(buf) {
                Ok(mut t) => std::mem::replace(&mut t.matrix, Matrix::zeros(0, 0)),
                Err(shared) => shared.matrix.clone(),
            };
            (b, matrix)
        })
        .collect();

    let profile = ProfileReport::from_pass(
        seq,
        model,
        cfg,
        mode,
        opts.parallel,
        blocks,
        peak,
        counter_delta,
    );
    Ok(ForwardOutput {
        retained,
        profile,
        captured,
        partitions,
    })
}

fn debug_assert_merge_shape(map: &MergeMap, n: usize) {
    debug_assert_eq!(map.n_tokens(), n);
    debug_assert_eq!(map.n_kept() + map.n_merged(), n);
}

/// Whether `cfg` can merge anything at all in an `n_blocks`-block model.
pub fn merges_anything(cfg: &MergeConfig, n_blocks: usize) -> bool {
    cfg.start_block < n_blocks
        && match cfg.strategy {
            Strategy::RandomBaseline => cfg.merge_ratio > 0.0,
            Strategy::FixedStrideBaseline => cfg.effective_stride() > 1,
            Strategy::FastVggt => cfg.merge_ratio > 0.0 && cfg.effective_region_stride() > 1,
        }
}
