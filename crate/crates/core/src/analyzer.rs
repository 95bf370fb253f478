//! Attention-map redundancy metrics.
//!
//! Row similarity measures how alike the attention distributions of
//! different query tokens are (mean cosine similarity over row pairs; 1 means
//! every token attends identically). Frame-0 mass is the share of each
//! query's attention that lands on first-frame keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attnstack::CapturedAttention;
use crate::error::{Error, Result};
use crate::numkernel::{cosine_from_parts, dot_f64, l2_norm, seeded_rng, Matrix};
use crate::tokenmodel::FrameLayout;

/// Default number of sampled row pairs.
pub const DEFAULT_SAMPLE_PAIRS: usize = 4096;
/// Below this many rows every pair is scored.
pub const EXHAUSTIVE_BELOW: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub pairs: usize,
    pub exhaustive: bool,
    pub mean: f64,
    pub min: f64,
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl SimilarityStats {
    fn from_values(mut v: Vec<f64>, exhaustive: bool) -> Self {
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        Self {
            pairs: v.len(),
            exhaustive,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p10: q(0.1),
            median: q(0.5),
            p90: q(0.9),
            max: v[v.len() - 1],
        }
    }

    /// Element-wise mean over heads.
    fn average(stats: &[SimilarityStats]) -> Self {
        let k = stats.len() as f64;
        let avg = |f: fn(&SimilarityStats) -> f64| stats.iter().map(f).sum::<f64>() / k;
        Self {
            pairs: stats.iter().map(|s| s.pairs).sum(),
            exhaustive: stats.iter().all(|s| s.exhaustive),
            mean: avg(|s| s.mean),
            min: avg(|s| s.min),
            p10: avg(|s| s.p10),
            median: avg(|s| s.median),
            p90: avg(|s| s.p90),
            max: avg(|s| s.max),
        }
    }
}

/// Pair budget under the default policy: every pair below
/// [`EXHAUSTIVE_BELOW`] rows, [`DEFAULT_SAMPLE_PAIRS`] otherwise.
pub fn default_pairs(n_rows: usize) -> usize {
    if n_rows < EXHAUSTIVE_BELOW {
        0
    } else {
        DEFAULT_SAMPLE_PAIRS
    }
}

/// Cosine similarity between attention rows. `sample_pairs == 0`, or a
/// budget covering every pair, scores all `n(n−1)/2` distinct pairs;
/// otherwise that many seeded-random distinct pairs are drawn.
pub fn attention_row_similarity(
    attn: &Matrix,
    sample_pairs: usize,
    seed: u64,
) -> Result<SimilarityStats> {
    let n = attn.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "row similarity needs at least 2 rows, got {n}"
        )));
    }
    let norms: Vec<f64> = attn.row_iter().map(l2_norm).collect();
    let sim = |i: usize, j: usize| {
        cosine_from_parts(dot_f64(attn.row(i), attn.row(j)), norms[i], norms[j])
    };
    let all_pairs = n * (n - 1) / 2;
    if sample_pairs == 0 || sample_pairs >= all_pairs {
        let mut v = Vec::with_capacity(all_pairs);
        for i in 0..n {
            for j in i + 1..n {
                v.push(sim(i, j));
            }
        }
        return Ok(SimilarityStats::from_values(v, true));
    }
    let mut rng = seeded_rng(seed);
    let v = (0..sample_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            sim(i, j)
        })
        .collect();
    Ok(SimilarityStats::from_values(v, false))
}

/// Per query token, the total attention weight on frame-0 keys.
pub fn frame0_attention_mass(
    attn: &Matrix,
    layout: &FrameLayout,
    n_frames: usize,
) -> Result<Vec<f64>> {
    let n = n_frames * layout.tokens_per_frame();
    if attn.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "attention {:?} for {n} tokens",
            attn.shape()
        )));
    }
    let tpf = layout.tokens_per_frame();
    Ok(attn
        .row_iter()
        .map(|row| row[..tpf].iter().map(|&v| v as f64).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame0Mass {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Uniform-attention reference value.
    pub uniform: f64,
    /// Per-token fraction, averaged over heads.
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRedundancy {
    pub block: usize,
    pub n_tokens: usize,
    pub per_head: Vec<SimilarityStats>,
    /// Per-head statistics averaged over heads.
    pub similarity: SimilarityStats,
    pub frame0_mass: Frame0Mass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub n_frames: usize,
    pub layout: FrameLayout,
    pub blocks: Vec<BlockRedundancy>,
}

impl RedundancyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Redundancy statistics of one captured block. `sample_pairs` of `None`
/// applies [`default_pairs`].
pub fn analyze_block(
    captured: &CapturedAttention,
    layout: &FrameLayout,
    n_frames: usize,
    sample_pairs: Option<usize>,
    seed: u64,
) -> Result<BlockRedundancy> {
    let heads = &captured.heads;
    if heads.is_empty() {
        return Err(Error::Degenerate("no attention heads captured".into()));
    }
    let n = heads[0].rows();
    let pairs = sample_pairs.unwrap_or_else(|| default_pairs(n));
    let per_head = heads
        .iter()
        .enumerate()
        .map(|(h, m)| attention_row_similarity(m, pairs, seed.wrapping_add(h as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut per_token = vec![0.0f64; n];
    for m in heads {
        for (acc, v) in per_token
            .iter_mut()
            .zip(frame0_attention_mass(m, layout, n_frames)?)
        {
            *acc += v / heads.len() as f64;
        }
    }
    let frame0_mass = Frame0Mass {
        mean: per_token.iter().sum::<f64>() / n as f64,
        min: per_token.iter().copied().fold(f64::INFINITY, f64::min),
        max: per_token.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        uniform: 1.0 / n_frames as f64,
        per_token,
    };
    Ok(BlockRedundancy {
        block: captured.block,
        n_tokens: n,
        similarity: SimilarityStats::average(&per_head),
        per_head,
        frame0_mass,
    })
}
