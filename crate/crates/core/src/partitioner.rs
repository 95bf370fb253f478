//! Token partitioning strategies.
//!
//! Two naive baselines split tokens without regard to frame structure:
//! seeded random sampling at ratio `r` and fixed-stride dst selection with
//! stride `s`. The frame-aware strategy composes three rules, in order:
//!
//! 1. **reference**: every token of frame 0 is dst and can never be src;
//! 2. **salient**: a fixed fraction of each remaining frame's patch tokens is
//!    protected from merging (plus that frame's camera/register tokens);
//! 3. **uniform region sampling**: each remaining frame's patch grid is
//!    tiled into `K×K` cells, one seeded-random non-salient token per cell is
//!    dst, the rest of the cell is src.
//!
//! Reference and salient protection can be switched off individually to
//! reproduce the intermediate ablation rows.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{l2_norm, seeded_rng};
use crate::tokenmodel::{Partition, Role, TokenSequence};

/// Slack for floor/ceil of ratios that are exact in decimal but not in binary.
const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomBaseline,
    FixedStrideBaseline,
    FastVggt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalientMode {
    FixedStride,
    TopkNorm,
}

/// How several src tokens assigned to one dst are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Uniform mean of the dst and all of its src tokens.
    Uniform,
    /// Repeated pairwise averaging `(x_d + x_s)/2`, src in ascending index order.
    Sequential,
}

/// Merging policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub strategy: Strategy,
    /// Fraction of tokens to merge. Drives the random baseline directly and
    /// derives `stride` / `region_stride` when those are unset.
    pub merge_ratio: f64,
    /// Baseline dst stride `s`.
    pub stride: Option<usize>,
    /// Region cell side `K`.
    pub region_stride: Option<usize>,
    pub use_reference: bool,
    pub use_salient: bool,
    pub salient_fraction: f64,
    pub salient_mode: SalientMode,
    /// First block whose global attention is merged.
    pub start_block: usize,
    pub seed: u64,
    pub merge_rule: MergeRule,
    /// Keep the first merged block's partition for all later blocks.
    pub reuse_partition: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FastVggt,
            merge_ratio: 0.9,
            stride: None,
            region_stride: None,
            use_reference: true,
            use_salient: true,
            salient_fraction: 0.10,
            salient_mode: SalientMode::FixedStride,
            start_block: 0,
            seed: 0,
            merge_rule: MergeRule::Uniform,
            reuse_partition: false,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.merge_ratio) {
            return Err(Error::Config(format!(
                "merge ratio {} outside [0, 1]",
                self.merge_ratio
            )));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.region_stride == Some(0) {
            return Err(Error::Config("region stride must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.salient_fraction) {
            return Err(Error::Config(format!(
                "salient fraction {} outside [0, 1)",
                self.salient_fraction
            )));
        }
        Ok(())
    }

    /// Baseline stride: explicit, or the smallest `s` with `1 − 1/s ≥ r`.
    pub fn effective_stride(&self) -> usize {
        self.stride.unwrap_or_else(|| {
            if self.merge_ratio >= 1.0 {
                usize::MAX
            } else {
                ((1.0 / (1.0 - self.merge_ratio)) - RATIO_EPS)
                    .ceil()
                    .max(1.0) as usize
            }
        })
    }

    /// Region cell side: explicit, or the smallest `K` with `1 − 1/K² ≥ r`.
    pub fn effective_region_stride(&self) -> usize {
        self.region_stride.unwrap_or_else(|| {
            if self.merge_ratio >= 1.0 {
                usize::MAX
            } else {
                ((1.0 / (1.0 - self.merge_ratio)).sqrt() - RATIO_EPS)
                    .ceil()
                    .max(1.0) as usize
            }
        })
    }

    /// Deterministic per-block variant of the seed.
    pub fn block_seed(&self, block: usize) -> u64 {
        mix_seed(self.seed, block as u64)
    }
}

/// SplitMix64 finalizer over `seed ⊕ tag`.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named strategy compositions swept by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyVariant {
    Random,
    FixedStride,
    /// Region sampling only.
    Uniform,
    /// Region sampling plus reference frame.
    UniformReference,
    /// Region sampling, reference frame and salient tokens.
    FastVggt,
}

impl StrategyVariant {
    pub const ALL: [StrategyVariant; 5] = [
        Self::Random,
        Self::FixedStride,
        Self::Uniform,
        Self::UniformReference,
        Self::FastVggt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::FixedStride => "fixed_stride",
            Self::Uniform => "uniform",
            Self::UniformReference => "uniform_ref",
            Self::FastVggt => "fastvggt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }

    /// `base` with the strategy fields overwritten for this variant.
    pub fn configure(&self, base: &MergeConfig) -> MergeConfig {
        let mut cfg = base.clone();
        let (strategy, reference, salient) = match self {
            Self::Random => (Strategy::RandomBaseline, false, false),
            Self::FixedStride => (Strategy::FixedStrideBaseline, false, false),
            Self::Uniform => (Strategy::FastVggt, false, false),
            Self::UniformReference => (Strategy::FastVggt, true, false),
            Self::FastVggt => (Strategy::FastVggt, true, true),
        };
        cfg.strategy = strategy;
        cfg.use_reference = reference;
        cfg.use_salient = salient;
        cfg
    }
}

/// Seeded random split: `⌊r·N⌋` src tokens, the rest dst, no salient.
pub fn partition_random(seq: &TokenSequence, ratio: f64, seed: u64) -> Partition {
    let n = seq.n_tokens();
    let n_src = ((ratio.clamp(0.0, 1.0) * n as f64) + RATIO_EPS).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut roles = vec![Role::Dst; n];
    for &i in &order[..n_src.min(n)] {
        roles[i] = Role::Src;
    }
    Partition::from_roles(&roles)
}

/// Every `s`-th token (global order, from 0) is dst, all others src.
pub fn partition_fixed_stride(seq: &TokenSequence, stride: usize) -> Partition {
    let stride = stride.max(1);
    let roles: Vec<Role> = (0..seq.n_tokens())
        .map(|i| {
            if i % stride == 0 {
                Role::Dst
            } else {
                Role::Src
            }
        })
        .collect();
    Partition::from_roles(&roles)
}

/// Global indices of frame 0.
pub fn select_reference(seq: &TokenSequence) -> Vec<usize> {
    seq.frame_range(0).collect()
}

/// Salient patch tokens of every non-first frame.
pub fn select_salient(seq: &TokenSequence, mode: SalientMode, fraction: f64) -> Vec<usize> {
    select_salient_in_frames(seq, mode, fraction, 1..seq.n_frames())
}

/// Per frame, `⌊fraction·tokens_per_frame⌋` patch tokens (capped by what
/// the grid holds). `FixedStride` takes patch positions `0, t, 2t, …` with
/// `t = ⌊1/fraction⌋`; `TopkNorm` takes the largest-norm patches, ties to
/// the lower index.
pub fn select_salient_in_frames(
    seq: &TokenSequence,
    mode: SalientMode,
    fraction: f64,
    frames: impl IntoIterator<Item = usize>,
) -> Vec<usize> {
    if fraction <= 0.0 {
        return Vec::new();
    }
    let layout = seq.layout();
    let per_frame = ((fraction * layout.tokens_per_frame() as f64) + RATIO_EPS).floor() as usize;
    let per_frame = per_frame.min(layout.n_patches());
    if per_frame == 0 {
        return Vec::new();
    }
    let first_patch = layout.n_special();
    let mut out = Vec::new();
    for frame in frames {
        let base = seq.frame_range(frame).start + first_patch;
        match mode {
            SalientMode::FixedStride => {
                let step = ((1.0 / fraction) + RATIO_EPS).floor().max(1.0) as usize;
                out.extend(
                    (0..per_frame)
                        .map(|i| i * step)
                        .take_while(|&p| p < layout.n_patches())
                        .map(|p| base + p),
                );
            }
            SalientMode::TopkNorm => {
                let feats = seq.features();
                let mut scored: Vec<(f64, usize)> = (base..base + layout.n_patches())
                    .map(|i| (l2_norm(feats.row(i)), i))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut picked: Vec<usize> = scored[..per_frame].iter().map(|&(_, i)| i).collect();
                picked.sort_unstable();
                out.extend(picked);
            }
        }
    }
    out
}

/// Region-based sampling over the patch grid of every frame not claimed by
/// `reference`.
///
/// Precedence: reference tokens are dst; salient tokens stay salient; the
/// camera/register tokens of sampled frames are salient; within each `K×K`
/// cell (edge cells may be smaller) one seeded-random non-salient token is
/// dst and the rest are src. A cell whose tokens are all salient yields no dst.
pub fn partition_uniform_region(
    seq: &TokenSequence,
    region_stride: usize,
    reference: &[usize],
    salient: &[usize],
    seed: u64,
) -> Partition {
    let n = seq.n_tokens();
    let layout = *seq.layout();
    let k = region_stride.max(1);
    let mut roles: Vec<Option<Role>> = vec![None; n];
    for &i in reference {
        roles[i] = Some(Role::Dst);
    }
    for &i in salient {
        roles[i].get_or_insert(Role::Salient);
    }

    let mut rng = seeded_rng(seed);
    let mut candidates = Vec::with_capacity(k.saturating_mul(k).min(layout.n_patches()));
    for frame in 0..seq.n_frames() {
        let range = seq.frame_range(frame);
        if range.clone().all(|i| roles[i] == Some(Role::Dst)) {
            continue;
        }
        let base = range.start;
        for pos in 0..layout.n_special() {
            roles[base + pos].get_or_insert(Role::Salient);
        }
        for cell_r in (0..layout.grid_h).step_by(k) {
            for cell_c in (0..layout.grid_w).step_by(k) {
                candidates.clear();
                for r in cell_r..(cell_r.saturating_add(k)).min(layout.grid_h) {
                    for c in cell_c..(cell_c.saturating_add(k)).min(layout.grid_w) {
                        let g = base + layout.patch_position(r, c);
                        if roles[g].is_none() {
                            candidates.push(g);
                        }
                    }
                }
                if candidates.is_empty() {
                    continue;
                }
                let pick = rng.random_range(0..candidates.len());
                for (j, &g) in candidates.iter().enumerate() {
                    roles[g] = Some(if j == pick { Role::Dst } else { Role::Src });
                }
            }
        }
    }
    // Anything left (only possible with hand-made inputs) stays as dst.
    let roles: Vec<Role> = roles.into_iter().map(|r| r.unwrap_or(Role::Dst)).collect();
    Partition::from_roles(&roles)
}

/// Frames that region sampling and salient selection apply to.
fn sampled_frames(seq: &TokenSequence, cfg: &MergeConfig) -> std::ops::Range<usize> {
    if cfg.use_reference {
        1..seq.n_frames()
    } else {
        0..seq.n_frames()
    }
}

/// Salient set the frame-aware strategy would use for `seq` under `cfg`.
pub fn salient_for(seq: &TokenSequence, cfg: &MergeConfig) -> Vec<usize> {
    if cfg.strategy != Strategy::FastVggt || !cfg.use_salient {
        return Vec::new();
    }
    select_salient_in_frames(
        seq,
        cfg.salient_mode,
        cfg.salient_fraction,
        sampled_frames(seq, cfg),
    )
}

/// Dispatches on `cfg.strategy`.
pub fn build_partition(seq: &TokenSequence, cfg: &MergeConfig) -> Result<Partition> {
    let salient = salient_for(seq, cfg);
    build_partition_with_salient(seq, cfg, &salient)
}

/// As [`build_partition`], with a precomputed salient set (ignored by the
/// baselines).
pub fn build_partition_with_salient(
    seq: &TokenSequence,
    cfg: &MergeConfig,
    salient: &[usize],
) -> Result<Partition> {
    cfg.validate()?;
    let p = match cfg.strategy {
        Strategy::RandomBaseline => partition_random(seq, cfg.merge_ratio, cfg.seed),
        Strategy::FixedStrideBaseline => partition_fixed_stride(seq, cfg.effective_stride()),
        Strategy::FastVggt => {
            let reference = if cfg.use_reference {
                select_reference(seq)
            } else {
                Vec::new()
            };
            // A zero ratio disables merging regardless of an explicit K.
            let k = if cfg.merge_ratio == 0.0 {
                1
            } else {
                cfg.effective_region_stride()
            };
            partition_uniform_region(seq, k, &reference, salient, cfg.seed)
        }
    };
    debug_assert!(p.validate(seq.n_tokens()).is_ok());
    Ok(p)
}
