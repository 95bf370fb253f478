//! Synthetic token sequences.
//!
//! `scene_sequence` mimics multi-view imagery: every frame looks at a shifted
//! window of one shared, spatially smooth feature field, so neighbouring
//! patches are similar and consecutive frames overlap. Camera tokens are
//! per-frame, register tokens are shared across frames.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numkernel::{prng_matrix, seeded_rng, Matrix, Real};
use crate::partitioner::mix_seed;
use crate::tokenmodel::{FrameLayout, TokenSequence};

/// Sinusoids per feature channel.
const WAVES: usize = 3;
/// Per-token noise relative to the unit-scale field.
const NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    /// Smooth shared field, overlapping frames.
    Scene,
    /// I.i.d. normal features.
    Random,
    /// Every token carries the same vector.
    Rank1,
}

impl FixtureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scene" => Some(Self::Scene),
            "random" => Some(Self::Random),
            "rank1" => Some(Self::Rank1),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Scene => "scene",
            Self::Random => "random",
            Self::Rank1 => "rank1",
        }
    }
}

pub fn generate(
    kind: FixtureKind,
    layout: FrameLayout,
    n_frames: usize,
    dim: usize,
    seed: u64,
) -> TokenSequence {
    match kind {
        FixtureKind::Scene => scene_sequence(layout, n_frames, dim, seed),
        FixtureKind::Random => random_sequence(layout, n_frames, dim, seed),
        FixtureKind::Rank1 => rank1_sequence(layout, n_frames, dim, seed),
    }
}

/// Unit-variance i.i.d. normal features.
pub fn random_sequence(
    layout: FrameLayout,
    n_frames: usize,
    dim: usize,
    seed: u64,
) -> TokenSequence {
    let rows = n_frames * layout.tokens_per_frame();
    let mut m = prng_matrix(rows, dim, seed);
    m.scale((dim as Real).sqrt());
    TokenSequence::new(layout, n_frames, m).expect("shape matches layout")
}

/// Every token equal to one seeded vector.
pub fn rank1_sequence(
    layout: FrameLayout,
    n_frames: usize,
    dim: usize,
    seed: u64,
) -> TokenSequence {
    let v = prng_matrix(1, dim, seed);
    let rows = n_frames * layout.tokens_per_frame();
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(v.row(0));
    }
    TokenSequence::new(layout, n_frames, m).expect("shape matches layout")
}

/// Smooth, overlapping multi-view features (see module docs).
pub fn scene_sequence(
    layout: FrameLayout,
    n_frames: usize,
    dim: usize,
    seed: u64,
) -> TokenSequence {
    let mut rng = seeded_rng(mix_seed(seed, 0x5CE7E));
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    // Field channel j: sum of WAVES sinusoids with wavelengths of a few cells.
    let waves: Vec<[(f64, f64, f64, f64); WAVES]> = (0..dim)
        .map(|_| {
            std::array::from_fn(|_| {
                let fy = rng.random_range(0.15..0.8);
                let fx = rng.random_range(0.15..0.8);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = normal(&mut rng) * (2.0 / WAVES as f64).sqrt();
                (fy, fx, phase, amp)
            })
        })
        .collect();
    let registers = prng_matrix(layout.n_register, dim, mix_seed(seed, 0x4E6));
    let shift = (layout.grid_w as f64 / 4.0).max(1.0);

    let tpf = layout.tokens_per_frame();
    let mut m = Matrix::zeros(n_frames * tpf, dim);
    let scale = (dim as f64).sqrt();
    for f in 0..n_frames {
        let base = f * tpf;
        let camera = prng_matrix(layout.n_camera, dim, mix_seed(seed, 0xCA0 + f as u64));
        for c in 0..layout.n_camera {
            for (o, &v) in m.row_mut(base + c).iter_mut().zip(camera.row(c)) {
                *o = (v as f64 * scale) as Real;
            }
        }
        for r in 0..layout.n_register {
            for (o, &v) in m
                .row_mut(base + layout.n_camera + r)
                .iter_mut()
                .zip(registers.row(r))
            {
                *o = (v as f64 * scale) as Real;
            }
        }
        let x_off = f as f64 * shift;
        for gy in 0..layout.grid_h {
            for gx in 0..layout.grid_w {
                let (y, x) = (gy as f64, gx as f64 + x_off);
                let row = m.row_mut(base + layout.patch_position(gy, gx));
                for (j, o) in row.iter_mut().enumerate() {
                    let v: f64 = waves[j]
                        .iter()
                        .map(|&(fy, fx, ph, amp)| amp * (fy * y + fx * x + ph).sin())
                        .sum();
                    *o = (v + NOISE * normal(&mut rng)) as Real;
                }
            }
        }
    }
    TokenSequence::new(layout, n_frames, m).expect("shape matches layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::cosine_sim;

    #[test]
    fn generators_are_deterministic() {
        let l = FrameLayout::new(1, 2, 4, 5).unwrap();
        for kind in [FixtureKind::Scene, FixtureKind::Random, FixtureKind::Rank1] {
            let a = generate(kind, l, 3, 8, 11);
            let b = generate(kind, l, 3, 8, 11);
            assert!(a.features().bitwise_eq(b.features()));
            assert_eq!(FixtureKind::parse(kind.name()), Some(kind));
        }
    }

    #[test]
    fn neighbouring_patches_are_more_similar_than_distant_ones() {
        let l = FrameLayout::new(0, 0, 16, 16).unwrap();
        let s = scene_sequence(l, 1, 32, 4);
        let f = s.features();
        let (mut near, mut far) = (0.0f64, 0.0f64);
        for y in 0..15 {
            for x in 0..8 {
                let a = f.row(l.patch_position(y, x));
                near += cosine_sim(a, f.row(l.patch_position(y, x + 1))).unwrap() as f64;
                far += cosine_sim(a, f.row(l.patch_position(15 - y, x + 8))).unwrap() as f64;
            }
        }
        assert!(near > far + 10.0, "near {near} far {far}");
    }

    #[test]
    fn rank1_rows_are_identical() {
        let s = rank1_sequence(FrameLayout::patch_only(6).unwrap(), 2, 4, 1);
        let f = s.features();
        assert!((1..12).all(|r| f.row(r) == f.row(0)));
    }
}
