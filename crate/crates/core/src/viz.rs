//! Binary PGM (P5) output for attention heat maps and partition masks.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::tokenmodel::{FrameLayout, Partition, Role};

/// Gray level of each role in partition masks.
pub fn role_gray(role: Role) -> u8 {
    match role {
        Role::Salient => 255,
        Role::Dst => 170,
        Role::Src => 85,
    }
}

fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// `cols × rows` heat map, linearly scaled so the largest entry is white.
pub fn heatmap_pgm<W: Write>(w: W, m: &Matrix) -> Result<()> {
    let max = m.data().iter().fold(0.0f64, |a, &b| a.max(b as f64));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels: Vec<u8> = m
        .data()
        .iter()
        .map(|&v| ((v as f64).max(0.0) * scale).round() as u8)
        .collect();
    write_pgm(w, m.cols(), m.rows(), &pixels)
}

/// `grid_w × grid_h` mask of one frame's patch tokens, one gray level per role.
pub fn partition_mask_pgm<W: Write>(
    w: W,
    partition: &Partition,
    layout: &FrameLayout,
    n_frames: usize,
    frame: usize,
) -> Result<()> {
    if frame >= n_frames {
        return Err(Error::Index(format!("frame {frame} of {n_frames}")));
    }
    let roles = partition.roles(n_frames * layout.tokens_per_frame())?;
    let base = frame * layout.tokens_per_frame();
    let mut pixels = Vec::with_capacity(layout.n_patches());
    for r in 0..layout.grid_h {
        for c in 0..layout.grid_w {
            pixels.push(role_gray(roles[base + layout.patch_position(r, c)]));
        }
    }
    write_pgm(w, layout.grid_w, layout.grid_h, &pixels)
}

/// Parses the header of a P5 file: `(width, height, offset of pixel data)`.
pub fn parse_pgm_header(bytes: &[u8]) -> Option<(usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" {
        return None;
    }
    Some((fields[1].parse().ok()?, fields[2].parse().ok()?, pos + 1))
}
