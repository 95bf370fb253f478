//! Multi-frame token sequences and partition bookkeeping.
//!
//! Tokens of one frame are laid out as: camera tokens, register tokens, then
//! the patch grid in row-major order. Frames are concatenated, so the global
//! index of `(frame, pos)` is `frame·tokens_per_frame + pos`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Real};

/// Per-frame token layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameLayout {
    pub n_camera: usize,
    pub n_register: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for FrameLayout {
    /// One camera token, four registers and a 28×37 patch grid: 1041 tokens.
    fn default() -> Self {
        Self {
            n_camera: 1,
            n_register: 4,
            grid_h: 28,
            grid_w: 37,
        }
    }
}

impl FrameLayout {
    pub fn new(n_camera: usize, n_register: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        let layout = Self {
            n_camera,
            n_register,
            grid_h,
            grid_w,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Patch-only layout with `tokens` tokens arranged in the most nearly
    /// square grid that tiles them exactly.
    pub fn patch_only(tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("a frame needs at least one token".into()));
        }
        let mut h = (tokens as f64).sqrt() as usize;
        while h > 1 && !tokens.is_multiple_of(h) {
            h -= 1;
        }
        Self::new(0, 0, h.max(1), tokens / h.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_frame() == 0 {
            return Err(Error::Config("a frame needs at least one token".into()));
        }
        if (self.grid_h == 0) != (self.grid_w == 0) {
            return Err(Error::Config(format!(
                "patch grid {}x{} is half-empty",
                self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn n_special(&self) -> usize {
        self.n_camera + self.n_register
    }

    #[inline]
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn tokens_per_frame(&self) -> usize {
        self.n_special() + self.n_patches()
    }

    /// Grid cell of an in-frame position; `None` for camera/register tokens.
    pub fn patch_grid_coords(&self, pos_in_frame: usize) -> Result<Option<(usize, usize)>> {
        if pos_in_frame >= self.tokens_per_frame() {
            return Err(Error::Index(format!(
                "position {pos_in_frame} of {} tokens per frame",
                self.tokens_per_frame()
            )));
        }
        Ok(pos_in_frame
            .checked_sub(self.n_special())
            .map(|p| (p / self.grid_w, p % self.grid_w)))
    }

    /// In-frame position of grid cell `(row, col)`.
    #[inline]
    pub fn patch_position(&self, row: usize, col: usize) -> usize {
        self.n_special() + row * self.grid_w + col
    }
}

/// Global row of `(frame, pos_in_frame)`.
pub fn global_index(
    frame: usize,
    pos_in_frame: usize,
    layout: &FrameLayout,
    n_frames: usize,
) -> Result<usize> {
    let tpf = layout.tokens_per_frame();
    if frame >= n_frames || pos_in_frame >= tpf {
        return Err(Error::Index(format!(
            "(frame {frame}, pos {pos_in_frame}) outside {n_frames} frames of {tpf} tokens"
        )));
    }
    Ok(frame * tpf + pos_in_frame)
}

/// Inverse of [`global_index`].
pub fn frame_position(
    index: usize,
    layout: &FrameLayout,
    n_frames: usize,
) -> Result<(usize, usize)> {
    let tpf = layout.tokens_per_frame();
    if index >= n_frames * tpf {
        return Err(Error::Index(format!("token {index} of {}", n_frames * tpf)));
    }
    Ok((index / tpf, index % tpf))
}

/// Flattened token features of a multi-frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    layout: FrameLayout,
    n_frames: usize,
    features: Matrix,
}

impl TokenSequence {
    pub fn new(layout: FrameLayout, n_frames: usize, features: Matrix) -> Result<Self> {
        layout.validate()?;
        if n_frames == 0 {
            return Err(Error::Config("a sequence needs at least one frame".into()));
        }
        let expected = n_frames * layout.tokens_per_frame();
        if features.rows() != expected {
            return Err(Error::Shape(format!(
                "{} feature rows for {n_frames} frames of {} tokens",
                features.rows(),
                layout.tokens_per_frame()
            )));
        }
        Ok(Self {
            layout,
            n_frames,
            features,
        })
    }

    #[inline]
    pub fn layout(&self) -> &FrameLayout {
        &self.layout
    }

    #[inline]
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    #[inline]
    pub fn n_tokens(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn into_features(self) -> Matrix {
        self.features
    }

    /// Same layout, new features (must keep the row count).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        Self::new(self.layout, self.n_frames, features)
    }

    /// Global index range of one frame.
    pub fn frame_range(&self, frame: usize) -> std::ops::Range<usize> {
        let tpf = self.layout.tokens_per_frame();
        frame * tpf..(frame + 1) * tpf
    }

    pub fn global_index(&self, frame: usize, pos_in_frame: usize) -> Result<usize> {
        global_index(frame, pos_in_frame, &self.layout, self.n_frames)
    }

    /// Writes the little-endian binary fixture format.
    ///
    /// Header: seven `u32` values `n_frames, n_camera, n_register, grid_h,
    /// grid_w, c, float_width` where `float_width` is 4 or 8. The row-major
    /// features follow at that width.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let width = std::mem::size_of::<Real>() as u32;
        let header = [
            self.n_frames,
            self.layout.n_camera,
            self.layout.n_register,
            self.layout.grid_h,
            self.layout.grid_w,
            self.dim(),
        ];
        for v in header {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&width.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.features.data().len() * width as usize);
        for &v in self.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads the format produced by [`TokenSequence::write_to`]. Files of
    /// either float width load in any build; values are converted.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u32; 7];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
            *h = u32::from_le_bytes(b);
        }
        let [n_frames, n_camera, n_register, grid_h, grid_w, c, width] = header.map(|v| v as usize);
        let layout = FrameLayout::new(n_camera, n_register, grid_h, grid_w)?;
        let rows = n_frames * layout.tokens_per_frame();
        let count = rows * c;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * width {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                count * width,
                bytes.len()
            )));
        }
        let data: Vec<Real> = match width {
            4 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real)
                .collect(),
            8 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as Real)
                .collect(),
            other => return Err(Error::Format(format!("float width {other}"))),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Self::new(layout, n_frames, Matrix::from_vec(rows, c, data)?)
    }
}

/// Role of a token within a [`Partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Salient,
    Dst,
    Src,
}

/// Disjoint salient / dst / src index sets covering every token. Each set
/// is kept sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub salient: Vec<usize>,
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
}

impl Partition {
    /// Builds a partition from a per-token role table.
    pub fn from_roles(roles: &[Role]) -> Self {
        let mut p = Self::default();
        for (i, role) in roles.iter().enumerate() {
            match role {
                Role::Salient => p.salient.push(i),
                Role::Dst => p.dst.push(i),
                Role::Src => p.src.push(i),
            }
        }
        p
    }

    pub fn n_tokens(&self) -> usize {
        self.salient.len() + self.dst.len() + self.src.len()
    }

    /// Rows that survive merging: `N − |src|`.
    pub fn n_kept(&self) -> usize {
        self.salient.len() + self.dst.len()
    }

    /// `|src| / N`.
    pub fn effective_merge_fraction(&self) -> f64 {
        match self.n_tokens() {
            0 => 0.0,
            n => self.src.len() as f64 / n as f64,
        }
    }

    /// Per-token roles; fails unless the sets are disjoint and cover `0..n`.
    pub fn roles(&self, n: usize) -> Result<Vec<Role>> {
        let mut roles: Vec<Option<Role>> = vec![None; n];
        let sets = [
            (Role::Salient, &self.salient),
            (Role::Dst, &self.dst),
            (Role::Src, &self.src),
        ];
        for (role, set) in sets {
            for &i in set.iter() {
                let slot = roles
                    .get_mut(i)
                    .ok_or_else(|| Error::Partition(format!("index {i} outside {n} tokens")))?;
                if let Some(prev) = slot {
                    return Err(Error::Partition(format!(
                        "token {i} is both {prev:?} and {role:?}"
                    )));
                }
                *slot = Some(role);
            }
        }
        roles
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Partition(format!("token {i} has no role"))))
            .collect()
    }

    /// Disjoint and exhaustive over `0..n`, in O(n).
    pub fn validate(&self, n: usize) -> Result<()> {
        self.roles(n).map(|_| ())
    }
}
