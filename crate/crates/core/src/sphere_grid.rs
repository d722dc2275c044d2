//! Equirectangular patch/token lattice.
//!
//! A panorama is an `R x C` grid of view patches, each holding `p x p`
//! tokens. Horizontally the lattice is a ring (longitude wraps), vertically
//! it is an open interval (the poles never meet).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch_side: usize,
    pub vocab: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, patch_side: usize, vocab: usize) -> Result<Self> {
        let spec = Self {
            rows,
            cols,
            patch_side,
            vocab,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 1 {
            return Err(Error::InvalidGrid("rows must be >= 1".into()));
        }
        if self.cols < 3 {
            return Err(Error::InvalidGrid("cols must be >= 3".into()));
        }
        if self.patch_side < 2 {
            return Err(Error::InvalidGrid("patch_side must be >= 2".into()));
        }
        // MASK = vocab must still fit in a u16 token file.
        if !(2..u16::MAX as usize).contains(&self.vocab) {
            return Err(Error::InvalidGrid("vocab must be in [2, 65535)".into()));
        }
        Ok(())
    }

    /// Token width `w = C * p`.
    pub fn width(&self) -> usize {
        self.cols * self.patch_side
    }

    /// Token height `h = R * p`.
    pub fn height(&self) -> usize {
        self.rows * self.patch_side
    }

    /// Tokens per patch `N = p^2`.
    pub fn tokens_per_patch(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// The reserved `[MASK]` id.
    pub fn mask_id(&self) -> u16 {
        self.vocab as u16
    }

    pub fn patch(&self, i: usize, j: usize) -> Result<PatchCoord> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::OutOfRange(format!(
                "patch ({i},{j}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(PatchCoord { i, j })
    }

    /// Patches in raster order.
    pub fn patches(&self) -> impl Iterator<Item = PatchCoord> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| PatchCoord { i, j }))
    }

    pub fn global_coord(&self, patch: PatchCoord, u: usize, v: usize) -> Result<TokenCoord> {
        if u >= self.patch_side || v >= self.patch_side {
            return Err(Error::OutOfRange(format!(
                "local index ({u},{v}) outside patch side {}",
                self.patch_side
            )));
        }
        if patch.i >= self.rows || patch.j >= self.cols {
            return Err(Error::OutOfRange(format!("patch {patch:?}")));
        }
        Ok(TokenCoord {
            x: (patch.j * self.patch_side + u) as i32,
            y: (patch.i * self.patch_side + v) as i32,
        })
    }

    /// Global coordinates of every token of `patch`, raster order within the patch.
    pub fn patch_coords(&self, patch: PatchCoord) -> Vec<TokenCoord> {
        let p = self.patch_side;
        let mut out = Vec::with_capacity(p * p);
        for v in 0..p {
            for u in 0..p {
                out.push(TokenCoord {
                    x: (patch.j * p + u) as i32,
                    y: (patch.i * p + v) as i32,
                });
            }
        }
        out
    }

    /// `Y_W`: the upper/left window, never wrapping.
    pub fn window_neighbors_yw(&self, patch: PatchCoord) -> NeighborSet {
        let (i, j) = (patch.i as isize, patch.j as isize);
        let entries = [(i - 1, j), (i, j - 1), (i - 1, j - 1)]
            .into_iter()
            .filter_map(|(a, b)| self.unwrapped(a, b))
            .collect();
        NeighborSet {
            kind: NeighborKind::Yw,
            entries,
        }
    }

    /// `Y_S`: the full 8-neighborhood with horizontal wraparound.
    pub fn sphere_neighbors_ys(&self, patch: PatchCoord) -> NeighborSet {
        let (i, j) = (patch.i as isize, patch.j as isize);
        let offsets = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        let cols = self.cols as isize;
        let entries = offsets
            .into_iter()
            .filter_map(|(di, dj)| {
                let a = i + di;
                if a < 0 || a >= self.rows as isize {
                    return None;
                }
                let b = j + dj;
                let wrapped = b < 0 || b >= cols;
                Some(Neighbor {
                    patch: PatchCoord {
                        i: a as usize,
                        j: b.rem_euclid(cols) as usize,
                    },
                    wrapped,
                })
            })
            .collect();
        NeighborSet {
            kind: NeighborKind::Ys,
            entries,
        }
    }

    /// Autoregressive window: two patches to the left and two above, no wrap.
    pub fn arm_window(&self, patch: PatchCoord) -> NeighborSet {
        let (i, j) = (patch.i as isize, patch.j as isize);
        let entries = [(i, j - 1), (i, j - 2), (i - 1, j), (i - 2, j)]
            .into_iter()
            .filter_map(|(a, b)| self.unwrapped(a, b))
            .collect();
        NeighborSet {
            kind: NeighborKind::Arm,
            entries,
        }
    }

    fn unwrapped(&self, i: isize, j: isize) -> Option<Neighbor> {
        (i >= 0 && j >= 0 && (i as usize) < self.rows && (j as usize) < self.cols).then(|| Neighbor {
            patch: PatchCoord {
                i: i as usize,
                j: j as usize,
            },
            wrapped: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoord {
    pub i: usize,
    pub j: usize,
}

impl PatchCoord {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

/// Global token position. Signed so that positional math can be exercised
/// on translated (unreduced) coordinates; grid-derived values are in range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenCoord {
    pub x: i32,
    pub y: i32,
}

impl TokenCoord {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn shifted(self, dx: i32, dy: i32) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborKind {
    Yw,
    Ys,
    Arm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub patch: PatchCoord,
    pub wrapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub kind: NeighborKind,
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn patches(&self) -> impl Iterator<Item = PatchCoord> + '_ {
        self.entries.iter().map(|n| n.patch)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A full panorama as token ids, row-major over the `h x w` token lattice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    spec: GridSpec,
    tokens: Vec<u16>,
}

impl TokenGrid {
    pub fn filled(spec: GridSpec, id: u16) -> Self {
        Self {
            spec,
            tokens: vec![id; spec.width() * spec.height()],
        }
    }

    pub fn from_tokens(spec: GridSpec, tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() != spec.width() * spec.height() {
            return Err(Error::Shape(format!(
                "expected {} tokens, got {}",
                spec.width() * spec.height(),
                tokens.len()
            )));
        }
        Ok(Self { spec, tokens })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.tokens[y * self.spec.width() + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u16) {
        let w = self.spec.width();
        self.tokens[y * w + x] = id;
    }

    /// Tokens of one patch in raster order.
    pub fn patch_tokens(&self, patch: PatchCoord) -> Vec<u16> {
        let p = self.spec.patch_side;
        let mut out = Vec::with_capacity(p * p);
        for v in 0..p {
            for u in 0..p {
                out.push(self.get(patch.j * p + u, patch.i * p + v));
            }
        }
        out
    }

    pub fn set_patch(&mut self, patch: PatchCoord, ids: &[u16]) {
        let p = self.spec.patch_side;
        assert_eq!(ids.len(), p * p);
        for v in 0..p {
            for u in 0..p {
                self.set(patch.j * p + u, patch.i * p + v, ids[v * p + u]);
            }
        }
    }

    /// Every id is a real vocabulary token (no residual `[MASK]`).
    pub fn check_vocab(&self) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= self.spec.vocab) {
            Some(&t) => Err(Error::VocabMismatch {
                id: t as u32,
                vocab: self.spec.vocab as u32,
            }),
            None => Ok(()),
        }
    }

    /// Roll horizontally by `shift` tokens: `out[x] = self[x - shift]`.
    pub fn rolled(&self, shift: isize) -> Self {
        let w = self.spec.width() as isize;
        let mut out = self.clone();
        for y in 0..self.spec.height() {
            for x in 0..w {
                let src = (x - shift).rem_euclid(w) as usize;
                out.set(x as usize, y, self.get(src, y));
            }
        }
        out
    }
}
