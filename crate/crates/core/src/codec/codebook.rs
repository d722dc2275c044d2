use serde::{Deserialize, Serialize};

use super::image::PanoImage;
use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::sphere_grid::{GridSpec, TokenGrid};

const LEVEL_LO: f64 = 24.0;
const LEVEL_HI: f64 = 231.0;

/// How token ids factor into `(base level, ramp variant)`.
///
/// Variant 0 is a flat tile; variants `1..variants` are linear ramps whose
/// directions are evenly spaced around the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub variants: usize,
    pub bases: usize,
}

impl TileLayout {
    pub fn for_vocab(vocab: usize) -> Self {
        // Keep at most ~200 base levels so 8-bit levels stay distinct.
        let variants = 8usize.max(vocab.div_ceil(200));
        Self {
            variants,
            bases: vocab.div_ceil(variants),
        }
    }

    pub fn id(&self, base: usize, variant: usize) -> usize {
        base * self.variants + variant
    }

    pub fn split(&self, id: usize) -> (usize, usize) {
        (id / self.variants, id % self.variants)
    }

    pub fn level(&self, base: usize) -> f64 {
        if self.bases <= 1 {
            return 0.5 * (LEVEL_LO + LEVEL_HI);
        }
        LEVEL_LO + (LEVEL_HI - LEVEL_LO) * base as f64 / (self.bases - 1) as f64
    }

    /// Ramp direction (radians, image y pointing down) of a non-flat variant.
    pub fn direction(&self, variant: usize) -> Option<f64> {
        (variant > 0).then(|| {
            std::f64::consts::TAU * (variant - 1) as f64 / (self.variants - 1) as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    vocab: usize,
    tile: usize,
    layout: TileLayout,
    pixels: Vec<u8>,
}

impl Codebook {
    /// Ramp tiles: id `v` fixes the base level, ramp direction, and (via the
    /// seed) a small per-tile slope jitter.
    pub fn build(seed: u64, vocab: usize, tile: usize) -> Result<Self> {
        if vocab < 2 || tile < 2 {
            return Err(Error::Config(format!(
                "codebook needs vocab >= 2 and tile >= 2, got {vocab}, {tile}"
            )));
        }
        let layout = TileLayout::for_vocab(vocab);
        let streams = Streams::new(seed);
        let c = (tile - 1) as f64 / 2.0;
        let mut pixels = Vec::with_capacity(vocab * tile * tile);
        for id in 0..vocab {
            let (base, variant) = layout.split(id);
            let level = layout.level(base);
            let jitter = (streams.seed("tile", &[id as u64]) % 5) as f64;
            let amp = 10.0 + jitter;
            for v in 0..tile {
                for u in 0..tile {
                    let value = match layout.direction(variant) {
                        None => level,
                        Some(a) => {
                            let proj = ((u as f64 - c) * a.cos() + (v as f64 - c) * a.sin()) / c;
                            level + 0.5 * amp * proj
                        }
                    };
                    pixels.push(value.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Ok(Self {
            vocab,
            tile,
            layout,
            pixels,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn tile_size(&self) -> usize {
        self.tile
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn tile(&self, id: usize) -> &[u8] {
        let n = self.tile * self.tile;
        &self.pixels[id * n..(id + 1) * n]
    }

    pub fn decode(&self, grid: &TokenGrid, channels: usize) -> Result<PanoImage> {
        let spec = grid.spec();
        if spec.vocab != self.vocab {
            return Err(Error::Shape(format!(
                "grid vocab {} vs codebook vocab {}",
                spec.vocab, self.vocab
            )));
        }
        grid.check_vocab()?;
        let s = self.tile;
        let (w, h) = (spec.width() * s, spec.height() * s);
        let mut img = PanoImage::new(w, h, channels)?;
        for ty in 0..spec.height() {
            for tx in 0..spec.width() {
                let tile = self.tile(grid.get(tx, ty) as usize);
                for v in 0..s {
                    for u in 0..s {
                        img.set_gray(tx * s + u, ty * s + v, tile[v * s + u]);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Nearest tile (squared L2, ties to the lowest id) for every block.
    pub fn encode(&self, image: &PanoImage, spec: &GridSpec) -> Result<TokenGrid> {
        let s = self.tile;
        if image.width() != spec.width() * s || image.height() != spec.height() * s {
            return Err(Error::Shape(format!(
                "image {}x{} does not match grid {}x{} tokens of {s}px",
                image.width(),
                image.height(),
                spec.width(),
                spec.height()
            )));
        }
        if spec.vocab != self.vocab {
            return Err(Error::Shape("grid vocab differs from codebook".into()));
        }
        let ch = image.channels();
        let palettes: Vec<Vec<u8>> = (0..self.vocab)
            .map(|id| {
                self.tile(id)
                    .iter()
                    .flat_map(|&g| PanoImage::palette(g, ch))
                    .collect()
            })
            .collect();
        let mut grid = TokenGrid::filled(*spec, 0);
        let mut block = vec![0u8; s * s * ch];
        for ty in 0..spec.height() {
            for tx in 0..spec.width() {
                for v in 0..s {
                    for u in 0..s {
                        let px = image.pixel(tx * s + u, ty * s + v);
                        let o = (v * s + u) * ch;
                        block[o..o + ch].copy_from_slice(px);
                    }
                }
                let mut best = (u64::MAX, 0usize);
                for (id, pal) in palettes.iter().enumerate() {
                    let mut d = 0u64;
                    for (a, b) in pal.iter().zip(&block) {
                        let e = *a as i64 - *b as i64;
                        d += (e * e) as u64;
                        if d >= best.0 {
                            break;
                        }
                    }
                    if d < best.0 {
                        best = (d, id);
                    }
                }
                grid.set(tx, ty, best.1 as u16);
            }
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic() {
        assert_eq!(Codebook::build(5, 256, 8).unwrap(), Codebook::build(5, 256, 8).unwrap());
        assert_ne!(Codebook::build(5, 256, 8).unwrap(), Codebook::build(6, 256, 8).unwrap());
    }

    #[test]
    fn tiles_pairwise_distinct() {
        let cb = Codebook::build(1, 256, 8).unwrap();
        for a in 0..256 {
            for b in a + 1..256 {
                assert_ne!(cb.tile(a), cb.tile(b), "tiles {a} and {b}");
            }
        }
        for (v, s) in [(16384, 16), (7, 2), (2, 2), (1000, 4)] {
            let cb = Codebook::build(9, v, s).unwrap();
            let set: HashSet<&[u8]> = (0..v).map(|i| cb.tile(i)).collect();
            assert_eq!(set.len(), v, "V={v} s={s}");
        }
    }

    #[test]
    fn tile_zero_is_flat_base() {
        let cb = Codebook::build(3, 256, 8).unwrap();
        let t = cb.tile(0);
        assert!(t.iter().all(|&p| p == t[0]));
        assert_eq!(t[0] as f64, cb.layout().level(0).round());
    }

    #[test]
    fn all_zero_image_encodes_to_flat_zero_tile() {
        // A codebook whose darkest flat tile is pure black.
        let mut cb = Codebook::build(3, 16, 2).unwrap();
        for p in &mut cb.pixels[..4] {
            *p = 0;
        }
        let spec = GridSpec::new(1, 3, 2, 16).unwrap();
        let img = PanoImage::new(12, 4, 1).unwrap();
        let g = cb.encode(&img, &spec).unwrap();
        assert!(g.tokens().iter().all(|&t| t == 0));
    }

    #[test]
    fn roundtrip_on_tile_images_gray_and_rgb() {
        let spec = GridSpec::new(2, 3, 2, 64).unwrap();
        let cb = Codebook::build(11, 64, 4).unwrap();
        let tokens: Vec<u16> = (0..spec.width() * spec.height()).map(|i| ((i * 29) % 64) as u16).collect();
        let g = TokenGrid::from_tokens(spec, tokens).unwrap();
        for ch in [1, 3] {
            let img = cb.decode(&g, ch).unwrap();
            assert_eq!(cb.encode(&img, &spec).unwrap(), g);
            assert_eq!(cb.decode(&cb.encode(&img, &spec).unwrap(), ch).unwrap(), img);
        }
        let bad = PanoImage::new(10, 8, 1).unwrap();
        assert!(cb.encode(&bad, &spec).is_err());
    }
}
