//! Token-grid file: `"HTG1"`, then rows, cols, patch side as little-endian
//! `u32`, then `h * w` little-endian `u16` ids in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sphere_grid::{GridSpec, TokenGrid};

pub const HTG_MAGIC: &[u8; 4] = b"HTG1";

pub fn encode_grid(grid: &TokenGrid) -> Vec<u8> {
    let spec = grid.spec();
    let mut buf = Vec::with_capacity(16 + 2 * grid.tokens().len());
    buf.extend_from_slice(HTG_MAGIC);
    for v in [spec.rows, spec.cols, spec.patch_side] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &t in grid.tokens() {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

pub fn write_grid(path: &Path, grid: &TokenGrid) -> Result<()> {
    std::fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

/// Reads a grid and checks it against the expected vocabulary size.
pub fn read_grid(path: &Path, vocab: usize) -> Result<TokenGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, vocab).map_err(|e| match e {
        Error::BadHeader { format, reason, .. } => Error::BadHeader {
            format,
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn decode_grid(bytes: &[u8], vocab: usize) -> Result<TokenGrid> {
    let bad = |reason: String| Error::BadHeader {
        format: "HTG1",
        path: Default::default(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != HTG_MAGIC {
        return Err(bad(format!("magic {:?}", &bytes[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let spec = GridSpec::new(field(0), field(1), field(2), vocab)
        .map_err(|e| bad(e.to_string()))?;
    let n = spec.width() * spec.height();
    if bytes.len() != 16 + 2 * n {
        return Err(bad(format!("payload {} bytes, expected {}", bytes.len() - 16, 2 * n)));
    }
    let tokens: Vec<u16> = bytes[16..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let grid = TokenGrid::from_tokens(spec, tokens)?;
    grid.check_vocab()?;
    Ok(grid)
}
