//! `HCKPT1` checkpoint files.
//!
//! Layout: a 32-byte header, then named little-endian f32 records
//! (`u16` name length, name bytes, `u64` element count, data).
//!
//! Header: magic (6), flags u16, then u16 layers, heads, model_dim, vocab,
//! sem_dim, max_cond, ffn_mult, width, height, format version u16, and a
//! u32 record count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::weights::{ModelConfig, Param, Weights};
use crate::error::{Error, Result};
use crate::rotary::RotaryVariant;

pub const CKPT_MAGIC: &[u8; 6] = b"HCKPT1";
const HEADER_LEN: usize = 32;
const VERSION: u16 = 1;

const STEP: &str = "meta.step";
const DROPOUT: &str = "meta.dropout";
const ADAM_M: &str = "opt.m.";
const ADAM_V: &str = "opt.v.";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckpointFlags {
    /// Trained with the two-pass (window + spherical) objective.
    pub sc_trained: bool,
    pub semantic: bool,
    pub arm_trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub flags: CheckpointFlags,
    pub step: u64,
    pub weights: Weights<f32>,
    /// AdamW first and second moments, present for resumable checkpoints.
    pub adam: Option<(Weights<f32>, Weights<f32>)>,
    /// Auxiliary records such as codec statistics.
    pub extra: BTreeMap<String, Vec<f32>>,
}

fn variant_bits(v: RotaryVariant) -> u16 {
    match v {
        RotaryVariant::Vanilla2d => 0,
        RotaryVariant::Sphere => 1,
    }
}

fn variant_of(bits: u16) -> Result<RotaryVariant> {
    match bits {
        0 => Ok(RotaryVariant::Vanilla2d),
        1 => Ok(RotaryVariant::Sphere),
        b => Err(Error::CheckpointMismatch(format!("unknown rotary variant {b}"))),
    }
}

fn small(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit a checkpoint header")))
}

/// Splits a u64 into four exactly representable 16-bit chunks.
fn u64_record(step: u64) -> Vec<f32> {
    (0..4).map(|k| ((step >> (16 * k)) & 0xffff) as f32).collect()
}

fn u64_of(rec: &[f32]) -> Result<u64> {
    if rec.len() != 4 {
        return Err(Error::CheckpointMismatch("malformed u64 record".into()));
    }
    Ok(rec
        .iter()
        .enumerate()
        .fold(0u64, |acc, (k, &v)| acc | ((v as u64) << (16 * k))))
}

impl Checkpoint {
    pub fn new(config: ModelConfig, flags: CheckpointFlags, weights: Weights<f32>) -> Self {
        Self {
            config,
            flags,
            step: 0,
            weights,
            adam: None,
            extra: BTreeMap::new(),
        }
    }

    /// Error unless this checkpoint was built for `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let a = &self.config;
        let b = expected;
        let pairs = [
            ("layers", a.layers, b.layers),
            ("heads", a.heads, b.heads),
            ("model_dim", a.model_dim, b.model_dim),
            ("vocab", a.vocab, b.vocab),
            ("sem_dim", a.sem_dim, b.sem_dim),
            ("max_cond", a.max_cond, b.max_cond),
            ("ffn_mult", a.ffn_mult, b.ffn_mult),
            ("width", a.width, b.width),
            ("height", a.height, b.height),
        ];
        for (name, got, want) in pairs {
            if got != want {
                return Err(Error::CheckpointMismatch(format!("{name}: checkpoint has {got}, config wants {want}")));
            }
        }
        if a.rotary != b.rotary || a.pass1_rotary != b.pass1_rotary {
            return Err(Error::CheckpointMismatch("rotary variant differs".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut records: Vec<(String, &[f32])> = Vec::new();
        for (n, p) in self.weights.named() {
            records.push((n, &p.data));
        }
        if let Some((m, v)) = &self.adam {
            for (n, p) in m.named() {
                records.push((format!("{ADAM_M}{n}"), &p.data));
            }
            for (n, p) in v.named() {
                records.push((format!("{ADAM_V}{n}"), &p.data));
            }
        }
        let step = u64_record(self.step);
        let dropout = u64_record(c.dropout.to_bits());
        records.push((STEP.into(), &step));
        records.push((DROPOUT.into(), &dropout));
        for (n, v) in &self.extra {
            records.push((n.clone(), v));
        }

        let flags = u16::from(self.flags.sc_trained)
            | u16::from(self.flags.semantic) << 1
            | u16::from(self.flags.arm_trained) << 2
            | variant_bits(c.rotary) << 3
            | variant_bits(c.pass1_rotary) << 5;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.weights.param_count());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&flags.to_le_bytes());
        for (v, what) in [
            (c.layers, "layers"),
            (c.heads, "heads"),
            (c.model_dim, "model_dim"),
            (c.vocab, "vocab"),
            (c.sem_dim, "sem_dim"),
            (c.max_cond, "max_cond"),
            (c.ffn_mult, "ffn_mult"),
            (c.width, "width"),
            (c.height, "height"),
        ] {
            out.extend_from_slice(&small(v, what)?.to_le_bytes());
        }
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        for (name, data) in records {
            out.extend_from_slice(&small(name.len(), "record name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadHeader {
            format: "HCKPT1",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..6] != CKPT_MAGIC {
            return Err(bad("wrong magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let flags = u16_at(6);
        let f: Vec<usize> = (0..9).map(|k| u16_at(8 + 2 * k) as usize).collect();
        let version = u16_at(26);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;

        let mut recs: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut pos = HEADER_LEN;
        let truncated = || bad("truncated record".into());
        for _ in 0..count {
            let nl = bytes.get(pos..pos + 2).ok_or_else(truncated)?;
            let nl = u16::from_le_bytes([nl[0], nl[1]]) as usize;
            pos += 2;
            let name = bytes.get(pos..pos + nl).ok_or_else(truncated)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("record name is not utf-8".into()))?;
            pos += nl;
            let n = bytes.get(pos..pos + 8).ok_or_else(truncated)?;
            let n = u64::from_le_bytes(n.try_into().unwrap()) as usize;
            pos += 8;
            let data = bytes.get(pos..pos + 4 * n).ok_or_else(truncated)?;
            pos += 4 * n;
            let vals = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if recs.insert(name.clone(), vals).is_some() {
                return Err(bad(format!("duplicate record {name}")));
            }
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }

        let dropout = match recs.remove(DROPOUT) {
            Some(r) => f64::from_bits(u64_of(&r)?),
            None => 0.0,
        };
        let config = ModelConfig {
            layers: f[0],
            heads: f[1],
            model_dim: f[2],
            vocab: f[3],
            sem_dim: f[4],
            max_cond: f[5],
            ffn_mult: f[6],
            width: f[7],
            height: f[8],
            rotary: variant_of((flags >> 3) & 3)?,
            pass1_rotary: variant_of((flags >> 5) & 3)?,
            dropout,
        };
        config.validate().map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        let step = match recs.remove(STEP) {
            Some(r) => u64_of(&r)?,
            None => 0,
        };

        let take = |recs: &mut BTreeMap<String, Vec<f32>>, prefix: &str, required: bool| -> Result<Option<Weights<f32>>> {
            let mut w = Weights::<f32>::zeros(&config);
            let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
            if !required && !recs.contains_key(&format!("{prefix}{}", names[0])) {
                return Ok(None);
            }
            for (name, p) in names.iter().zip(w.params_mut()) {
                let key = format!("{prefix}{name}");
                let data = recs
                    .remove(&key)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("missing record {key}")))?;
                if data.len() != p.data.len() {
                    return Err(Error::CheckpointMismatch(format!(
                        "{key}: {} values, expected {}",
                        data.len(),
                        p.data.len()
                    )));
                }
                *p = Param {
                    rows: p.rows,
                    cols: p.cols,
                    data,
                };
            }
            Ok(Some(w))
        };
        let weights = take(&mut recs, "", true)?.unwrap();
        let m = take(&mut recs, ADAM_M, false)?;
        let v = take(&mut recs, ADAM_V, false)?;
        let adam = match (m, v) {
            (Some(m), Some(v)) => Some((m, v)),
            (None, None) => None,
            _ => return Err(Error::CheckpointMismatch("incomplete optimizer state".into())),
        };
        Ok(Self {
            config,
            flags: CheckpointFlags {
                sc_trained: flags & 1 != 0,
                semantic: flags & 2 != 0,
                arm_trained: flags & 4 != 0,
            },
            step,
            weights,
            adam,
            extra: recs,
        })
    }
}

/// Writes through a sibling temp file and renames, holding `<path>.lock`
/// for the duration so concurrent writers fail instead of interleaving.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let lock = path.with_extension("lock");
    let mut guard = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock)
        .map_err(|e| Error::io(&lock, e))?;
    let _ = writeln!(guard, "{}", std::process::id());
    let tmp = path.with_extension("tmp");
    let result = fs::write(&tmp, &bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::io(path, e));
    let _ = fs::remove_file(&lock);
    result
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
