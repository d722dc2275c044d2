use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::error::{Error, Result};
use crate::rotary::RotaryVariant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Real token ids; `[MASK]` is `vocab` and gets its own embedding row.
    pub vocab: usize,
    pub max_cond: usize,
    pub sem_dim: usize,
    pub ffn_mult: usize,
    /// Rotary variant for second-pass (spherical) conditioning.
    pub rotary: RotaryVariant,
    /// Rotary variant for first-pass (window) conditioning and ARM.
    pub pass1_rotary: RotaryVariant,
    pub dropout: f64,
    /// Token lattice extents used by the spherical frequencies.
    pub width: usize,
    pub height: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a `w x h` lattice.
    pub fn desk(vocab: usize, width: usize, height: usize, max_cond: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            vocab,
            max_cond,
            sem_dim: 32,
            ffn_mult: 4,
            rotary: RotaryVariant::Sphere,
            pass1_rotary: RotaryVariant::Sphere,
            dropout: 0.1,
            width,
            height,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("layers, heads, model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be divisible by 4",
                self.head_dim()
            )));
        }
        if self.vocab < 2 || self.sem_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("vocab >= 2, sem_dim > 0, ffn_mult > 0 required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A dense row-major parameter matrix (vectors have `rows = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::of(v); rows * cols],
        }
    }

    fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).unwrap();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| F::of(dist.sample(rng))).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_g: Param<F>,
    pub ln1_b: Param<F>,
    pub wq: Param<F>,
    pub wk: Param<F>,
    pub wv: Param<F>,
    pub wo: Param<F>,
    pub ln2_g: Param<F>,
    pub ln2_b: Param<F>,
    pub w1: Param<F>,
    pub b1: Param<F>,
    pub w2: Param<F>,
    pub b2: Param<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub tok_emb: Param<F>,
    pub sem_proj: Param<F>,
    pub sem_bias: Param<F>,
    pub view_emb: Param<F>,
    pub phase_emb: Param<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Param<F>,
    pub lnf_b: Param<F>,
    pub out_w: Param<F>,
    pub out_b: Param<F>,
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> Weights<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, &mut |r, c, _| Param::zeros(r, c))
    }

    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let resid = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        Self::build(cfg, &mut |r, c, kind| match kind {
            Init::Normal => Param::normal(r, c, INIT_STD, rng),
            Init::Residual => Param::normal(r, c, resid, rng),
            Init::Embedding => Param::normal(r, c, 1.0, rng),
            Init::One => Param::filled(r, c, 1.0),
            Init::Zero => Param::zeros(r, c),
        })
    }

    fn build(cfg: &ModelConfig, make: &mut dyn FnMut(usize, usize, Init) -> Param<F>) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim();
        let tok_emb = make(cfg.vocab + 1, d, Init::Embedding);
        let sem_proj = make(cfg.sem_dim, d, Init::Normal);
        let sem_bias = make(1, d, Init::Zero);
        let view_emb = make(4, d, Init::Embedding);
        let phase_emb = make(2, d, Init::Embedding);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_g: make(1, d, Init::One),
                ln1_b: make(1, d, Init::Zero),
                wq: make(d, d, Init::Normal),
                wk: make(d, d, Init::Normal),
                wv: make(d, d, Init::Normal),
                wo: make(d, d, Init::Residual),
                ln2_g: make(1, d, Init::One),
                ln2_b: make(1, d, Init::Zero),
                w1: make(d, f, Init::Normal),
                b1: make(1, f, Init::Zero),
                w2: make(f, d, Init::Residual),
                b2: make(1, d, Init::Zero),
            })
            .collect();
        Self {
            tok_emb,
            sem_proj,
            sem_bias,
            view_emb,
            phase_emb,
            blocks,
            lnf_g: make(1, d, Init::One),
            lnf_b: make(1, d, Init::Zero),
            out_w: make(d, cfg.vocab, Init::Normal),
            out_b: make(1, cfg.vocab, Init::Zero),
        }
    }

    /// Every parameter with its stable path name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Param<F>)> {
        let mut out: Vec<(String, &Param<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("sem_proj".into(), &self.sem_proj),
            ("sem_bias".into(), &self.sem_bias),
            ("view_emb".into(), &self.view_emb),
            ("phase_emb".into(), &self.phase_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, p) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("blocks.{l}.{n}"), p));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = vec![
            &mut self.tok_emb,
            &mut self.sem_proj,
            &mut self.sem_bias,
            &mut self.view_emb,
            &mut self.phase_emb,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, p)| p.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        let theirs: Vec<&Param<F>> = other.named().into_iter().map(|(_, p)| p).collect();
        for (mine, theirs) in self.params_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.data.iter_mut().zip(&theirs.data) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for p in self.params_mut() {
            for a in &mut p.data {
                *a *= s;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, p)| p.data.iter())
            .map(|v| v.f64() * v.f64())
            .sum()
    }

    /// First parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, p)| p.data.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn cast<G: Scalar>(&self) -> Weights<G> {
        let named = self.named();
        let mut it = named.iter();
        let mut out = Weights::<G> {
            tok_emb: Param::zeros(0, 0),
            sem_proj: Param::zeros(0, 0),
            sem_bias: Param::zeros(0, 0),
            view_emb: Param::zeros(0, 0),
            phase_emb: Param::zeros(0, 0),
            blocks: self
                .blocks
                .iter()
                .map(|_| Block {
                    ln1_g: Param::zeros(0, 0),
                    ln1_b: Param::zeros(0, 0),
                    wq: Param::zeros(0, 0),
                    wk: Param::zeros(0, 0),
                    wv: Param::zeros(0, 0),
                    wo: Param::zeros(0, 0),
                    ln2_g: Param::zeros(0, 0),
                    ln2_b: Param::zeros(0, 0),
                    w1: Param::zeros(0, 0),
                    b1: Param::zeros(0, 0),
                    w2: Param::zeros(0, 0),
                    b2: Param::zeros(0, 0),
                })
                .collect(),
            lnf_g: Param::zeros(0, 0),
            lnf_b: Param::zeros(0, 0),
            out_w: Param::zeros(0, 0),
            out_b: Param::zeros(0, 0),
        };
        for dst in out.params_mut() {
            let (_, src) = it.next().unwrap();
            *dst = Param {
                rows: src.rows,
                cols: src.cols,
                data: src.data.iter().map(|v| G::of(v.f64())).collect(),
            };
        }
        out
    }
}

/// Whether decoupled weight decay applies to a parameter path.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "out_w" | "sem_proj")
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Residual,
    Embedding,
    One,
    Zero,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn shapes_and_names() {
        let cfg = ModelConfig::desk(256, 48, 24, 516);
        cfg.validate().unwrap();
        let w: Weights<f32> = Weights::init(&cfg, &mut Streams::new(1).rng("init", &[]));
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 5 + 12 * 2 + 4);
        assert!(names.contains(&"blocks.1.wo".to_string()));
        assert_eq!(w.tok_emb.rows, 257);
        assert_eq!(w.out_w.cols, 256);
        assert!(w.first_non_finite().is_none());
        let back: Weights<f32> = w.cast::<f64>().cast();
        assert_eq!(back, w);
        assert!(decays("blocks.0.wq") && !decays("blocks.0.ln1_g") && !decays("tok_emb"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(256, 48, 24, 516);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 8; // head dim 8
        cfg.validate().unwrap();
        cfg.heads = 32; // head dim 2
        assert!(cfg.validate().is_err());
    }
}
