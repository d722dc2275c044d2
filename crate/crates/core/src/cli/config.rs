use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{max_condition_len, DecodeConfig, Regime, TrainConfig};
use crate::rotary::RotaryVariant;
use crate::sphere_grid::GridSpec;

/// Every setting a command can read. Loaded from a flat TOML file, then
/// overridden by `--set key=value` and command flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,

    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub vocab: usize,
    /// Tile side in pixels.
    pub tile: usize,
    /// 1 writes grayscale PGM, 3 writes palette-mapped PPM.
    pub channels: usize,
    /// Seed of the tile codebook shared by every command.
    pub codebook_seed: u64,

    pub data_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,

    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub sem_dim: usize,
    pub ffn_mult: usize,
    pub rotary: RotaryVariant,
    pub pass1_rotary: RotaryVariant,
    pub dropout: f64,

    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub sc: bool,
    pub semantic: bool,
    pub semantic_drop: f64,
    pub arm_loss: bool,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    /// Stop (and checkpoint) after this many updates; 0 runs to `steps`.
    pub stop_after: u64,
    pub resume: bool,

    pub regime: Regime,
    pub decode_steps: usize,
    pub temperature: f64,
    pub freeze_pass1: bool,
    pub count: usize,
    pub out_dir: PathBuf,
    /// Token grid whose view vectors guide generation.
    pub semantic_from: Option<PathBuf>,

    pub input: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Observed patch columns, counted from the left; 0 means half.
    pub observed_cols: usize,

    pub real_dir: Option<PathBuf>,
    pub fake_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,

    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DecodeConfig::default();
        Self {
            seed: 0,
            rows: 3,
            cols: 6,
            patch: 8,
            vocab: 256,
            tile: 4,
            channels: 1,
            codebook_seed: 1,
            data_dir: "data".into(),
            train_count: 2000,
            test_count: 200,
            layers: 2,
            heads: 4,
            model_dim: 64,
            sem_dim: 32,
            ffn_mult: 4,
            rotary: RotaryVariant::Sphere,
            pass1_rotary: RotaryVariant::Sphere,
            dropout: 0.1,
            batch_size: t.batch_size,
            steps: t.steps,
            warmup: t.warmup,
            peak_lr: t.peak_lr,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            sc: t.sc,
            semantic: t.semantic,
            semantic_drop: t.semantic_drop,
            arm_loss: t.arm_loss,
            checkpoint: "model.ckpt".into(),
            trace: "trace.jsonl".into(),
            stop_after: 0,
            resume: false,
            regime: d.regime,
            decode_steps: d.steps,
            temperature: d.temperature,
            freeze_pass1: d.freeze_pass1,
            count: 8,
            out_dir: "out".into(),
            semantic_from: None,
            input: None,
            truth: None,
            observed_cols: 0,
            real_dir: None,
            fake_dir: None,
            report: None,
            parallel: true,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words such as `spm` or a path are strings; anything TOML can
    // parse as a scalar keeps its type.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// File contents (if any) overlaid with `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.decode_config().validate(&self.grid()?)?;
        if self.tile < 2 {
            return Err(Error::Config("tile must be at least 2".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if self.observed_cols > self.cols {
            return Err(Error::Config("observed_cols exceeds cols".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.rows, self.cols, self.patch, self.vocab)
    }

    pub fn model_config(&self) -> ModelConfig {
        let n = self.patch * self.patch;
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            vocab: self.vocab,
            max_cond: max_condition_len(n),
            sem_dim: self.sem_dim,
            ffn_mult: self.ffn_mult,
            rotary: self.rotary,
            pass1_rotary: self.pass1_rotary,
            dropout: self.dropout,
            width: self.cols * self.patch,
            height: self.rows * self.patch,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            warmup: self.warmup,
            peak_lr: self.peak_lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            sc: self.sc,
            semantic: self.semantic,
            semantic_drop: self.semantic_drop,
            arm_loss: self.arm_loss,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            regime: self.regime,
            steps: self.decode_steps,
            temperature: self.temperature,
            seed: self.seed,
            freeze_pass1: self.freeze_pass1,
        }
    }
}
