use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::conditions::build_conditions;
use crate::codec::SemanticVector;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::model::{AttnMode, ConditionSet, Phase, Scalar, Transformer};
use crate::rng::{Rng, Streams};
use crate::schedule::MaskState;
use crate::sphere_grid::{GridSpec, NeighborSet, TokenCoord, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Token-by-token within each patch.
    Arm,
    /// Iterative parallel decoding with window neighbors.
    Lpm,
    /// `Lpm` followed by a spherical-neighborhood refinement pass.
    Spm,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arm" => Ok(Regime::Arm),
            "lpm" => Ok(Regime::Lpm),
            "spm" => Ok(Regime::Spm),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub regime: Regime,
    /// Parallel decode steps per patch.
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Condition the refinement pass on the first-pass grid instead of the
    /// progressively refined one.
    pub freeze_pass1: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Spm,
            steps: 8,
            temperature: 1.0,
            seed: 0,
            freeze_pass1: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if self.steps == 0 || self.steps > spec.tokens_per_patch() {
            return Err(Error::Config(format!(
                "steps must be in [1, {}], got {}",
                spec.tokens_per_patch(),
                self.steps
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be nonnegative".into()));
        }
        Ok(())
    }

    /// Forward passes one decoded patch costs under this configuration.
    pub fn passes_per_patch(&self, spec: &GridSpec) -> u64 {
        match self.regime {
            Regime::Arm => spec.tokens_per_patch() as u64,
            Regime::Lpm => self.steps as u64,
            Regime::Spm => 2 * self.steps as u64,
        }
    }
}

/// Accounting for one decoded panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRun {
    pub regime: Regime,
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub index: u64,
    pub patches_decoded: u64,
    pub forward_passes_per_patch: u64,
    pub forward_passes: u64,
    /// Fraction of decoded tokens the refinement pass changed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_fraction: Option<f64>,
    /// Not serialized, so artifacts stay reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draw a token and its confidence from one logit row.
fn draw<F: Scalar>(row: &[F], temperature: f64, greedy: bool, rng: &mut Rng) -> (usize, f64) {
    let probs = crate::model::softmax_f64(row, temperature.max(1e-6));
    if greedy || temperature == 0.0 {
        let t = argmax(row);
        return (t, probs[t]);
    }
    let t = sample(&probs, rng);
    (t, probs[t])
}

/// Decodes panoramas patch by patch with a trained model.
pub struct Decoder<'a, F> {
    model: &'a Transformer<F>,
    spec: GridSpec,
    semantic: Vec<SemanticVector>,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    pub fn new(model: &'a Transformer<F>, spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let cfg = &model.config;
        if cfg.vocab != spec.vocab || cfg.width != spec.width() || cfg.height != spec.height() {
            return Err(Error::CheckpointMismatch(format!(
                "model is for vocab {} on {}x{}, grid is vocab {} on {}x{}",
                cfg.vocab,
                cfg.width,
                cfg.height,
                spec.vocab,
                spec.width(),
                spec.height()
            )));
        }
        Ok(Self {
            model,
            spec,
            semantic: Vec::new(),
        })
    }

    /// Prepend `semantic` to every condition sequence.
    pub fn with_semantic(mut self, semantic: Vec<SemanticVector>) -> Result<Self> {
        if semantic.len() > 4 {
            return Err(Error::Shape(format!("at most 4 semantic vectors, got {}", semantic.len())));
        }
        let k = self.model.config.sem_dim;
        if let Some(s) = semantic.iter().find(|s| s.values.len() != k) {
            return Err(Error::Shape(format!("semantic vector dim {} != {k}", s.values.len())));
        }
        self.semantic = semantic;
        Ok(self)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn conditions(&self, grid: &TokenGrid, set: &NeighborSet, phase: Phase, avail: &[bool]) -> ConditionSet {
        let cols = self.spec.cols;
        build_conditions(grid, set, phase, &self.semantic, |p| avail[p.i * cols + p.j])
    }

    fn decode_parallel(
        &self,
        cond: &ConditionSet,
        coords: &[TokenCoord],
        cfg: &DecodeConfig,
        rng: &mut Rng,
    ) -> Result<(Vec<u16>, u64)> {
        let n = self.spec.tokens_per_patch();
        let mask_id = self.spec.mask_id();
        let mem = self.model.prepare(cond)?;
        let mut ids = vec![mask_id; n];
        let mut state = MaskState::new(n, cfg.steps);
        let mut passes = 0;
        let mut drawn = vec![0u16; n];
        let mut conf = vec![0.0; n];
        while !state.is_done() {
            let logits = self.model.forward_prepared(&ids, coords, &mem, AttnMode::Bidirectional)?;
            passes += 1;
            let greedy = state.is_final_step();
            for pos in 0..n {
                if state.kept()[pos] {
                    continue;
                }
                let (t, c) = draw(logits.row(pos), cfg.temperature, greedy, rng);
                drawn[pos] = t as u16;
                conf[pos] = c;
            }
            for i in state.advance(&conf)? {
                ids[i] = drawn[i];
            }
        }
        Ok((ids, passes))
    }

    fn decode_ar(
        &self,
        cond: &ConditionSet,
        coords: &[TokenCoord],
        cfg: &DecodeConfig,
        rng: &mut Rng,
    ) -> Result<(Vec<u16>, u64)> {
        let n = self.spec.tokens_per_patch();
        let mem = self.model.prepare(cond)?;
        let mut tokens = Vec::with_capacity(n);
        for t in 0..n {
            let ids = Transformer::<F>::shifted_inputs(self.spec.mask_id(), &tokens);
            let logits = self.model.forward_prepared(&ids, &coords[..t + 1], &mem, AttnMode::Causal)?;
            let (tok, _) = draw(logits.row(t), cfg.temperature, false, rng);
            tokens.push(tok as u16);
        }
        Ok((tokens, n as u64))
    }

    /// Fill every patch not flagged in `observed` (raster order over
    /// patches). Randomness comes from `streams` only.
    fn complete(
        &self,
        mut grid: TokenGrid,
        observed: &[bool],
        cfg: &DecodeConfig,
        streams: Streams,
    ) -> Result<(TokenGrid, u64, Option<f64>)> {
        let spec = self.spec;
        let mut avail = observed.to_vec();
        let mut passes = 0;
        for (idx, patch) in spec.patches().enumerate() {
            if observed[idx] {
                continue;
            }
            let mut rng = streams.rng("patch", &[0, idx as u64]);
            let coords = spec.patch_coords(patch);
            let (tokens, n) = match cfg.regime {
                Regime::Arm => {
                    let cond = self.conditions(&grid, &spec.arm_window(patch), Phase::Pass1, &avail);
                    self.decode_ar(&cond, &coords, cfg, &mut rng)?
                }
                Regime::Lpm | Regime::Spm => {
                    let cond = self.conditions(&grid, &spec.window_neighbors_yw(patch), Phase::Pass1, &avail);
                    self.decode_parallel(&cond, &coords, cfg, &mut rng)?
                }
            };
            grid.set_patch(patch, &tokens);
            avail[idx] = true;
            passes += n;
        }
        if cfg.regime != Regime::Spm {
            return Ok((grid, passes, None));
        }
        let first = grid.clone();
        let (mut changed, mut total) = (0usize, 0usize);
        for (idx, patch) in spec.patches().enumerate() {
            if observed[idx] {
                continue;
            }
            let mut rng = streams.rng("patch", &[1, idx as u64]);
            let source = if cfg.freeze_pass1 { &first } else { &grid };
            let cond = self.conditions(source, &spec.sphere_neighbors_ys(patch), Phase::Pass2, &avail);
            let (tokens, n) = self.decode_parallel(&cond, &spec.patch_coords(patch), cfg, &mut rng)?;
            let before = first.patch_tokens(patch);
            changed += before.iter().zip(&tokens).filter(|(a, b)| a != b).count();
            total += tokens.len();
            grid.set_patch(patch, &tokens);
            passes += n;
        }
        let frac = (total > 0).then(|| changed as f64 / total as f64);
        Ok((grid, passes, frac))
    }

    fn run_record(&self, cfg: &DecodeConfig, index: u64, decoded: u64, passes: u64, refined: Option<f64>, t0: Instant) -> DecodeRun {
        DecodeRun {
            regime: cfg.regime,
            steps: cfg.steps,
            temperature: cfg.temperature,
            seed: cfg.seed,
            index,
            patches_decoded: decoded,
            forward_passes_per_patch: cfg.passes_per_patch(&self.spec),
            forward_passes: passes,
            refined_fraction: refined,
            wall_seconds: t0.elapsed().as_secs_f64(),
        }
    }

    /// Panorama number `index` of the stream seeded by `cfg.seed`.
    pub fn generate(&self, cfg: &DecodeConfig, index: u64) -> Result<(TokenGrid, DecodeRun)> {
        cfg.validate(&self.spec)?;
        let t0 = Instant::now();
        let streams = Streams::new(cfg.seed).child("panorama", &[index]);
        let observed = vec![false; self.spec.patch_count()];
        let blank = TokenGrid::filled(self.spec, 0);
        let (grid, passes, refined) = self.complete(blank, &observed, cfg, streams)?;
        let run = self.run_record(cfg, index, observed.len() as u64, passes, refined, t0);
        Ok((grid, run))
    }

    /// Panoramas `0..count`, decoded independently.
    pub fn generate_many(&self, cfg: &DecodeConfig, count: usize, par: Parallelism) -> Result<Vec<(TokenGrid, DecodeRun)>>
    where
        F: Send + Sync,
    {
        par.map_range(count, |i| self.generate(cfg, i as u64)).into_iter().collect()
    }

    /// Keep the patches flagged in `observed` and decode the rest.
    pub fn extrapolate(&self, partial: &TokenGrid, observed: &[bool], cfg: &DecodeConfig, index: u64) -> Result<(TokenGrid, DecodeRun)> {
        cfg.validate(&self.spec)?;
        if partial.spec() != &self.spec {
            return Err(Error::Shape("partial grid does not match the decoder's grid spec".into()));
        }
        if observed.len() != self.spec.patch_count() {
            return Err(Error::Shape(format!(
                "{} observation flags for {} patches",
                observed.len(),
                self.spec.patch_count()
            )));
        }
        if !observed.iter().any(|&o| o) {
            return Err(Error::Empty("no observed patches".into()));
        }
        partial.check_vocab()?;
        let t0 = Instant::now();
        let streams = Streams::new(cfg.seed).child("panorama", &[index]);
        let (grid, passes, refined) = self.complete(partial.clone(), observed, cfg, streams)?;
        let decoded = observed.iter().filter(|&&o| !o).count() as u64;
        Ok((grid, self.run_record(cfg, index, decoded, passes, refined, t0)))
    }
}

/// Observation flags for the left `cols` patch columns.
pub fn left_columns(spec: &GridSpec, cols: usize) -> Vec<bool> {
    spec.patches().map(|p| p.j < cols).collect()
}

/// Build a decoder conditioned on semantic vectors and generate.
pub fn guided_generate<F: Scalar>(
    model: &Transformer<F>,
    spec: GridSpec,
    semantic: Vec<SemanticVector>,
    cfg: &DecodeConfig,
    index: u64,
) -> Result<(TokenGrid, DecodeRun)> {
    Decoder::new(model, spec)?.with_semantic(semantic)?.generate(cfg, index)
}

