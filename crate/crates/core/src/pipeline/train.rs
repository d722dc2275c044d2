use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::conditions::build_conditions;
use crate::codec::SemanticVector;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::model::{
    decays, AttnMode, Checkpoint, CheckpointFlags, Phase, Scalar, TrainExample, Transformer, Weights,
};
use crate::rng::Streams;
use crate::schedule::{mask_count, sample_mask};
use crate::sphere_grid::{PatchCoord, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Train the second-pass (spherical neighborhood) objective as well.
    pub sc: bool,
    pub semantic: bool,
    /// Probability of dropping the semantic conditions of one example.
    pub semantic_drop: f64,
    /// Add the causal next-token objective used by the ARM regime.
    pub arm_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            warmup: 200,
            peak_lr: 2e-3,
            weight_decay: 4.5e-2,
            clip_norm: 4.0,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            seed: 0,
            sc: true,
            semantic: true,
            semantic_drop: 0.5,
            arm_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive");
        }
        if self.warmup == 0 || self.warmup > self.steps {
            return bad("warmup must be in [1, steps]");
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("peak_lr, clip_norm, eps must be positive and weight_decay nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.semantic_drop) {
            return bad("semantic_drop must lie in [0, 1]");
        }
        Ok(())
    }

    /// Rate for update number `step` (1-based): linear ramp to the peak at
    /// `warmup`, then cosine decay reaching zero at `steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step <= self.warmup {
            return self.peak_lr * step as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Weights<f32>,
    pub v: Weights<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(like: &Weights<f32>) -> Self {
        let mut m = like.clone();
        m.scale(0.0);
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn update(&mut self, w: &mut Weights<f32>, g: &Weights<f32>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = cfg.eps as f32;
        let names: Vec<bool> = w.named().iter().map(|(n, _)| decays(n)).collect();
        let params = w.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        let gs = g.named();
        for ((((p, m), v), (_, gp)), decay) in params.into_iter().zip(ms).zip(vs).zip(gs).zip(names) {
            let wd = if decay { (lr * cfg.weight_decay) as f32 } else { 0.0 };
            for (((pv, mv), vv), &gv) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&gp.data) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= wd * *pv;
                *pv -= step * *mv / (vv.sqrt() / c2s + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Masked prediction, window neighbors, first-pass phase.
    Lpm,
    /// Masked prediction, spherical neighbors, second-pass phase.
    Spm,
    /// Causal next-token prediction over the ARM window.
    Arm,
}

impl LossKind {
    fn tag(self) -> u64 {
        match self {
            LossKind::Lpm => 0,
            LossKind::Spm => 1,
            LossKind::Arm => 2,
        }
    }
}

/// Training panoramas with optional per-panorama view vectors.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub grids: &'a [TokenGrid],
    pub semantic: Option<&'a [Vec<SemanticVector>]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub loss: f64,
    pub lpm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One supervised example for `patch` of `grid`.
pub fn make_example<R: rand::Rng>(
    grid: &TokenGrid,
    patch: PatchCoord,
    kind: LossKind,
    semantic: &[SemanticVector],
    rng: &mut R,
) -> Result<TrainExample> {
    let spec = grid.spec();
    let n = spec.tokens_per_patch();
    let truth = grid.patch_tokens(patch);
    let coords = spec.patch_coords(patch);
    let mask_id = spec.mask_id();
    let (set, phase) = match kind {
        LossKind::Lpm => (spec.window_neighbors_yw(patch), Phase::Pass1),
        LossKind::Spm => (spec.sphere_neighbors_ys(patch), Phase::Pass2),
        LossKind::Arm => (spec.arm_window(patch), Phase::Pass1),
    };
    let cond = build_conditions(grid, &set, phase, semantic, |_| true);
    if kind == LossKind::Arm {
        return Ok(TrainExample {
            ids: Transformer::<f32>::shifted_inputs(mask_id, &truth[..n - 1]),
            coords,
            cond,
            labels: truth.iter().map(|&t| Some(t)).collect(),
            mode: AttnMode::Causal,
        });
    }
    let count = mask_count(rng.gen::<f64>(), n);
    let mask = sample_mask(rng, n, count)?;
    Ok(TrainExample {
        ids: truth
            .iter()
            .zip(&mask)
            .map(|(&t, &m)| if m { mask_id } else { t })
            .collect(),
        coords,
        cond,
        labels: truth.iter().zip(&mask).map(|(&t, &m)| m.then_some(t)).collect(),
        mode: AttnMode::Bidirectional,
    })
}

/// Fraction of supervised positions whose argmax equals the label.
pub fn masked_accuracy<F: Scalar>(model: &Transformer<F>, batch: &[TrainExample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in batch {
        let logits = model.forward(&ex.ids, &ex.coords, &ex.cond, ex.mode)?;
        for (r, label) in ex.labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            let row = logits.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            hit += usize::from(best == y as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no supervised positions".into()));
    }
    Ok(hit as f64 / total as f64)
}

pub struct Trainer {
    pub model: Transformer<f32>,
    pub opt: AdamW,
    /// Updates applied so far.
    pub step: u64,
    pub cfg: TrainConfig,
    pub par: Parallelism,
}

impl Trainer {
    pub fn new(model: Transformer<f32>, cfg: TrainConfig, par: Parallelism) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: AdamW::new(&model.weights),
            model,
            step: 0,
            cfg,
            par,
        })
    }

    /// Continue from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, par: Parallelism) -> Result<Self> {
        cfg.validate()?;
        let (m, v) = ckpt
            .adam
            .clone()
            .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no optimizer state".into()))?;
        if ckpt.step > cfg.steps {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is at step {} beyond the configured {}",
                ckpt.step, cfg.steps
            )));
        }
        Ok(Self {
            model: Transformer::new(ckpt.config, ckpt.weights.clone())?,
            opt: AdamW { m, v, t: ckpt.step },
            step: ckpt.step,
            cfg,
            par,
        })
    }

    pub fn checkpoint(&self, flags: CheckpointFlags) -> Checkpoint {
        let mut c = Checkpoint::new(self.model.config, flags, self.model.weights.clone());
        c.step = self.step;
        c.adam = Some((self.opt.m.clone(), self.opt.v.clone()));
        c
    }

    pub fn flags(&self) -> CheckpointFlags {
        CheckpointFlags {
            sc_trained: self.cfg.sc,
            semantic: self.cfg.semantic,
            arm_trained: self.cfg.arm_loss,
        }
    }

    pub fn kinds(&self) -> Vec<LossKind> {
        let mut k = vec![LossKind::Lpm];
        if self.cfg.sc {
            k.push(LossKind::Spm);
        }
        if self.cfg.arm_loss {
            k.push(LossKind::Arm);
        }
        k
    }

    /// The examples of update number `step` (1-based) for one objective.
    pub fn sample_batch(&self, data: TrainData<'_>, kind: LossKind, step: u64) -> Result<Vec<TrainExample>> {
        if data.grids.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let spec = *data.grids[0].spec();
        let mut rng = Streams::new(self.cfg.seed).rng("batch", &[step, kind.tag()]);
        (0..self.cfg.batch_size)
            .map(|_| {
                let g = rng.gen_range(0..data.grids.len());
                let patch = PatchCoord::new(rng.gen_range(0..spec.rows), rng.gen_range(0..spec.cols));
                let keep_sem = self.cfg.semantic && rng.gen::<f64>() >= self.cfg.semantic_drop;
                let sem: &[SemanticVector] = match data.semantic {
                    Some(s) if keep_sem => &s[g],
                    _ => &[],
                };
                make_example(&data.grids[g], patch, kind, sem, &mut rng)
            })
            .collect()
    }

    /// One update from explicit per-objective batches; the total loss is
    /// the unweighted sum of the objectives' mean losses.
    pub fn apply(&mut self, batches: &[(LossKind, Vec<TrainExample>)]) -> Result<TraceRecord> {
        let step = self.step + 1;
        let mut grad = Weights::<f32>::zeros(&self.model.config);
        let mut rec = TraceRecord {
            step,
            loss: 0.0,
            lpm: f64::NAN,
            spm: None,
            arm: None,
            lr: self.cfg.learning_rate(step),
            grad_norm: 0.0,
        };
        for (kind, batch) in batches {
            let dropout = Streams::new(self.cfg.seed).child("dropout", &[step, kind.tag()]);
            let (loss, g) = self
                .model
                .gradients(batch, Some(dropout), self.par)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
                    e => e,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            grad.add_assign(&g);
            rec.loss += loss;
            match kind {
                LossKind::Lpm => rec.lpm = loss,
                LossKind::Spm => rec.spm = Some(loss),
                LossKind::Arm => rec.arm = Some(loss),
            }
        }
        let norm = grad.sq_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: rec.loss });
        }
        rec.grad_norm = norm;
        if step <= self.cfg.warmup && norm > self.cfg.clip_norm {
            grad.scale((self.cfg.clip_norm / norm) as f32);
        }
        self.opt.update(&mut self.model.weights, &grad, rec.lr, &self.cfg);
        if let Some(name) = self.model.weights.first_non_finite() {
            return Err(Error::NonFinite(format!("{name} after step {step}")));
        }
        self.step = step;
        Ok(rec)
    }

    pub fn step_once(&mut self, data: TrainData<'_>) -> Result<TraceRecord> {
        let step = self.step + 1;
        let batches = self
            .kinds()
            .into_iter()
            .map(|k| Ok((k, self.sample_batch(data, k, step)?)))
            .collect::<Result<Vec<_>>>()?;
        self.apply(&batches)
    }

    /// Train until `until` updates have been applied (capped at the
    /// configured total), reporting each record.
    pub fn run(
        &mut self,
        data: TrainData<'_>,
        until: u64,
        mut on_record: impl FnMut(&TraceRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.cfg.steps);
        while self.step < until {
            let rec = self.step_once(data)?;
            on_record(&rec)?;
        }
        Ok(())
    }
}
