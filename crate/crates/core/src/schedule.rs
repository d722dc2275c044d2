//! Mask-count and keep-count schedules for masked token modeling, plus the
//! confidence-ranked selection used by iterative parallel decoding.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::{Error, Result};

// Absorbs cos() round-off at points where the exact product is an integer.
const CEIL_SLACK: f64 = 1e-9;

fn ceil_count(x: f64, n: usize) -> usize {
    ((x - CEIL_SLACK).ceil().max(0.0) as usize).min(n)
}

/// Number of training positions to mask for uniform draw `r` in `[0, 1)`.
pub fn mask_count(r: f64, n: usize) -> usize {
    ceil_count((r * FRAC_PI_2).cos() * n as f64, n).clamp(1, n.max(1))
}

/// Tokens kept (frozen) after decode step `t` of `total`.
pub fn keep_count(t: usize, total: usize, n: usize) -> usize {
    assert!(total >= 1 && t <= total, "keep_count: need 0 <= t <= T, T >= 1");
    if t == total {
        return n;
    }
    ceil_count((1.0 - (FRAC_PI_2 * t as f64 / total as f64).cos()) * n as f64, n)
}

/// Exactly `count` of `n` positions set, uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Result<Vec<bool>> {
    if count < 1 || count > n {
        return Err(Error::OutOfRange(format!("mask count {count} not in [1, {n}]")));
    }
    let mut bitmap = vec![false; n];
    for i in rand::seq::index::sample(rng, n, count) {
        bitmap[i] = true;
    }
    Ok(bitmap)
}

/// Extend `kept` to `target` positions by adding the most confident
/// still-masked positions. Ties go to the lower index.
pub fn select_keeps(confidence: &[f64], kept: &[bool], target: usize) -> Result<Vec<bool>> {
    let n = confidence.len();
    if kept.len() != n {
        return Err(Error::Shape(format!("{} confidences vs {} flags", n, kept.len())));
    }
    if target > n {
        return Err(Error::OutOfRange(format!("keep target {target} > {n}")));
    }
    let already = kept.iter().filter(|&&k| k).count();
    if target < already {
        return Err(Error::OutOfRange(format!(
            "keep target {target} below {already} already kept"
        )));
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    let mut out = kept.to_vec();
    for &i in order.iter().take(target - already) {
        out[i] = true;
    }
    Ok(out)
}

/// Progress of one patch through iterative decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    kept: Vec<bool>,
    confidence: Vec<f64>,
    step: usize,
    total: usize,
}

impl MaskState {
    pub fn new(n: usize, total: usize) -> Self {
        assert!(total >= 1);
        Self {
            kept: vec![false; n],
            confidence: vec![f64::NAN; n],
            step: 0,
            total,
        }
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step == self.total
    }

    pub fn masked_count(&self) -> usize {
        self.kept.iter().filter(|&&k| !k).count()
    }

    pub fn is_final_step(&self) -> bool {
        self.step + 1 == self.total
    }

    /// Advance one step given fresh confidences on masked positions. Returns
    /// the positions newly kept in this step.
    pub fn advance(&mut self, confidence: &[f64]) -> Result<Vec<usize>> {
        if self.is_done() {
            return Err(Error::OutOfRange("decode already finished".into()));
        }
        let target = keep_count(self.step + 1, self.total, self.kept.len());
        let next = select_keeps(confidence, &self.kept, target)?;
        let fresh: Vec<usize> = (0..next.len()).filter(|&i| next[i] && !self.kept[i]).collect();
        for &i in &fresh {
            self.confidence[i] = confidence[i];
        }
        self.kept = next;
        self.step += 1;
        Ok(fresh)
    }
}
