use std::f64::consts::{PI, TAU};

use rand::Rng;

use super::codebook::TileLayout;
use crate::rng::Streams;
use crate::sphere_grid::{GridSpec, TokenGrid};

/// Parameters of the procedural field family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub harmonics: usize,
    pub gain: f64,
    /// Slope (base levels per token) below which a token is flat.
    pub flat_slope: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            harmonics: 4,
            gain: 1.5,
            flat_slope: 0.35,
        }
    }
}

struct Field {
    terms: Vec<(f64, f64, f64, f64, f64)>,
    horizon: (f64, f64),
    norm: f64,
    gain: f64,
}

impl Field {
    fn sample<R: Rng>(rng: &mut R, params: &SynthParams) -> Self {
        let terms: Vec<_> = (1..=params.harmonics)
            .map(|m| {
                let amp = rng.gen_range(0.4..1.0) / (m as f64).powf(0.8);
                let phase = rng.gen_range(0.0..TAU);
                let vfreq = rng.gen_range(0..3) as f64;
                let vphase = rng.gen_range(0.0..TAU);
                (m as f64, amp, phase, vfreq, vphase)
            })
            .collect();
        let sign: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let horizon = (sign * rng.gen_range(0.3..0.8), rng.gen_range(0.35..0.65));
        let norm = terms.iter().map(|t| t.1).sum::<f64>() + horizon.0.abs();
        Self {
            terms,
            horizon,
            norm,
            gain: params.gain,
        }
    }

    /// `phi` in radians around the panorama, `t` in [0, 1] top to bottom.
    fn eval(&self, phi: f64, t: f64) -> f64 {
        let mut f = self.horizon.0 * ((t - self.horizon.1) * 6.0).tanh();
        for &(m, amp, phase, vfreq, vphase) in &self.terms {
            f += amp * (m * phi + phase).sin() * (PI * vfreq * t + vphase).cos();
        }
        (self.gain * f / self.norm).clamp(-1.0, 1.0)
    }
}

/// A seamless synthetic panorama. The underlying field is a finite sum of
/// `sin(m phi + psi)` harmonics, hence exactly periodic in `x`; tokens encode
/// the quantized field level and the local gradient direction.
pub fn synth_panorama(seed: u64, spec: &GridSpec) -> TokenGrid {
    synth_with(seed, spec, &SynthParams::default())
}

pub fn synth_with(seed: u64, spec: &GridSpec, params: &SynthParams) -> TokenGrid {
    let mut rng = Streams::new(seed).rng("synth", &[]);
    let field = Field::sample(&mut rng, params);
    let layout = TileLayout::for_vocab(spec.vocab);
    let (w, h) = (spec.width() as f64, spec.height() as f64);
    let at = |x: f64, y: f64| field.eval(TAU * x / w, y / h);
    let mut grid = TokenGrid::filled(*spec, 0);
    for ty in 0..spec.height() {
        for tx in 0..spec.width() {
            let (x, y) = (tx as f64 + 0.5, ty as f64 + 0.5);
            let f = at(x, y);
            let base = (((f + 1.0) / 2.0 * layout.bases as f64) as usize).min(layout.bases - 1);
            let scale = layout.bases as f64 / 2.0;
            let gx = (at(x + 0.5, y) - at(x - 0.5, y)) * scale;
            let gy = (at(x, y + 0.5) - at(x, y - 0.5)) * scale;
            let slope = gx.hypot(gy);
            let variant = if slope < params.flat_slope || layout.variants < 2 {
                0
            } else {
                let sectors = (layout.variants - 1) as f64;
                let a = gy.atan2(gx).rem_euclid(TAU);
                1 + ((a / TAU * sectors).round() as usize % (layout.variants - 1))
            };
            let id = layout.id(base, variant).min(spec.vocab - 1);
            grid.set(tx, ty, id as u16);
        }
    }
    grid
}
