//! Rotary position embeddings over the 2D token lattice.
//!
//! The head dimension `d` is split into an x-half and a y-half. Within each
//! half, components `(2i, 2i+1)` form a pair rotated by `coord * theta[i]`.
//! The spherical variant replaces the geometric frequency ladder with
//! frequencies scaled to the lattice extent, so one full sweep across the
//! panorama width stays under a full turn and one sweep across the height
//! stays under half a turn.

use std::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere_grid::TokenCoord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RotaryVariant {
    Vanilla2d,
    #[default]
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// `theta_i = 10000^(-2(i-1)/d)` for `i in 1..=d_half`, `d = 2 d_half`.
pub fn theta_vanilla(d_half: usize) -> Vec<f64> {
    let d = (2 * d_half) as f64;
    (0..d_half)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / d))
        .collect()
}

/// Extent-scaled frequencies. The x-axis carries a `2 pi` numerator, the
/// y-axis a `pi` numerator.
pub fn theta_sphere(axis: Axis, d_half: usize, extent: usize) -> Vec<f64> {
    let d = (2 * d_half) as f64;
    let turn = match axis {
        Axis::X => 2.0 * PI,
        Axis::Y => PI,
    };
    (0..d_half)
        .map(|i| -2.0 * i as f64 * turn / (d * extent as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotaryParams {
    head_dim: usize,
    theta_x: Vec<f64>,
    theta_y: Vec<f64>,
    variant: RotaryVariant,
    width: usize,
    height: usize,
}

impl RotaryParams {
    pub fn new(variant: RotaryVariant, head_dim: usize, width: usize, height: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rotary head dim {head_dim} must be a positive multiple of 4"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("rotary extents must be positive".into()));
        }
        let quarter = head_dim / 4;
        let (theta_x, theta_y) = match variant {
            RotaryVariant::Vanilla2d => (theta_vanilla(quarter), theta_vanilla(quarter)),
            RotaryVariant::Sphere => (
                theta_sphere(Axis::X, quarter, width),
                theta_sphere(Axis::Y, quarter, height),
            ),
        };
        Ok(Self {
            head_dim,
            theta_x,
            theta_y,
            variant,
            width,
            height,
        })
    }

    /// Explicit frequency tables, mainly for tests.
    pub fn with_tables(theta_x: Vec<f64>, theta_y: Vec<f64>) -> Result<Self> {
        if theta_x.len() != theta_y.len() || theta_x.is_empty() {
            return Err(Error::Shape("theta tables must be non-empty and equal length".into()));
        }
        Ok(Self {
            head_dim: 4 * theta_x.len(),
            theta_x,
            theta_y,
            variant: RotaryVariant::Vanilla2d,
            width: 1,
            height: 1,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_x(&self) -> &[f64] {
        &self.theta_x
    }

    pub fn theta_y(&self) -> &[f64] {
        &self.theta_y
    }

    pub fn variant(&self) -> RotaryVariant {
        self.variant
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Per-pair `(cos, sin)` for a coordinate: x pairs first, then y pairs.
    pub fn table(&self, coord: TokenCoord) -> Vec<(f64, f64)> {
        let x = coord.x as f64;
        let y = coord.y as f64;
        self.theta_x
            .iter()
            .map(|t| (x * t).sin_cos())
            .chain(self.theta_y.iter().map(|t| (y * t).sin_cos()))
            .map(|(s, c)| (c, s))
            .collect()
    }

    pub fn rotate_2d(&self, vec: &[f64], coord: TokenCoord) -> Result<Vec<f64>> {
        if vec.len() != self.head_dim {
            return Err(Error::Shape(format!(
                "rotary expects length {}, got {}",
                self.head_dim,
                vec.len()
            )));
        }
        let mut out = vec.to_vec();
        apply_table(&mut out, &self.table(coord), false);
        Ok(out)
    }

    /// Attention logit between a rotated query and a rotated key.
    pub fn sre_logit(&self, q: &[f64], k: &[f64], cq: TokenCoord, ck: TokenCoord) -> Result<f64> {
        let rq = self.rotate_2d(q, cq)?;
        let rk = self.rotate_2d(k, ck)?;
        Ok(rq.iter().zip(&rk).map(|(a, b)| a * b).sum())
    }
}

/// Rotate consecutive pairs of `buf` in place. `inverse` applies the
/// transpose, which is the backward pass of the forward rotation.
pub fn apply_table<F: Float>(buf: &mut [F], table: &[(f64, f64)], inverse: bool) {
    debug_assert_eq!(buf.len(), 2 * table.len());
    for (pair, &(c, s)) in buf.chunks_exact_mut(2).zip(table) {
        let c = F::from(c).unwrap();
        let s = if inverse { -F::from(s).unwrap() } else { F::from(s).unwrap() };
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dense_matrix(p: &RotaryParams, c: TokenCoord) -> Vec<Vec<f64>> {
        let d = p.head_dim();
        let mut m = vec![vec![0.0; d]; d];
        for (k, (cs, sn)) in p.table(c).into_iter().enumerate() {
            let r = 2 * k;
            m[r][r] = cs;
            m[r][r + 1] = -sn;
            m[r + 1][r] = sn;
            m[r + 1][r + 1] = cs;
        }
        m
    }

    #[test]
    fn vanilla_examples() {
        let t = theta_vanilla(2);
        assert_eq!(t[0], 1.0);
        assert_abs_diff_eq!(t[1], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(theta_vanilla(4)[1], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn sphere_examples() {
        assert_eq!(theta_sphere(Axis::X, 4, 48)[0], 0.0);
        assert_eq!(theta_sphere(Axis::Y, 4, 24)[0], 0.0);
        assert_abs_diff_eq!(theta_sphere(Axis::X, 4, 48)[1], -PI / 96.0, epsilon = 1e-15);
        assert_abs_diff_eq!(theta_sphere(Axis::Y, 4, 24)[1], -PI / 96.0, epsilon = 1e-15);
        assert_abs_diff_eq!(theta_sphere(Axis::X, 4, 48)[1], -0.0327249, epsilon = 1e-7);
    }

    #[test]
    fn rotate_examples() {
        let p = RotaryParams::with_tables(vec![0.1], vec![0.2]).unwrap();
        let v = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(p.rotate_2d(&v, TokenCoord::new(0, 0)).unwrap(), v.to_vec());
        let r = p.rotate_2d(&v, TokenCoord::new(1, 1)).unwrap();
        let want = [0.995004, 0.099833, 0.980067, 0.198669];
        for (a, b) in r.iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
        assert!(p.rotate_2d(&[1.0, 2.0], TokenCoord::new(0, 0)).is_err());
    }

    #[test]
    fn sre_examples() {
        let p = RotaryParams::with_tables(vec![0.1], vec![0.7]).unwrap();
        let q = [1.0, 0.0, 0.0, 0.0];
        let l = p
            .sre_logit(&q, &q, TokenCoord::new(2, 0), TokenCoord::new(1, 0))
            .unwrap();
        assert_abs_diff_eq!(l, 0.1f64.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.995004, epsilon = 1e-6);
        let k = [0.3, -0.2, 0.5, 0.9];
        let c = TokenCoord::new(5, 3);
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(p.sre_logit(&q, &k, c, c).unwrap(), dot, epsilon = 1e-12);
    }

    #[test]
    fn pair_formula_matches_dense_matrix() {
        let p = RotaryParams::new(RotaryVariant::Sphere, 16, 48, 24).unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let c = TokenCoord::new(17, 9);
        let m = dense_matrix(&p, c);
        let dense: Vec<f64> = m
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let fast = p.rotate_2d(&v, c).unwrap();
        for (a, b) in dense.iter().zip(&fast) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let p = RotaryParams::new(RotaryVariant::Vanilla2d, 8, 48, 24).unwrap();
        let c = TokenCoord::new(11, 4);
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut r = p.rotate_2d(&v, c).unwrap();
        apply_table(&mut r, &p.table(c), true);
        for (a, b) in r.iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_angle_bounds() {
        for quarter in 1..=32 {
            let d = 4 * quarter;
            for extent in [1usize, 3, 24, 48, 96, 1000] {
                let p = RotaryParams::new(RotaryVariant::Sphere, d, extent, extent).unwrap();
                assert!(p.theta_x().iter().all(|t| (extent as f64 * t).abs() < 2.0 * PI));
                assert!(p.theta_y().iter().all(|t| (extent as f64 * t).abs() < PI));
            }
        }
    }

    #[test]
    fn variants_share_code_path() {
        let a = RotaryParams::new(RotaryVariant::Sphere, 8, 48, 24).unwrap();
        let b = RotaryParams::with_tables(a.theta_x().to_vec(), a.theta_y().to_vec()).unwrap();
        let v = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let c = TokenCoord::new(30, 20);
        assert_eq!(a.rotate_2d(&v, c).unwrap(), b.rotate_2d(&v, c).unwrap());
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(
            v in proptest::collection::vec(-10.0f64..10.0, 16),
            x in -200i32..200, y in -200i32..200,
        ) {
            let p = RotaryParams::new(RotaryVariant::Vanilla2d, 16, 48, 24).unwrap();
            let r = p.rotate_2d(&v, TokenCoord::new(x, y)).unwrap();
            let n0: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let n1: f64 = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-9 * (1.0 + n0));
        }

        #[test]
        fn logit_depends_on_offset_only(
            q in proptest::collection::vec(-2.0f64..2.0, 8),
            k in proptest::collection::vec(-2.0f64..2.0, 8),
            x1 in 0i32..48, y1 in 0i32..24, x2 in 0i32..48, y2 in 0i32..24,
            sx in -96i32..96, sy in -48i32..48,
        ) {
            let p = RotaryParams::new(RotaryVariant::Sphere, 8, 48, 24).unwrap();
            let a = p.sre_logit(&q, &k, TokenCoord::new(x1, y1), TokenCoord::new(x2, y2)).unwrap();
            let b = p.sre_logit(&q, &k, TokenCoord::new(x1 + sx, y1 + sy), TokenCoord::new(x2 + sx, y2 + sy)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
