//! Positional encodings and extrapolation strategies.
//!
//! Everything here is a pure function from (real-valued) positions to
//! embeddings or rotations. Real-valued positions are allowed because
//! position interpolation produces them; rotation angles are always computed
//! as `position * theta_i` in double precision before casting down.
//!
//! Frequency convention: for an output vector of length `d`, pair `i` uses
//! `theta_i = base^(-2i/d)`, `i in 0..d/2`. RoPE-2D treats each half of the
//! head dimension as an independent 1-D RoPE of length `d/2`, so each axis
//! has `d/4` pairs with frequencies derived from the half length.

use crate::error::{CoreError, Result};
use crate::rpe2d;

/// Positional-encoding extrapolation strategy.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Plain extrapolation: test positions used as-is.
    Ext,
    /// Position interpolation: test positions rescaled into the train range.
    Pi,
    /// Base rescaling: positions as-is, frequency base enlarged per axis.
    Ntk,
    /// Randomized 2D positions; test positions from the deterministic
    /// maximally-equidistant assignment.
    Rpe2d,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "ext" => Ok(Strategy::Ext),
            "pi" => Ok(Strategy::Pi),
            "ntk" => Ok(Strategy::Ntk),
            "rpe2d" => Ok(Strategy::Rpe2d),
            other => Err(CoreError::Config(format!(
                "unknown pe.strategy '{other}' (expected ext|pi|ntk|rpe2d)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Ext => "ext",
            Strategy::Pi => "pi",
            Strategy::Ntk => "ntk",
            Strategy::Rpe2d => "rpe2d",
        }
    }
}

/// Positional-encoding configuration for one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct PEConfig {
    /// Embedding dim per head; even, and divisible by 4 for RoPE-2D.
    pub d: usize,
    /// Frequency base.
    pub base: f64,
    /// Maximum position per axis (the randomization range).
    pub max_h: usize,
    pub max_w: usize,
    pub strategy: Strategy,
    /// Patch-grid extents at train time.
    pub h_train: usize,
    pub w_train: usize,
    /// Patch-grid extents at the current sampling resolution.
    pub h_test: usize,
    pub w_test: usize,
}

impl PEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "pe dim must be a positive even number, got {}",
                self.d
            )));
        }
        if !self.d.is_multiple_of(4) {
            return Err(CoreError::Config(format!(
                "pe dim must be divisible by 4 for RoPE-2D, got {}",
                self.d
            )));
        }
        if self.strategy == Strategy::Ntk && self.d <= 2 {
            return Err(CoreError::Config(
                "ntk base rescaling requires pe dim > 2".into(),
            ));
        }
        if self.base.is_nan() || self.base <= 1.0 {
            return Err(CoreError::Config(format!(
                "pe base must exceed 1, got {}",
                self.base
            )));
        }
        if self.h_train < 1 || self.w_train < 1 || self.h_test < 1 || self.w_test < 1 {
            return Err(CoreError::Config("patch-grid extents must be >= 1".into()));
        }
        if self.strategy == Strategy::Rpe2d {
            if self.max_h < self.h_train || self.max_w < self.w_train {
                return Err(CoreError::Config(format!(
                    "max positions ({}, {}) must cover the training grid ({}, {})",
                    self.max_h, self.max_w, self.h_train, self.w_train
                )));
            }
            if self.max_h < self.h_test || self.max_w < self.w_test {
                return Err(CoreError::Capacity(format!(
                    "test grid ({}, {}) exceeds max positions H={}, W={}",
                    self.h_test, self.w_test, self.max_h, self.max_w
                )));
            }
        }
        Ok(())
    }
}

/// Rotation angles for a 1-D RoPE of length `d`: `m * base^(-2i/d)`.
pub fn pair_angles_1d(m: f64, d: usize, base: f64) -> Vec<f64> {
    let half = d / 2;
    (0..half)
        .map(|i| m * base.powf(-2.0 * i as f64 / d as f64))
        .collect()
}

/// Rotation angles for RoPE-2D: the x-half then the y-half, each an
/// independent 1-D RoPE of length `d/2` with its own base.
pub fn pair_angles_2d(x: f64, y: f64, d: usize, base_x: f64, base_y: f64) -> Vec<f64> {
    let mut angles = pair_angles_1d(x, d / 2, base_x);
    angles.extend(pair_angles_1d(y, d / 2, base_y));
    angles
}

fn rotate_pairs_by_angles(v: &[f32], angles: &[f64]) -> Vec<f32> {
    debug_assert_eq!(v.len(), 2 * angles.len());
    let mut out = Vec::with_capacity(v.len());
    for (pair, &a) in v.chunks_exact(2).zip(angles) {
        let (sin, cos) = a.sin_cos();
        let (x0, x1) = (pair[0] as f64, pair[1] as f64);
        out.push((cos * x0 - sin * x1) as f32);
        out.push((sin * x0 + cos * x1) as f32);
    }
    out
}

/// Sinusoidal embedding of a scalar: component `2i` is `sin(m*theta_i)`,
/// component `2i+1` is `cos(m*theta_i)`.
pub fn sinusoidal_embedding(value: f64, dim: usize, base: f64) -> Result<Vec<f32>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(CoreError::Config(format!(
            "sinusoidal embedding dim must be a positive even number, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let theta = base.powf(-2.0 * i as f64 / dim as f64);
        let (sin, cos) = (value * theta).sin_cos();
        out.push(sin as f32);
        out.push(cos as f32);
    }
    Ok(out)
}

/// Sinusoidal positional embedding of length `cfg.d` for position `m`.
pub fn sinpe(m: f64, cfg: &PEConfig) -> Result<Vec<f32>> {
    sinusoidal_embedding(m, cfg.d, cfg.base)
}

/// Rotate a head vector by position `m` (1-D RoPE).
pub fn rope_apply(v: &[f32], m: f64, cfg: &PEConfig) -> Result<Vec<f32>> {
    if v.len() != cfg.d || !v.len().is_multiple_of(2) {
        return Err(CoreError::ShapeMismatch {
            op: "rope_apply",
            lhs: vec![v.len()],
            rhs: vec![cfg.d],
        });
    }
    Ok(rotate_pairs_by_angles(
        v,
        &pair_angles_1d(m, v.len(), cfg.base),
    ))
}

/// Rotate a head vector by 2-D position `(x, y)`: the first `d/2` components
/// with `x`, the second `d/2` with `y` (block-diagonal composition).
pub fn rope2d_apply(v: &[f32], x: f64, y: f64, cfg: &PEConfig) -> Result<Vec<f32>> {
    if !cfg.d.is_multiple_of(4) {
        return Err(CoreError::Config(format!(
            "rope2d requires dim divisible by 4, got {}",
            cfg.d
        )));
    }
    if v.len() != cfg.d {
        return Err(CoreError::ShapeMismatch {
            op: "rope2d_apply",
            lhs: vec![v.len()],
            rhs: vec![cfg.d],
        });
    }
    let (bx, by) = strategy_bases(cfg);
    Ok(rotate_pairs_by_angles(
        v,
        &pair_angles_2d(x, y, cfg.d, bx, by),
    ))
}

/// Effective frequency base per axis. NTK enlarges the base by
/// `(extent_test/extent_train)^(d/(d-2))`; all other strategies keep it.
pub fn strategy_bases(cfg: &PEConfig) -> (f64, f64) {
    match cfg.strategy {
        Strategy::Ntk => {
            let expo = cfg.d as f64 / (cfg.d as f64 - 2.0);
            let bx = cfg.base * (cfg.h_test as f64 / cfg.h_train as f64).powf(expo);
            let by = cfg.base * (cfg.w_test as f64 / cfg.w_train as f64).powf(expo);
            (bx, by)
        }
        _ => (cfg.base, cfg.base),
    }
}

/// Effective real-valued position for test patch `(i, j)`, 1-indexed.
///
/// Ext and NTK keep `(i, j)` (NTK instead changes the base, see
/// [`strategy_bases`]); PI rescales linearly into the training range; RPE-2D
/// uses the deterministic maximally-equidistant assignment.
pub fn strategy_positions(i: usize, j: usize, cfg: &PEConfig) -> Result<(f64, f64)> {
    if i < 1 || i > cfg.h_test || j < 1 || j > cfg.w_test {
        return Err(CoreError::Input(format!(
            "patch index ({i}, {j}) outside test grid ({}, {})",
            cfg.h_test, cfg.w_test
        )));
    }
    match cfg.strategy {
        Strategy::Ext | Strategy::Ntk => Ok((i as f64, j as f64)),
        Strategy::Pi => Ok((
            i as f64 * cfg.h_train as f64 / cfg.h_test as f64,
            j as f64 * cfg.w_train as f64 / cfg.w_test as f64,
        )),
        Strategy::Rpe2d => {
            let grid = rpe2d::test_positions(cfg.h_test, cfg.w_test, cfg.max_h, cfg.max_w)?;
            Ok((grid.xs[i - 1] as f64, grid.ys[j - 1] as f64))
        }
    }
}

/// Per-pair cosine/sine of a 2-D rotation, x-half pairs then y-half pairs.
#[derive(Clone, Debug)]
pub struct Rotation2D {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

impl Rotation2D {
    pub fn for_position(x: f64, y: f64, d: usize, base_x: f64, base_y: f64) -> Result<Self> {
        if !d.is_multiple_of(4) {
            return Err(CoreError::Config(format!(
                "rotation requires dim divisible by 4, got {d}"
            )));
        }
        let angles = pair_angles_2d(x, y, d, base_x, base_y);
        let mut cos = Vec::with_capacity(angles.len());
        let mut sin = Vec::with_capacity(angles.len());
        for a in angles {
            let (s, c) = a.sin_cos();
            cos.push(c as f32);
            sin.push(s as f32);
        }
        Ok(Rotation2D { cos, sin })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn cfg(d: usize, strategy: Strategy) -> PEConfig {
        PEConfig {
            d,
            base: 10000.0,
            max_h: 64,
            max_w: 64,
            strategy,
            h_train: 8,
            w_train: 8,
            h_test: 16,
            w_test: 16,
        }
    }

    fn rand_vec(rng: &mut SeededRng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.next_f32() * 2.0 - 1.0).collect()
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn sinpe_at_zero() {
        let e = sinpe(0.0, &cfg(16, Strategy::Ext)).unwrap();
        for i in 0..8 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn sinpe_first_pair_at_one() {
        let e = sinpe(1.0, &cfg(16, Strategy::Ext)).unwrap();
        assert!((e[0] - 0.841_47).abs() < 1e-5);
        assert!((e[1] - 0.540_30).abs() < 1e-5);
    }

    #[test]
    fn sinpe_last_pair_matches_scalar_oracle() {
        let d = 16;
        let e = sinpe(1.0, &cfg(d, Strategy::Ext)).unwrap();
        let i = d / 2 - 1;
        let theta = 10000f64.powf(-((d - 2) as f64) / d as f64);
        assert!((e[2 * i] as f64 - theta.sin()).abs() < 1e-7);
        assert!((e[2 * i + 1] as f64 - theta.cos()).abs() < 1e-7);
    }

    #[test]
    fn sinpe_components_bounded() {
        let c = cfg(32, Strategy::Ext);
        let mut rng = SeededRng::new(1);
        for _ in 0..200 {
            let m = rng.next_f64() * 1e6;
            for v in sinpe(m, &c).unwrap() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn sinpe_rejects_odd_dim() {
        assert!(sinusoidal_embedding(1.0, 7, 10000.0).is_err());
    }

    #[test]
    fn rope_at_zero_is_identity() {
        let c = cfg(16, Strategy::Ext);
        let mut rng = SeededRng::new(2);
        let v = rand_vec(&mut rng, 16);
        assert_eq!(rope_apply(&v, 0.0, &c).unwrap(), v);
    }

    #[test]
    fn rope_two_dim_rotates_unit_vector() {
        let c = PEConfig {
            d: 2,
            ..cfg(16, Strategy::Ext)
        };
        // d=2 has a single pair with theta_0 = 1
        let out = rope_apply(&[1.0, 0.0], 1.0, &c).unwrap();
        assert!((out[0] as f64 - 1f64.cos()).abs() < 1e-7);
        assert!((out[1] as f64 - 1f64.sin()).abs() < 1e-7);
    }

    #[test]
    fn rope_preserves_norm() {
        let c = cfg(16, Strategy::Ext);
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let v = rand_vec(&mut rng, 16);
            let r = rope_apply(&v, rng.gen_below(1000) as f64, &c).unwrap();
            let n0 = dot(&v, &v).sqrt();
            let n1 = dot(&r, &r).sqrt();
            assert!((n0 - n1).abs() < 1e-5 * (1.0 + n0));
        }
    }

    #[test]
    fn rope_inner_product_depends_only_on_relative_offset() {
        let c = cfg(16, Strategy::Ext);
        let mut rng = SeededRng::new(4);
        for _ in 0..100 {
            let q = rand_vec(&mut rng, 16);
            let k = rand_vec(&mut rng, 16);
            let m = rng.gen_below(64) as f64;
            let n = rng.gen_below(64) as f64;
            let s = rng.gen_below(32) as f64;
            let f0 = dot(
                &rope_apply(&q, m, &c).unwrap(),
                &rope_apply(&k, n, &c).unwrap(),
            );
            let f1 = dot(
                &rope_apply(&q, m + s, &c).unwrap(),
                &rope_apply(&k, n + s, &c).unwrap(),
            );
            assert!((f0 - f1).abs() < 1e-5 * (1.0 + f0.abs()));
        }
    }

    #[test]
    fn rope2d_zero_identity_and_block_independence() {
        let c = cfg(16, Strategy::Ext);
        let mut rng = SeededRng::new(5);
        let v = rand_vec(&mut rng, 16);
        assert_eq!(rope2d_apply(&v, 0.0, 0.0, &c).unwrap(), v);

        // varying x leaves the y-half untouched
        let a = rope2d_apply(&v, 3.0, 7.0, &c).unwrap();
        let b = rope2d_apply(&v, 11.0, 7.0, &c).unwrap();
        assert_eq!(a[8..], b[8..]);
        assert_ne!(a[..8], b[..8]);
    }

    #[test]
    fn rope2d_equals_half_ropes() {
        let c = cfg(16, Strategy::Ext);
        let half_cfg = PEConfig { d: 8, ..c.clone() };
        let mut rng = SeededRng::new(6);
        let v = rand_vec(&mut rng, 16);
        let (x, y) = (13.0, 29.0);
        let full = rope2d_apply(&v, x, y, &c).unwrap();
        let fx = rope_apply(&v[..8], x, &half_cfg).unwrap();
        let fy = rope_apply(&v[8..], y, &half_cfg).unwrap();
        assert_eq!(&full[..8], fx.as_slice());
        assert_eq!(&full[8..], fy.as_slice());
    }

    #[test]
    fn rope2d_shift_invariance_per_axis() {
        let c = cfg(16, Strategy::Ext);
        let mut rng = SeededRng::new(7);
        for _ in 0..100 {
            let q = rand_vec(&mut rng, 16);
            let k = rand_vec(&mut rng, 16);
            let (x1, y1) = (rng.gen_below(32) as f64, rng.gen_below(32) as f64);
            let (x2, y2) = (rng.gen_below(32) as f64, rng.gen_below(32) as f64);
            let (s, t) = (rng.gen_below(16) as f64, rng.gen_below(16) as f64);
            let f0 = dot(
                &rope2d_apply(&q, x1, y1, &c).unwrap(),
                &rope2d_apply(&k, x2, y2, &c).unwrap(),
            );
            let f1 = dot(
                &rope2d_apply(&q, x1 + s, y1 + t, &c).unwrap(),
                &rope2d_apply(&k, x2 + s, y2 + t, &c).unwrap(),
            );
            assert!((f0 - f1).abs() < 1e-5 * (1.0 + f0.abs()));
        }
    }

    #[test]
    fn rope2d_rejects_dim_not_divisible_by_four() {
        let c = PEConfig {
            d: 6,
            ..cfg(16, Strategy::Ext)
        };
        assert!(rope2d_apply(&[0.0; 6], 1.0, 1.0, &c).is_err());
    }

    #[test]
    fn pi_equals_ext_when_extents_match() {
        let mut c = cfg(16, Strategy::Pi);
        c.h_test = c.h_train;
        c.w_test = c.w_train;
        for i in 1..=c.h_test {
            for j in 1..=c.w_test {
                let (x, y) = strategy_positions(i, j, &c).unwrap();
                assert_eq!((x, y), (i as f64, j as f64));
            }
        }
    }

    #[test]
    fn pi_halves_positions_at_double_resolution() {
        let c = PEConfig {
            h_train: 16,
            w_train: 16,
            h_test: 32,
            w_test: 32,
            ..cfg(16, Strategy::Pi)
        };
        let (x, _) = strategy_positions(32, 1, &c).unwrap();
        assert_eq!(x, 16.0);
    }

    #[test]
    fn ntk_base_reduces_to_b_without_extrapolation() {
        let mut c = cfg(16, Strategy::Ntk);
        c.h_test = c.h_train;
        c.w_test = c.w_train;
        let (bx, by) = strategy_bases(&c);
        assert_eq!(bx, 10000.0);
        assert_eq!(by, 10000.0);
    }

    #[test]
    fn ntk_base_grows_per_axis() {
        let c = cfg(16, Strategy::Ntk);
        let (bx, _) = strategy_bases(&c);
        let expo = 16.0 / 14.0;
        assert!((bx - 10000.0 * 2f64.powf(expo)).abs() < 1e-6);
    }

    #[test]
    fn unknown_strategy_name_is_config_error() {
        assert!(matches!(Strategy::parse("yarn"), Err(CoreError::Config(_))));
    }

    #[test]
    fn rpe2d_strategy_uses_test_grid() {
        let c = cfg(16, Strategy::Rpe2d);
        let (x, y) = strategy_positions(1, 1, &c).unwrap();
        assert_eq!((x, y), (1.0, 1.0));
        let (x, y) = strategy_positions(16, 16, &c).unwrap();
        assert_eq!((x, y), (64.0, 64.0));
    }

    #[test]
    fn rotation2d_unit_circle_invariant() {
        let r = Rotation2D::for_position(37.0, 15.0, 16, 10000.0, 10000.0).unwrap();
        assert_eq!(r.cos.len(), 8);
        for (c, s) in r.cos.iter().zip(&r.sin) {
            let one = (c * c + s * s) as f64;
            assert!((one - 1.0).abs() < 1e-6);
        }
    }
}
