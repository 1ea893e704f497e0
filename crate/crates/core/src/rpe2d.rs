//! Randomized 2D position assignment.
//!
//! At train time a patch grid of extent `h x w` is assigned positions from a
//! larger range `[1, H] x [1, W]`: each axis draws a sorted random subset and
//! the grid takes their Cartesian product, so every token's encoding is
//! in-distribution at any test resolution. At test time the assignment is
//! deterministic and maximally equidistant.
//!
//! Three sampling variants exist: `grid` (the Cartesian-product sampler),
//! `equispaced` (one random interval and start shared by both axes), and
//! `naive` (flattened 1-D sampling that ignores the 2-D structure).

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;

/// Which randomized sampler assigns train-time positions.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RpeVariant {
    Grid,
    Equispaced,
    Naive,
}

impl RpeVariant {
    pub fn parse(s: &str) -> Result<RpeVariant> {
        match s {
            "grid" => Ok(RpeVariant::Grid),
            "equispaced" => Ok(RpeVariant::Equispaced),
            "naive" => Ok(RpeVariant::Naive),
            other => Err(CoreError::Config(format!(
                "unknown rpe.variant '{other}' (expected grid|equispaced|naive)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RpeVariant::Grid => "grid",
            RpeVariant::Equispaced => "equispaced",
            RpeVariant::Naive => "naive",
        }
    }
}

/// Per-sample assignment of 2D integer positions to patch indices.
///
/// `xs` and `ys` are strictly increasing; patch `(i, j)` (row-major,
/// 0-indexed here) takes position `(xs[i], ys[j])` — the Cartesian product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionGrid {
    pub xs: Vec<u32>,
    pub ys: Vec<u32>,
    pub max_h: u32,
    pub max_w: u32,
}

impl PositionGrid {
    /// Row-major expansion of the Cartesian product: token `i*w + j` gets
    /// `(xs[i], ys[j])`.
    pub fn token_positions(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.xs.len() * self.ys.len());
        for &x in &self.xs {
            for &y in &self.ys {
                out.push((x, y));
            }
        }
        out
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.xs.len(), self.ys.len())
    }

    fn check(&self) -> Result<()> {
        for (vals, max, axis) in [(&self.xs, self.max_h, "x"), (&self.ys, self.max_w, "y")] {
            if vals.is_empty() {
                return Err(CoreError::Input(format!("empty {axis} positions")));
            }
            if vals[0] < 1 || *vals.last().unwrap() > max {
                return Err(CoreError::Input(format!(
                    "{axis} positions outside [1, {max}]"
                )));
            }
            if vals.windows(2).any(|p| p[0] >= p[1]) {
                return Err(CoreError::Input(format!(
                    "{axis} positions not strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

fn check_capacity(h: usize, w: usize, max_h: usize, max_w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(CoreError::Input("grid extents must be positive".into()));
    }
    if h > max_h || w > max_w {
        return Err(CoreError::Capacity(format!(
            "grid {h}x{w} does not fit in position range H={max_h}, W={max_w}"
        )));
    }
    Ok(())
}

/// Sorted uniform sample of `k` distinct values from `{1..=n}`.
///
/// Partial Fisher-Yates over the full range keeps every k-subset equally
/// likely.
fn sorted_subset(k: usize, n: usize, rng: &mut SeededRng) -> Vec<u32> {
    debug_assert!(k <= n);
    let mut pool: Vec<u32> = (1..=n as u32).collect();
    for i in 0..k {
        let j = i + rng.gen_below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

/// Cartesian-product sampler: each axis draws a sorted random subset of its
/// range, independently.
pub fn sample_grid_positions(
    h: usize,
    w: usize,
    max_h: usize,
    max_w: usize,
    rng: &mut SeededRng,
) -> Result<PositionGrid> {
    check_capacity(h, w, max_h, max_w)?;
    let xs = sorted_subset(h, max_h, rng);
    let ys = sorted_subset(w, max_w, rng);
    let grid = PositionGrid {
        xs,
        ys,
        max_h: max_h as u32,
        max_w: max_w as u32,
    };
    grid.check()?;
    Ok(grid)
}

/// Equispaced sampler: one interval `r` drawn uniformly from the range
/// feasible on both axes, then per-axis uniform starts.
///
/// Feasibility per axis of extent `k` over range `n`: `r <= (n-1)/(k-1)`
/// when `k >= 2`; a single-position axis accepts any interval.
pub fn sample_equispaced_positions(
    h: usize,
    w: usize,
    max_h: usize,
    max_w: usize,
    rng: &mut SeededRng,
) -> Result<PositionGrid> {
    check_capacity(h, w, max_h, max_w)?;
    let axis_max_r = |k: usize, n: usize| -> Option<usize> {
        if k >= 2 {
            Some((n - 1) / (k - 1))
        } else {
            None
        }
    };
    let r_max = match (axis_max_r(h, max_h), axis_max_r(w, max_w)) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => 1,
    };
    if r_max < 1 {
        return Err(CoreError::Capacity(format!(
            "no feasible interval for {h}x{w} in H={max_h}, W={max_w}"
        )));
    }
    let r = rng.gen_range_inclusive(1, r_max as u64) as usize;
    let axis = |k: usize, n: usize, rng: &mut SeededRng| -> Vec<u32> {
        let span = (k - 1) * r;
        let start = rng.gen_range_inclusive(1, (n - span) as u64) as u32;
        (0..k as u32).map(|i| start + i * r as u32).collect()
    };
    let xs = axis(h, max_h, rng);
    let ys = axis(w, max_w, rng);
    let grid = PositionGrid {
        xs,
        ys,
        max_h: max_h as u32,
        max_w: max_w as u32,
    };
    grid.check()?;
    Ok(grid)
}

/// Naive flattened sampler: `h*w` sorted positions from `{1..=H*W}`. Token
/// `k` (row-major) takes the `k`-th position, consumed as a 1-D RoPE
/// position.
pub fn sample_naive_positions(
    h: usize,
    w: usize,
    max_h: usize,
    max_w: usize,
    rng: &mut SeededRng,
) -> Result<Vec<u32>> {
    if h == 0 || w == 0 {
        return Err(CoreError::Input("grid extents must be positive".into()));
    }
    let need = h * w;
    let range = max_h * max_w;
    if need > range {
        return Err(CoreError::Capacity(format!(
            "{need} positions do not fit in flattened range {range}"
        )));
    }
    Ok(sorted_subset(need, range, rng))
}

/// Rounded endpoint-anchored linspace over `[1, n]`.
fn linspace_positions(k: usize, n: usize) -> Vec<u32> {
    if k == 1 {
        return vec![n.div_ceil(2) as u32];
    }
    let step = (n as f64 - 1.0) / (k as f64 - 1.0);
    (0..k)
        .map(|i| (1.0 + i as f64 * step).round() as u32)
        .collect()
}

/// Deterministic maximally-equidistant test assignment: endpoints pinned to
/// `1` and the maximum position, near-uniform spacing in between.
pub fn test_positions(
    h_test: usize,
    w_test: usize,
    max_h: usize,
    max_w: usize,
) -> Result<PositionGrid> {
    check_capacity(h_test, w_test, max_h, max_w)?;
    let grid = PositionGrid {
        xs: linspace_positions(h_test, max_h),
        ys: linspace_positions(w_test, max_w),
        max_h: max_h as u32,
        max_w: max_w as u32,
    };
    grid.check()?;
    Ok(grid)
}

/// 1-D analogue of [`test_positions`] for the naive variant at test time.
pub fn test_positions_flat(count: usize, range: usize) -> Result<Vec<u32>> {
    if count == 0 {
        return Err(CoreError::Input("need at least one position".into()));
    }
    if count > range {
        return Err(CoreError::Capacity(format!(
            "{count} positions do not fit in flattened range {range}"
        )));
    }
    Ok(linspace_positions(count, range))
}
