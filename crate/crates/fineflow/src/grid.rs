//! Differentiation-free algebra on flow grids.
//!
//! Blocks are 0-based: fine cell `(r, c)` belongs to superregion
//! `(r / n, c / n)`, i.e. block `(i, j)` covers rows `[i*n, (i+1)*n)` and
//! columns `[j*n, (j+1)*n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default stabilizer added to every block sum by [`n2_normalize`].
pub const DEFAULT_EPS: f64 = 1e-7;

/// Upscaling factor between a coarse grid and its fine counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ScaleFactor(usize);

impl ScaleFactor {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::domain("scale", format!("upscaling factor must be >= 2, got {n}")));
        }
        Ok(ScaleFactor(n))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Prime factors in nondecreasing order (6 -> [2, 3], 8 -> [2, 2, 2]).
    pub fn prime_factors(self) -> Vec<usize> {
        let mut n = self.0;
        let mut out = Vec::new();
        let mut p = 2;
        while p * p <= n {
            while n.is_multiple_of(p) {
                out.push(p);
                n /= p;
            }
            p += 1;
        }
        if n > 1 {
            out.push(n);
        }
        out
    }
}

impl TryFrom<usize> for ScaleFactor {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        ScaleFactor::new(n)
    }
}

impl From<ScaleFactor> for usize {
    fn from(s: ScaleFactor) -> usize {
        s.0
    }
}

/// Row-major 2-D array of reals with no sign constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("grid", format!("empty grid {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "grid",
                format!("{} values for a {height}x{width} grid", values.len()),
            ));
        }
        Ok(Grid {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("grid", "ragged rows"));
        }
        Grid::new(height, width, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.width + c] = v;
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Nonnegative flow volumes over a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap(Grid);

impl FlowMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        FlowMap::try_from(Grid::new(height, width, values)?)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowMap(Grid::zeros(height, width))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        FlowMap::try_from(Grid::from_rows(rows)?)
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.values.iter().sum()
    }
}

impl TryFrom<Grid> for FlowMap {
    type Error = Error;

    fn try_from(grid: Grid) -> Result<Self> {
        if let Some((k, v)) = grid
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::domain(
                "flow map",
                format!(
                    "entry ({}, {}) = {v} is not a finite nonnegative flow",
                    k / grid.width,
                    k % grid.width
                ),
            ));
        }
        Ok(FlowMap(grid))
    }
}

/// Per-block allocation fractions over a fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMap {
    grid: Grid,
    scale: ScaleFactor,
}

impl DistributionMap {
    /// Wraps fractions, checking range and that block sums do not exceed one.
    pub fn new(grid: Grid, scale: ScaleFactor) -> Result<Self> {
        check_divisible(grid.height, grid.width, scale, "distribution map")?;
        if grid
            .values
            .iter()
            .any(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::domain("distribution map", "fractions must lie in [0, 1]"));
        }
        let sums = sum_pool(&grid.values, grid.height, grid.width, scale.get());
        if let Some(s) = sums.iter().find(|s| **s > 1.0 + 1e-6) {
            return Err(Error::domain(
                "distribution map",
                format!("block sum {s} exceeds 1"),
            ));
        }
        Ok(DistributionMap { grid, scale })
    }

    /// Every block holds `1/n²` of its superregion.
    pub fn uniform(coarse_height: usize, coarse_width: usize, scale: ScaleFactor) -> Self {
        let n = scale.get();
        let v = 1.0 / (n * n) as f64;
        DistributionMap {
            grid: Grid {
                height: coarse_height * n,
                width: coarse_width * n,
                values: vec![v; coarse_height * coarse_width * n * n],
            },
            scale,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.grid.values
    }

    pub fn scale(&self) -> ScaleFactor {
        self.scale
    }

    pub fn block_sums(&self) -> Vec<f64> {
        sum_pool(
            &self.grid.values,
            self.grid.height,
            self.grid.width,
            self.scale.get(),
        )
    }

    /// Every block sums to one within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        self.block_sums().iter().all(|s| (s - 1.0).abs() <= tol)
    }
}

fn check_divisible(height: usize, width: usize, scale: ScaleFactor, context: &'static str) -> Result<()> {
    let n = scale.get();
    if !height.is_multiple_of(n) {
        return Err(Error::shape(
            context,
            format!("height {height} is not divisible by scale {n}"),
        ));
    }
    if !width.is_multiple_of(n) {
        return Err(Error::shape(
            context,
            format!("width {width} is not divisible by scale {n}"),
        ));
    }
    Ok(())
}

/// Sum pooling over non-overlapping `n x n` blocks of a row-major array.
pub(crate) fn sum_pool(values: &[f64], height: usize, width: usize, n: usize) -> Vec<f64> {
    let (ch, cw) = (height / n, width / n);
    let mut out = vec![0.0; ch * cw];
    for r in 0..height {
        let row = &values[r * width..(r + 1) * width];
        let dst = &mut out[(r / n) * cw..(r / n + 1) * cw];
        for (c, v) in row.iter().enumerate() {
            dst[c / n] += v;
        }
    }
    out
}

pub(crate) fn upsample_nearest(values: &[f64], height: usize, width: usize, n: usize) -> Vec<f64> {
    let fw = width * n;
    let mut out = vec![0.0; height * n * fw];
    for r in 0..height * n {
        let src = &values[(r / n) * width..(r / n + 1) * width];
        for (c, dst) in out[r * fw..(r + 1) * fw].iter_mut().enumerate() {
            *dst = src[c / n];
        }
    }
    out
}

/// Aggregates a fine map into superregions.
pub fn coarsen(fine: &FlowMap, scale: ScaleFactor) -> Result<FlowMap> {
    let (h, w) = fine.shape();
    check_divisible(h, w, scale, "coarsen")?;
    let n = scale.get();
    Ok(FlowMap(Grid {
        height: h / n,
        width: w / n,
        values: sum_pool(fine.values(), h, w, n),
    }))
}

/// Replicates each coarse entry over its `n x n` block.
pub fn nn_upsample(coarse: &FlowMap, scale: ScaleFactor) -> FlowMap {
    let (h, w) = coarse.shape();
    let n = scale.get();
    FlowMap(Grid {
        height: h * n,
        width: w * n,
        values: upsample_nearest(coarse.values(), h, w, n),
    })
}

/// Divides each entry by its block sum plus `eps`: sum-pool, upsample the
/// sums, divide element-wise.
pub fn n2_normalize(raw: &Grid, scale: ScaleFactor, eps: f64) -> Result<DistributionMap> {
    check_divisible(raw.height, raw.width, scale, "n2_normalize")?;
    if let Some((k, v)) = raw
        .values
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(Error::domain(
            "n2_normalize",
            format!(
                "input entry ({}, {}) = {v} must be finite and nonnegative",
                k / raw.width,
                k % raw.width
            ),
        ));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::domain("n2_normalize", format!("eps must be >= 0, got {eps}")));
    }
    let n = scale.get();
    let sums = sum_pool(&raw.values, raw.height, raw.width, n);
    let up = upsample_nearest(&sums, raw.height / n, raw.width / n, n);
    let values = raw
        .values
        .iter()
        .zip(&up)
        .map(|(x, s)| {
            let d = s + eps;
            // 0/0 only arises for an all-zero block with eps = 0
            if d > 0.0 {
                x / d
            } else {
                0.0
            }
        })
        .collect();
    Ok(DistributionMap {
        grid: Grid {
            height: raw.height,
            width: raw.width,
            values,
        },
        scale,
    })
}

/// Fine inference `upsample(coarse) ⊙ dist`.
pub fn distribute(coarse: &FlowMap, dist: &DistributionMap, scale: ScaleFactor) -> Result<FlowMap> {
    let (h, w) = coarse.shape();
    let n = scale.get();
    if dist.grid.height != h * n || dist.grid.width != w * n {
        return Err(Error::shape(
            "distribute",
            format!(
                "distribution is {}x{}, expected {}x{} for a {h}x{w} coarse map at scale {n}",
                dist.grid.height,
                dist.grid.width,
                h * n,
                w * n
            ),
        ));
    }
    let up = upsample_nearest(coarse.values(), h, w, n);
    let values = up.iter().zip(dist.values()).map(|(c, d)| c * d).collect();
    Ok(FlowMap(Grid {
        height: h * n,
        width: w * n,
        values,
    }))
}

fn check_pair(coarse: &FlowMap, fine: &FlowMap, scale: ScaleFactor, context: &'static str) -> Result<()> {
    let n = scale.get();
    if fine.height() != coarse.height() * n || fine.width() != coarse.width() * n {
        return Err(Error::shape(
            context,
            format!(
                "fine map {}x{} does not match coarse {}x{} at scale {n}",
                fine.height(),
                fine.width(),
                coarse.height(),
                coarse.width()
            ),
        ));
    }
    Ok(())
}

/// Per-superregion residuals `coarse - Σ block(fine)`.
pub fn structural_residuals(coarse: &FlowMap, fine: &FlowMap, scale: ScaleFactor) -> Result<Vec<f64>> {
    check_pair(coarse, fine, scale, "structural_violation")?;
    let sums = sum_pool(fine.values(), fine.height(), fine.width(), scale.get());
    Ok(coarse.values().iter().zip(&sums).map(|(c, s)| c - s).collect())
}

/// Largest absolute per-superregion violation of the sum constraint.
pub fn structural_violation(coarse: &FlowMap, fine: &FlowMap, scale: ScaleFactor) -> Result<f64> {
    Ok(structural_residuals(coarse, fine, scale)?
        .into_iter()
        .fold(0.0, |m, r| m.max(r.abs())))
}

/// Largest per-superregion violation relative to `max(1, coarse value)`.
pub fn relative_structural_violation(coarse: &FlowMap, fine: &FlowMap, scale: ScaleFactor) -> Result<f64> {
    Ok(structural_residuals(coarse, fine, scale)?
        .into_iter()
        .zip(coarse.values())
        .fold(0.0, |m, (r, c)| m.max(r.abs() / c.max(1.0))))
}
