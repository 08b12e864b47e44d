//! Heuristic baselines: even partition and historical average.

use std::path::Path;

use crate::data::read_flow_file;
use crate::error::{Error, Result};
use crate::grid::{distribute, sum_pool, upsample_nearest, DistributionMap, FlowMap, Grid, ScaleFactor};

/// Splits every superregion's flow evenly over its `n²` subregions. The
/// last cell of each block takes `c - (sum of the others)`, so summing a
/// block in row-major order reproduces `c` exactly.
pub fn mean_partition(coarse: &FlowMap, scale: ScaleFactor) -> FlowMap {
    let (h, w) = coarse.shape();
    let n = scale.get();
    let fw = w * n;
    let mut values = vec![0.0; h * n * fw];
    for (k, &c) in coarse.values().iter().enumerate() {
        let (bi, bj) = (k / w, k % w);
        let q = c / (n * n) as f64;
        let mut partial = 0.0;
        for dy in 0..n {
            for dx in 0..n {
                let idx = (bi * n + dy) * fw + bj * n + dx;
                let v = if dy == n - 1 && dx == n - 1 { c - partial } else { q };
                values[idx] = v;
                partial += v;
            }
        }
    }
    FlowMap::new(h * n, fw, values).expect("nonnegative input")
}

/// Per-block fractions averaged over the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HaModel {
    pub dist: DistributionMap,
    pub scale: ScaleFactor,
}

/// Fraction of each subregion = its total historical flow over its block's
/// total historical flow. Blocks that never saw flow fall back to uniform.
pub fn ha_fit(train_fine: &[FlowMap], scale: ScaleFactor) -> Result<HaModel> {
    let first = train_fine
        .first()
        .ok_or_else(|| Error::domain("ha_fit", "training sequence is empty"))?;
    let (h, w) = first.shape();
    let n = scale.get();
    if h % n != 0 || w % n != 0 {
        return Err(Error::shape("ha_fit", format!("{h}x{w} map not divisible by scale {n}")));
    }
    let mut total = vec![0.0; h * w];
    for m in train_fine {
        if m.shape() != (h, w) {
            return Err(Error::shape("ha_fit", "training maps have differing shapes"));
        }
        for (t, v) in total.iter_mut().zip(m.values()) {
            *t += v;
        }
    }
    let sums = upsample_nearest(&sum_pool(&total, h, w, n), h / n, w / n, n);
    let share = 1.0 / (n * n) as f64;
    let values = total
        .iter()
        .zip(&sums)
        .map(|(t, s)| if *s > 0.0 { t / s } else { share })
        .collect();
    Ok(HaModel {
        dist: DistributionMap::new(Grid::new(h, w, values)?, scale)?,
        scale,
    })
}

impl HaModel {
    pub fn uniform(coarse_height: usize, coarse_width: usize, scale: ScaleFactor) -> Self {
        HaModel {
            dist: DistributionMap::uniform(coarse_height, coarse_width, scale),
            scale,
        }
    }

    pub fn infer(&self, coarse: &FlowMap) -> Result<FlowMap> {
        distribute(coarse, &self.dist, self.scale)
    }

    /// Stores the fractions as a one-map grid file. Values are written at
    /// full precision so block sums stay within rounding of one.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_fractions(path, self.dist.grid())
    }

    pub fn load(path: &Path, scale: ScaleFactor) -> Result<Self> {
        let maps = read_flow_file(path)?;
        let [m] = &maps[..] else {
            return Err(Error::Data(format!(
                "{}: expected a single fraction map, found {}",
                path.display(),
                maps.len()
            )));
        };
        Ok(HaModel {
            dist: DistributionMap::new(m.grid().clone(), scale)?,
            scale,
        })
    }
}

fn write_fractions(path: &Path, g: &Grid) -> Result<()> {
    let mut out = format!("1 {} {}\n", g.height, g.width);
    for row in g.values.chunks(g.width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn ha_infer(model: &HaModel, coarse: &FlowMap) -> Result<FlowMap> {
    model.infer(coarse)
}
