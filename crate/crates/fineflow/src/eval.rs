//! Accuracy metrics and evaluation of models and baselines.

use std::fmt::Write as _;
use std::path::Path;

use crate::baselines::{mean_partition, HaModel};
use crate::data::{write_flow_file, Sample};
use crate::error::{Error, Result};
use crate::external::ExternalRecord;
use crate::grid::{relative_structural_violation, FlowMap, ScaleFactor};
use crate::model::{Batch, FlowModel};
use crate::nn::Scalar;

/// Targets below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when every target cell is below [`MAPE_FLOOR`].
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    /// Largest per-superregion violation relative to `max(1, coarse)`;
    /// filled in by [`evaluate`], which knows the coarse inputs.
    pub structural_residual: Option<f64>,
    pub samples: usize,
}

/// Per-pixel-mean RMSE and MAE over all maps; MAPE over cells whose target
/// is at least [`MAPE_FLOOR`].
pub fn compute_metrics(preds: &[FlowMap], targets: &[FlowMap]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::domain("metrics", "no samples"));
    }
    if preds.len() != targets.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions for {} targets", preds.len(), targets.len()),
        ));
    }
    let (mut se, mut ae, mut ape) = (0.0, 0.0, 0.0);
    let (mut cells, mut kept) = (0usize, 0usize);
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "metrics",
                format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
            ));
        }
        for (a, b) in p.values().iter().zip(t.values()) {
            let d = a - b;
            se += d * d;
            ae += d.abs();
            if *b >= MAPE_FLOOR {
                ape += d.abs() / b;
                kept += 1;
            }
        }
        cells += t.values().len();
    }
    let n = cells as f64;
    Ok(MetricsReport {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape: (kept > 0).then(|| ape / kept as f64),
        mape_excluded: cells - kept,
        structural_residual: None,
        samples: preds.len(),
    })
}

impl MetricsReport {
    pub fn mape_text(&self) -> String {
        self.mape.map(|m| format!("{m}")).unwrap_or_else(|| "undefined".into())
    }

    /// Human-readable summary.
    pub fn to_text(&self, method: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {method}");
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s, "RMSE: {:.6}", self.rmse);
        let _ = writeln!(s, "MAE: {:.6}", self.mae);
        match self.mape {
            Some(m) => {
                let _ = writeln!(s, "MAPE: {m:.6} ({} zero cells excluded)", self.mape_excluded);
            }
            None => {
                let _ = writeln!(s, "MAPE: undefined (all {} cells below floor)", self.mape_excluded);
            }
        }
        if let Some(r) = self.structural_residual {
            let _ = writeln!(s, "structural residual: {r:e}");
        }
        s
    }

    /// `key=value` lines for machine consumption.
    pub fn to_key_values(&self, method: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method={method}");
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "rmse={}", self.rmse);
        let _ = writeln!(s, "mae={}", self.mae);
        let _ = writeln!(s, "mape={}", self.mape_text());
        let _ = writeln!(s, "mape_excluded={}", self.mape_excluded);
        let _ = writeln!(
            s,
            "structural_residual={}",
            self.structural_residual.map(|r| r.to_string()).unwrap_or_else(|| "undefined".into())
        );
        s
    }

    pub fn write(&self, dir: &Path, method: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{method}.txt"));
        std::fs::write(&txt, self.to_text(method)).map_err(|e| Error::io(&txt, e))?;
        let kv = dir.join(format!("{method}.kv"));
        std::fs::write(&kv, self.to_key_values(method)).map_err(|e| Error::io(&kv, e))
    }
}

/// Anything that maps coarse maps (and possibly externals) to fine maps.
pub trait Inferencer {
    fn name(&self) -> String;
    fn scale(&self) -> ScaleFactor;
    fn coarse_shape(&self) -> Option<(usize, usize)>;
    fn infer_batch(&self, coarse: &[FlowMap], externals: &[ExternalRecord]) -> Result<Vec<FlowMap>>;
}

/// Even partition, independent of any training.
#[derive(Debug, Clone, Copy)]
pub struct MeanBaseline(pub ScaleFactor);

impl Inferencer for MeanBaseline {
    fn name(&self) -> String {
        "mean".into()
    }
    fn scale(&self) -> ScaleFactor {
        self.0
    }
    fn coarse_shape(&self) -> Option<(usize, usize)> {
        None
    }
    fn infer_batch(&self, coarse: &[FlowMap], _: &[ExternalRecord]) -> Result<Vec<FlowMap>> {
        Ok(coarse.iter().map(|c| mean_partition(c, self.0)).collect())
    }
}

impl Inferencer for HaModel {
    fn name(&self) -> String {
        "ha".into()
    }
    fn scale(&self) -> ScaleFactor {
        self.scale
    }
    fn coarse_shape(&self) -> Option<(usize, usize)> {
        let n = self.scale.get();
        let g = self.dist.grid();
        Some((g.height / n, g.width / n))
    }
    fn infer_batch(&self, coarse: &[FlowMap], _: &[ExternalRecord]) -> Result<Vec<FlowMap>> {
        coarse.iter().map(|c| self.infer(c)).collect()
    }
}

impl<T: Scalar> Inferencer for FlowModel<T> {
    fn name(&self) -> String {
        self.cfg.variant.as_str().into()
    }
    fn scale(&self) -> ScaleFactor {
        self.cfg.scale
    }
    fn coarse_shape(&self) -> Option<(usize, usize)> {
        Some((self.cfg.coarse_height, self.cfg.coarse_width))
    }
    fn infer_batch(&self, coarse: &[FlowMap], externals: &[ExternalRecord]) -> Result<Vec<FlowMap>> {
        self.infer(&Batch {
            coarse,
            externals: Some(externals),
        })
    }
}

/// Runs `inf` over `samples` in chunks of `batch`, returning predictions.
pub fn predict(inf: &dyn Inferencer, samples: &[Sample], batch: usize) -> Result<Vec<FlowMap>> {
    if samples.is_empty() {
        return Err(Error::domain("evaluate", "empty split"));
    }
    if let Some(shape) = inf.coarse_shape() {
        if samples[0].coarse.shape() != shape {
            return Err(Error::Config(format!(
                "{} expects {}x{} coarse maps but the data has {}x{}",
                inf.name(),
                shape.1,
                shape.0,
                samples[0].coarse.width(),
                samples[0].coarse.height()
            )));
        }
    }
    let n = inf.scale().get();
    if samples[0].fine.shape() != (samples[0].coarse.height() * n, samples[0].coarse.width() * n) {
        return Err(Error::Config(format!("{} upscales by {n}, which does not match the data", inf.name())));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let coarse: Vec<FlowMap> = chunk.iter().map(|s| s.coarse.clone()).collect();
        let ext: Vec<ExternalRecord> = chunk.iter().map(|s| s.external.clone()).collect();
        out.extend(inf.infer_batch(&coarse, &ext)?);
    }
    Ok(out)
}

/// Metrics plus structural residual of `inf` on `samples`.
pub fn evaluate(inf: &dyn Inferencer, samples: &[Sample], batch: usize) -> Result<MetricsReport> {
    let preds = predict(inf, samples, batch)?;
    report(&preds, samples, inf.scale())
}

pub(crate) fn report(preds: &[FlowMap], samples: &[Sample], scale: ScaleFactor) -> Result<MetricsReport> {
    let targets: Vec<FlowMap> = samples.iter().map(|s| s.fine.clone()).collect();
    let mut r = compute_metrics(preds, &targets)?;
    let mut worst: f64 = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        worst = worst.max(relative_structural_violation(&s.coarse, p, scale)?);
    }
    r.structural_residual = Some(worst);
    Ok(r)
}

/// Writes per-cell absolute errors in the flow-file format.
pub fn write_error_grids(path: &Path, preds: &[FlowMap], samples: &[Sample]) -> Result<()> {
    let grids = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            let (h, w) = p.shape();
            FlowMap::new(h, w, p.values().iter().zip(s.fine.values()).map(|(a, b)| (a - b).abs()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    write_flow_file(path, &grids)
}
