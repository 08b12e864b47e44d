//! Scaling, losses, the optimizer and the training loop.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{report, MetricsReport};
use crate::grid::{sum_pool, FlowMap, ScaleFactor};
use crate::model::{Batch, FlowModel, Variant};
use crate::nn::{Mode, ParamStore, Pass, Scalar, Tape, Tensor};

/// Blocks whose pre-normalization mass is below this are left out of the
/// structural monitor: with `eps = 1e-7` their sums are off by up to
/// `eps / mass`, which is a property of the stabilizer, not a defect.
pub const MONITOR_MASS_FLOOR: f64 = 0.1;

/// ChaCha streams of the training seed.
pub const SHUFFLE_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;

/// Divides by the scaler. Values above the scaler map above one; nothing
/// is clipped.
pub fn minmax_scale(map: &FlowMap, scaler: f64) -> Result<Vec<f64>> {
    check_scaler(scaler)?;
    Ok(map.values().iter().map(|v| v / scaler).collect())
}

pub fn minmax_descale(values: &[f64], height: usize, width: usize, scaler: f64) -> Result<FlowMap> {
    check_scaler(scaler)?;
    FlowMap::new(height, width, values.iter().map(|v| v * scaler).collect())
}

fn check_scaler(s: f64) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::domain("minmax", format!("scaler must be positive, got {s}")));
    }
    Ok(())
}

/// Mean over all entries of the squared difference.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(
            "mse_loss",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Mean over superregions of `|coarse − Σ block(pred)|`.
pub fn structural_loss(coarse: &[FlowMap], pred: &[FlowMap], scale: ScaleFactor) -> Result<f64> {
    if coarse.len() != pred.len() || coarse.is_empty() {
        return Err(Error::shape("structural_loss", "batch sizes differ"));
    }
    let n = scale.get();
    let (mut total, mut count) = (0.0, 0usize);
    for (c, p) in coarse.iter().zip(pred) {
        if p.shape() != (c.height() * n, c.width() * n) {
            return Err(Error::shape(
                "structural_loss",
                format!("prediction {:?} vs coarse {:?} at scale {n}", p.shape(), c.shape()),
            ));
        }
        let sums = sum_pool(p.values(), p.height(), p.width(), n);
        total += c.values().iter().zip(&sums).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += sums.len();
    }
    Ok(total / count as f64)
}

/// Staircase schedule `lr0 · 2^(−⌊epoch / halve_every⌋)`.
pub fn lr_at(lr0: f64, halve_every: usize, epoch: usize) -> f64 {
    let k = epoch / halve_every.max(1);
    // halving is exact in binary floating point
    (0..k).fold(lr0, |lr, _| lr * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected step using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.params().len() {
            return Err(Error::shape("adam", "optimizer state does not match the parameters"));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (g1, g2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.value.len() {
                return Err(Error::shape("adam", format!("state for {} has the wrong size", p.name)));
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + g1 * g;
                v[k] = b2 * v[k] + g2 * g * g;
                value[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub halve_every: usize,
    pub seed: u64,
    /// Weight of the structural loss (variant sl only).
    pub structural_weight: f64,
    pub adam: AdamConfig,
    /// Batch size for validation inference.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 16,
            epochs: 200,
            halve_every: 20,
            seed: 0,
            structural_weight: 1.0,
            adam: AdamConfig::default(),
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for batch-norm statistics, got {}",
                self.batch
            )));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be positive".into()));
        }
        if !(self.structural_weight >= 0.0 && self.structural_weight.is_finite()) {
            return Err(Error::Config("structural weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsReport,
    /// Worst relative sum-constraint violation over this epoch's training
    /// predictions (blocks with mass at least [`MONITOR_MASS_FLOOR`]).
    /// Zero for variant sl, which has no such guarantee.
    pub train_structural_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_rmse,val_mae,val_mape\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:e},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val.rmse,
                e.val.mae,
                e.val.mape_text()
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation RMSE, with the optimizer state
    /// they were saved with.
    pub best: FlowModel<f32>,
    pub best_adam: Adam<f32>,
    pub best_epoch: usize,
    pub last: FlowModel<f32>,
    pub last_adam: Adam<f32>,
    pub history: TrainHistory,
}

/// Splits `n` shuffled indices into batches of `size`, folding a trailing
/// singleton into the previous batch (batch norm needs two samples).
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn constant<T: Scalar>(shape: &[usize], values: impl Iterator<Item = f64>) -> Result<Tensor<T>> {
    let v: Vec<f64> = values.collect();
    Tensor::from_f64(shape, &v)
}

/// Trains for `cfg.epochs` epochs, validating after each. `on_epoch` sees
/// every record as it is produced.
pub fn train(
    model: FlowModel<f32>,
    train: &[Sample],
    valid: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::domain(
            "train",
            format!("training split has {} samples; at least 2 are needed", train.len()),
        ));
    }
    if valid.is_empty() {
        return Err(Error::domain("train", "validation split is empty"));
    }
    let mut model = model;
    let mcfg = model.cfg.clone();
    let n = mcfg.scale.get();
    let (fh, fw) = mcfg.fine_shape();
    let (ch, cw) = (mcfg.coarse_height, mcfg.coarse_width);
    let fs = mcfg.scalers.fine;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    // dropout gets its own stream so the batch order does not depend on
    // whether the model has dropout layers
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(DROPOUT_STREAM);
    let mut adam = Adam::new(&model.store, cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, FlowModel<f32>, Adam<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, cfg.halve_every, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut worst_residual: f64 = 0.0;
        for (step, idx) in batches(&order, cfg.batch).into_iter().enumerate() {
            let b = idx.len();
            let coarse: Vec<FlowMap> = idx.iter().map(|i| train[*i].coarse.clone()).collect();
            let externals: Vec<_> = idx.iter().map(|i| train[*i].external.clone()).collect();
            let batch = Batch {
                coarse: &coarse,
                externals: Some(&externals),
            };
            let mut tape = Tape::<f32>::new();
            let mut pass = Pass::new(Mode::Train, &mut drop_rng);
            let out = model.forward(&mut tape, &batch, &mut pass)?;
            let target = constant(
                &[b, 1, fh, fw],
                idx.iter().flat_map(|i| train[*i].fine.values().iter().map(|v| v / fs)),
            )?;
            let mut loss = tape.mse(out.pred_norm, &target)?;
            if mcfg.variant == Variant::StructuralLoss && cfg.structural_weight > 0.0 {
                let c = constant(&[b, 1, ch, cw], coarse.iter().flat_map(|m| m.values().iter().map(|v| v / fs)))?;
                let s = tape.structural_l1(out.pred_norm, &c, n)?;
                loss = tape.weighted_sum(loss, s, cfg.structural_weight as f32)?;
            }
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} step {step}: loss is {value}")));
            }
            if mcfg.variant.normalizes() {
                for (k, (c, f)) in coarse.iter().zip(&out.fine).enumerate() {
                    let sums = sum_pool(f.values(), fh, fw, n);
                    let mass = &out.block_mass[k * ch * cw..(k + 1) * ch * cw];
                    for ((cv, s), m) in c.values().iter().zip(&sums).zip(mass) {
                        if *m >= MONITOR_MASS_FLOOR {
                            worst_residual = worst_residual.max((cv - s).abs() / cv.max(1.0));
                        }
                    }
                }
            }
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&grads, &mut model.store);
            pass.apply_bn_updates(&mut model.store);
            adam.step(&mut model.store, lr)?;
            loss_sum += value * b as f64;
            seen += b;
        }
        let preds = crate::eval::predict(&model, valid, cfg.eval_batch)?;
        let val = report(&preds, valid, mcfg.scale)?;
        if !val.rmse.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation RMSE is {}", val.rmse)));
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val,
            train_structural_residual: worst_residual,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(r, ..)| record.val.rmse < *r) {
            best = Some((record.val.rmse, epoch, model.clone(), adam.clone()));
        }
        history.epochs.push(record);
    }
    let (best_model, best_adam, best_epoch) = match best {
        Some((_, e, m, a)) => (m, a, e),
        None => (model.clone(), adam.clone(), 0),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_adam,
        best_epoch,
        last: model,
        last_adam: adam,
        history,
    })
}
