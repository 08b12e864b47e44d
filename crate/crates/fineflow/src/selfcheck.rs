//! Finite-difference verification of every tape operation and of a tiny
//! end-to-end model, at random double-precision points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::external::{ExternalConfig, ExternalRecord, ExternalSchema};
use crate::grid::{FlowMap, ScaleFactor};
use crate::model::{Batch, FlowModel, ModelConfig, Variant};
use crate::nn::gradcheck::DEFAULT_STEP;
use crate::nn::tape::BnMode;
use crate::nn::{grad_check, grad_check_params, GradCheckReport, Mode, Pass, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("matching length")
}

fn op_check<F>(rng: &mut ChaCha8Rng, shapes: &[&[usize]], range: (f64, f64), mut op: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(rng, s, range.0, range.1)).collect();
    let proj_seed: u64 = rng.random();
    grad_check(
        |tape, v| {
            let y = op(tape, v)?;
            let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
            let w: Vec<f64> = (0..tape.value(y).len()).map(|_| prng.random_range(-1.0..1.0)).collect();
            tape.dot(y, &w)
        },
        &inputs,
        DEFAULT_STEP,
    )
}

fn tiny_model(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let ext = (variant == Variant::Full).then(|| ExternalConfig::new(ExternalSchema::taxi()));
    let cfg = ModelConfig::new(1, 4, ScaleFactor::new(2)?, (4, 4), variant, ext);
    let mut model = FlowModel::<f64>::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let coarse: Vec<FlowMap> = (0..2)
        .map(|_| FlowMap::new(4, 4, (0..16).map(|_| rng.random_range(0.0..2000.0)).collect()))
        .collect::<Result<_>>()?;
    let records: Vec<ExternalRecord> = (0..2)
        .map(|_| ExternalRecord {
            temperature: rng.random_range(-10.0..35.0),
            wind_speed: rng.random_range(0.0..20.0),
            weather: rng.random_range(0..16),
            holiday: rng.random(),
            weekend: rng.random(),
            day_of_week: rng.random_range(0..7),
            hour_of_day: rng.random_range(0..24),
            ticket_price: None,
        })
        .collect();
    let externals = model.cfg.external.is_some().then_some(&records[..]);
    let pred = model.infer(&Batch { coarse: &coarse, externals })?;
    // target close to the prediction keeps finite-difference round-off small
    let target: Vec<f64> = pred
        .iter()
        .flat_map(|m| m.values().iter().map(|v| v / model.cfg.scalers.fine))
        .map(|v| v + rng.random_range(-0.1..0.1))
        .collect();
    let target = Tensor::from_f64(&[2, 1, 8, 8], &target)?;
    let mut store = std::mem::take(&mut model.store);
    grad_check_params(
        |tape, store| {
            model.store = store.clone();
            let mut no_dropout = ChaCha8Rng::seed_from_u64(0);
            let mut pass = Pass::new(Mode::Eval, &mut no_dropout);
            let out = model.forward(tape, &Batch { coarse: &coarse, externals }, &mut pass)?;
            tape.mse(out.pred_norm, &target)
        },
        &mut store,
        DEFAULT_STEP,
    )
}

/// Runs every check once at a point drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let unit = (-1.0, 1.0);
    let mut out = Vec::new();
    let mut push = |name, report| out.push(CheckResult { name, report });

    push("conv2d 3x3", op_check(r, &[&[2, 3, 4, 4], &[2, 3, 3, 3], &[2]], unit, |t, v| t.conv2d(v[0], v[1], v[2], 1))?);
    push("conv2d 3x3 wide", op_check(r, &[&[1, 9, 3, 3], &[6, 9, 3, 3], &[6]], unit, |t, v| t.conv2d(v[0], v[1], v[2], 1))?);
    push("conv2d 9x9", op_check(r, &[&[1, 2, 5, 5], &[1, 2, 9, 9], &[1]], unit, |t, v| t.conv2d(v[0], v[1], v[2], 4))?);
    push(
        "batch_norm train",
        op_check(r, &[&[3, 2, 2, 2], &[2], &[2]], unit, |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?.0)
        })?,
    );
    push(
        "batch_norm eval",
        op_check(r, &[&[2, 2, 2, 2], &[2], &[2]], unit, |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &[0.3, -0.2], var: &[1.2, 0.8], eps: 1e-5 })?.0)
        })?,
    );
    push("pixel_shuffle", op_check(r, &[&[2, 8, 2, 1]], unit, |t, v| t.pixel_shuffle(v[0], 2))?);
    push("dense", op_check(r, &[&[3, 5], &[4, 5], &[4]], unit, |t, v| t.dense(v[0], v[1], v[2]))?);
    push("embedding", op_check(r, &[&[5, 3]], unit, |t, v| t.embedding(v[0], &[4, 0, 4]))?);
    push(
        "dropout",
        op_check(r, &[&[4, 6]], unit, |t, v| {
            let mut d = ChaCha8Rng::seed_from_u64(1);
            t.dropout(v[0], 0.3, Some(&mut d))
        })?,
    );
    push("relu", op_check(r, &[&[20]], unit, |t, v| Ok(t.relu(v[0])))?);
    push("add", op_check(r, &[&[2, 3], &[2, 3]], unit, |t, v| t.add(v[0], v[1]))?);
    push("concat_channels", op_check(r, &[&[2, 1, 2, 2], &[2, 2, 2, 2]], unit, |t, v| t.concat_channels(v[0], v[1]))?);
    push("concat_features", op_check(r, &[&[2, 2], &[2, 3]], unit, |t, v| t.concat_features(v))?);
    push("reshape", op_check(r, &[&[2, 4]], unit, |t, v| t.reshape(v[0], &[2, 1, 2, 2]))?);
    push("n2_normalize", op_check(r, &[&[2, 1, 4, 4]], (0.1, 2.0), |t, v| t.n2_normalize(v[0], 2, 1e-7))?);
    let factor = rand_tensor(r, &[2, 3], -2.0, 2.0);
    push("mul_const", op_check(r, &[&[2, 3]], unit, |t, v| t.mul_const(v[0], &factor))?);
    let target = rand_tensor(r, &[2, 1, 2, 2], -1.0, 1.0);
    push("mse", op_check(r, &[&[2, 1, 2, 2]], unit, |t, v| t.mse(v[0], &target))?);
    let coarse = rand_tensor(r, &[2, 1, 1, 2], 5.0, 9.0);
    push("structural_l1", op_check(r, &[&[2, 1, 2, 4]], (0.0, 1.0), |t, v| t.structural_l1(v[0], &coarse, 2))?);
    push("weighted_sum", op_check(r, &[&[3], &[3]], unit, |t, v| t.weighted_sum(v[0], v[1], 0.7))?);
    let model_seed: u64 = r.random();
    push("model ne", tiny_model(Variant::NoExternal, model_seed)?);
    push("model full", tiny_model(Variant::Full, model_seed)?);
    push("model sl", tiny_model(Variant::StructuralLoss, model_seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(5).unwrap();
        assert_eq!(results.len(), 22);
        for c in &results {
            assert!(c.passes(), "{}: {:?}", c.name, c.report);
        }
    }
}
