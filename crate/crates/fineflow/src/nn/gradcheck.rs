//! Central finite-difference verification of analytic gradients.

use crate::error::Result;

use super::tape::{Tape, Var};
use super::{ParamStore, Tensor};

/// Default probe step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|a − n| / max(1e-8, |a| + |n|)`
    pub max_rel_error: f64,
    pub checked: usize,
    /// coordinates whose ±h probes straddle a ReLU kink
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Probe {
    value: f64,
    pattern: Vec<bool>,
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// coordinate of `inputs`, which are placed on the tape as leaves.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |pts: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = |pts: &[Tensor<f64>]| -> Result<Probe> {
        let (tape, _, out) = eval(pts)?;
        Ok(Probe {
            value: tape.value(out).data()[0],
            pattern: tape.relu_pattern(),
        })
    };
    let mut pts = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for (k, &orig) in t.data().iter().enumerate() {
            pts[ti].data_mut()[k] = orig + h;
            let plus = probe(&pts)?;
            pts[ti].data_mut()[k] = orig - h;
            let minus = probe(&pts)?;
            pts[ti].data_mut()[k] = orig;
            if plus.pattern != base_pattern || minus.pattern != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * h);
            let err = relative_error(analytic[ti][k], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every parameter in `store`. `f` builds
/// the scalar from the store's current values; it must be deterministic
/// (reseed any dropout RNG inside `f`).
pub fn grad_check_params<F>(f: F, store: &mut ParamStore<f64>, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    grad_check_params_where(f, store, h, |_| true)
}

/// [`grad_check_params`] restricted to the parameters whose name passes
/// `keep`.
pub fn grad_check_params_where<F, K>(mut f: F, store: &mut ParamStore<f64>, h: f64, keep: K) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
    K: Fn(&str) -> bool,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out)?;
    tape.accumulate_param_grads(&grads, store);
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let ids: Vec<_> = store.param_ids().filter(|id| keep(&store.param(*id).name)).collect();
    for id in ids {
        let n = store.param(id).value.len();
        for k in 0..n {
            let orig = store.param(id).value.data()[k];
            let analytic = store.param(id).grad.data()[k];
            let mut probe = |store: &mut ParamStore<f64>, v: f64| -> Result<(f64, Vec<bool>)> {
                store.param_mut(id).value.data_mut()[k] = v;
                let mut tape = Tape::new();
                let out = f(&mut tape, store)?;
                Ok((tape.value(out).data()[0], tape.relu_pattern()))
            };
            let (fp, pp) = probe(store, orig + h)?;
            let (fm, pm) = probe(store, orig - h)?;
            store.param_mut(id).value.data_mut()[k] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
