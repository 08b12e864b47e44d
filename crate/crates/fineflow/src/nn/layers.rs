use rand::{Rng, RngCore};

use crate::error::{Error, Result};

use super::tape::{BatchStats, BnMode, Tape, Var};
use super::{BufferId, Init, ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Same-size convolution (`pad = (k-1)/2`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Conv2d::with_bias(store, name, in_ch, out_ch, k, 0.0, rng)
    }

    pub fn with_bias<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {k} must be odd")));
        }
        let weight = store.init_param(
            format!("{name}.weight"),
            &[out_ch, in_ch, k, k],
            Init::FanInNormal {
                fan_in: in_ch * k * k,
                gain: 1.0,
            },
            rng,
        )?;
        let bias = store.init_param(format!("{name}.bias"), &[out_ch], Init::Const(bias), rng)?;
        Ok(Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
        })
    }

    /// A convolution over `in_ch` main channels followed by `extra_in`
    /// appended ones. The main weights are drawn from `rng` exactly as
    /// [`Conv2d::with_bias`] would draw them without the extras; the extra
    /// weights come from `extra_rng` at the same scale.
    #[allow(clippy::too_many_arguments)]
    pub fn with_extra_inputs<T: Scalar, R: Rng + ?Sized, E: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        extra_in: usize,
        out_ch: usize,
        k: usize,
        bias: f64,
        rng: &mut R,
        extra_rng: &mut E,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {k} must be odd")));
        }
        let kk = k * k;
        let init = Init::FanInNormal {
            fan_in: in_ch * kk,
            gain: 1.0,
        };
        let main = init.sample(out_ch * in_ch * kk, rng);
        let extra = init.sample(out_ch * extra_in * kk, extra_rng);
        let mut w = Vec::with_capacity(main.len() + extra.len());
        for o in 0..out_ch {
            w.extend_from_slice(&main[o * in_ch * kk..(o + 1) * in_ch * kk]);
            w.extend_from_slice(&extra[o * extra_in * kk..(o + 1) * extra_in * kk]);
        }
        let weight = store.add_param(format!("{name}.weight"), Tensor::from_f64(&[out_ch, in_ch + extra_in, k, k], &w)?)?;
        let bias = store.init_param(format!("{name}.bias"), &[out_ch], Init::Const(bias), rng)?;
        Ok(Conv2d {
            weight,
            bias,
            in_ch: in_ch + extra_in,
            out_ch,
            k,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, (self.k - 1) / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub cfg: BnConfig,
}

impl BatchNorm2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let gamma = store.init_param(format!("{name}.gamma"), &[channels], Init::Const(1.0), rng)?;
        let beta = store.init_param(format!("{name}.beta"), &[channels], Init::Const(0.0), rng)?;
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            cfg,
        })
    }

    /// Training mode normalizes with batch statistics and queues them for
    /// the running averages (see [`Pass::apply_bn_updates`]); evaluation
    /// mode uses the running averages.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let eps = T::lit(self.cfg.eps);
        match pass.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train { eps })?;
                pass.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.cfg.momentum,
                    stats: stats.expect("train mode returns statistics"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.buffer(self.running_mean).value.data();
                let var = store.buffer(self.running_var).value.data();
                let (y, _) = tape.batch_norm(x, g, b, BnMode::Eval { mean, var, eps })?;
                Ok(y)
            }
        }
    }
}

/// Pending running-statistics update from one training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    running_mean: BufferId,
    running_var: BufferId,
    momentum: f64,
    stats: BatchStats<T>,
}

/// Per-forward state: mode, the dropout RNG, and queued batch-norm updates.
pub struct Pass<'r, T> {
    pub mode: Mode,
    pub rng: &'r mut dyn RngCore,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'r, T: Scalar> Pass<'r, T> {
    pub fn new(mode: Mode, rng: &'r mut dyn RngCore) -> Self {
        Pass {
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }

    /// Folds queued batch statistics into the running averages:
    /// `running = (1 − m)·running + m·batch`.
    pub fn apply_bn_updates(self, store: &mut ParamStore<T>) {
        for u in self.bn_updates {
            let m = T::lit(u.momentum);
            let keep = T::one() - m;
            for (r, s) in store
                .buffer_mut(u.running_mean)
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.mean)
            {
                *r = keep * *r + m * *s;
            }
            for (r, s) in store
                .buffer_mut(u.running_var)
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var)
            {
                *r = keep * *r + m * *s;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_gain(store, name, d_in, d_out, 1.0, rng)
    }

    /// Weights drawn from `N(0, gain^2/d_in)`.
    pub fn with_gain<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init_param(
            format!("{name}.weight"),
            &[d_out, d_in],
            Init::FanInNormal { fan_in: d_in, gain },
            rng,
        )?;
        let bias = store.init_param(format!("{name}.bias"), &[d_out], Init::Const(0.0), rng)?;
        Ok(Dense {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, b)
    }
}

/// Lookup table for one categorical feature.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub feature: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        feature: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.init_param(format!("{name}.table"), &[vocab, dim], Init::Uniform(0.1), rng)?;
        Ok(Embedding {
            table,
            feature: feature.to_string(),
            vocab,
            dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        indices: &[usize],
    ) -> Result<Var> {
        if let Some(bad) = indices.iter().find(|i| **i >= self.vocab) {
            return Err(Error::domain(
                "embedding",
                format!("{} index {bad} outside vocabulary of {}", self.feature, self.vocab),
            ));
        }
        let t = tape.param(store, self.table);
        tape.embedding(t, indices)
    }
}

/// Conv (`C → r²C`) + batch norm + depth-to-space ×r + ReLU.
#[derive(Debug, Clone)]
pub struct SubPixelBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub factor: usize,
}

impl SubPixelBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        factor: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let out = channels * factor * factor;
        Ok(SubPixelBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, out, 3, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out, bn, rng)?,
            factor,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        let h = self.bn.forward(tape, store, h, pass)?;
        let h = tape.pixel_shuffle(h, self.factor)?;
        Ok(tape.relu(h))
    }
}
