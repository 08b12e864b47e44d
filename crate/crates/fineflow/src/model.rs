//! The inference network and its variants.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external::{ExternalConfig, ExternalRecord, ExternalSubnet};
use crate::grid::{upsample_nearest, FlowMap, ScaleFactor, DEFAULT_EPS};
use crate::nn::{BatchNorm2d, BnConfig, Conv2d, Mode, ParamStore, Pass, Scalar, SubPixelBlock, Tape, Tensor, Var};

/// Initial bias of the output convolution. A positive start keeps the
/// pre-normalization map away from the all-zero ReLU region.
pub const OUTPUT_BIAS_INIT: f64 = 1.0;

/// ChaCha stream for initial weights of the external-factor pathway.
pub const EXTERNAL_INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Distributional upsampling with external fusion.
    Full,
    /// Distributional upsampling without external factors.
    #[serde(rename = "ne")]
    NoExternal,
    /// Direct regression regularized by a structural loss.
    #[serde(rename = "sl")]
    StructuralLoss,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoExternal => "ne",
            Variant::StructuralLoss => "sl",
        }
    }

    pub fn normalizes(self) -> bool {
        !matches!(self, Variant::StructuralLoss)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "ne" => Ok(Variant::NoExternal),
            "sl" => Ok(Variant::StructuralLoss),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected full, ne or sl)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Divisors mapping flows into the network's working range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub coarse: f64,
    pub fine: f64,
}

impl Default for Scalers {
    fn default() -> Self {
        Scalers {
            coarse: 1500.0,
            fine: 100.0,
        }
    }
}

impl Scalers {
    pub fn validate(&self) -> Result<()> {
        if !(self.coarse > 0.0 && self.fine > 0.0 && self.coarse.is_finite() && self.fine.is_finite()) {
            return Err(Error::Config(format!(
                "scalers must be positive, got coarse {} fine {}",
                self.coarse, self.fine
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub residual_blocks: usize,
    pub filters: usize,
    pub scale: ScaleFactor,
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub variant: Variant,
    pub out_channels: usize,
    pub eps: f64,
    pub external: Option<ExternalConfig>,
    pub bn: BnConfig,
    pub scalers: Scalers,
}

impl ModelConfig {
    /// Config with default epsilon, batch norm and scalers.
    pub fn new(
        residual_blocks: usize,
        filters: usize,
        scale: ScaleFactor,
        coarse: (usize, usize),
        variant: Variant,
        external: Option<ExternalConfig>,
    ) -> Self {
        ModelConfig {
            residual_blocks,
            filters,
            scale,
            coarse_height: coarse.0,
            coarse_width: coarse.1,
            variant,
            out_channels: 1,
            eps: DEFAULT_EPS,
            external,
            bn: BnConfig::default(),
            scalers: Scalers::default(),
        }
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        let n = self.scale.get();
        (self.coarse_height * n, self.coarse_width * n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.coarse_height == 0 || self.coarse_width == 0 {
            return Err(Error::Config("filters and grid dimensions must be positive".into()));
        }
        if self.out_channels != 1 {
            return Err(Error::Config(format!(
                "only single-channel output is supported, got {}",
                self.out_channels
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        match (self.variant, &self.external) {
            (Variant::Full, None) => Err(Error::Config("variant full requires an external config".into())),
            (Variant::NoExternal, Some(_)) => Err(Error::Config("variant ne forbids an external config".into())),
            _ => Ok(()),
        }?;
        self.scalers.validate()
    }
}

/// One residual block: conv-BN-ReLU-conv-BN plus identity.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn1.forward(tape, store, h, pass)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h, pass)?;
        tape.add(x, h)
    }
}

/// A batch of inputs: coarse maps and, for models with external fusion,
/// one record per map.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub coarse: &'a [FlowMap],
    pub externals: Option<&'a [ExternalRecord]>,
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Distribution map `(B, 1, NI, NJ)`; absent for variant sl.
    pub dist: Option<Var>,
    /// Prediction in normalized fine units (`fine / fine_scaler`).
    pub pred_norm: Var,
    /// Pre-normalization block masses, `(B, I, J)` flattened.
    pub block_mass: Vec<f64>,
    /// Fine-grained inference in physical units.
    pub fine: Vec<FlowMap>,
}

#[derive(Debug, Clone)]
pub struct FlowModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    input_conv: Conv2d,
    blocks: Vec<ResBlock>,
    post_conv: Conv2d,
    post_bn: BatchNorm2d,
    upsample: Vec<SubPixelBlock>,
    output_conv: Conv2d,
    external: Option<ExternalSubnet>,
}

impl<T: Scalar> FlowModel<T> {
    /// Builds the layer stack with weights drawn from `seed`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self::build_into(cfg, &mut store, &mut rng)?;
        Ok(FlowModel { store, ..model })
    }

    /// Rebuilds the layer structure around an existing parameter store,
    /// e.g. one loaded from a checkpoint.
    pub fn with_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut fresh = ParamStore::new();
        let model = Self::build_into(cfg, &mut fresh, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(&str, &[usize])> =
            fresh.params().iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
        let got: Vec<(&str, &[usize])> = store.params().iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
        if expected != got {
            return Err(Error::Checkpoint("parameter names or shapes do not match the config".into()));
        }
        let eb: Vec<(&str, &[usize])> = fresh.buffers().iter().map(|b| (b.name.as_str(), b.value.shape())).collect();
        let gb: Vec<(&str, &[usize])> = store.buffers().iter().map(|b| (b.name.as_str(), b.value.shape())).collect();
        if eb != gb {
            return Err(Error::Checkpoint("buffer names or shapes do not match the config".into()));
        }
        Ok(FlowModel { store, ..model })
    }

    fn build_into(cfg: ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.filters;
        let bn = cfg.bn;
        // Everything tied to external factors draws from its own stream, so
        // a full model shares every other initial weight with the ne model
        // of the same seed.
        let mut ext_rng = rng.clone();
        ext_rng.set_stream(EXTERNAL_INIT_STREAM);
        let external = cfg
            .external
            .as_ref()
            .map(|e| {
                ExternalSubnet::build(
                    store,
                    e,
                    (cfg.coarse_height, cfg.coarse_width),
                    cfg.scale,
                    bn,
                    &mut ext_rng,
                )
            })
            .transpose()?;
        let extra = usize::from(external.is_some());
        let input_conv = Conv2d::with_extra_inputs(store, "input.conv", 1, extra, f, 9, 0.0, rng, &mut ext_rng)?;
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                Ok(ResBlock {
                    conv1: Conv2d::new(store, &format!("resblock.{i}.conv1"), f, f, 3, rng)?,
                    bn1: BatchNorm2d::new(store, &format!("resblock.{i}.bn1"), f, bn, rng)?,
                    conv2: Conv2d::new(store, &format!("resblock.{i}.conv2"), f, f, 3, rng)?,
                    bn2: BatchNorm2d::new(store, &format!("resblock.{i}.bn2"), f, bn, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let post_conv = Conv2d::new(store, "post.conv", f, f, 3, rng)?;
        let post_bn = BatchNorm2d::new(store, "post.bn", f, bn, rng)?;
        let upsample = cfg
            .scale
            .prime_factors()
            .into_iter()
            .enumerate()
            .map(|(i, r)| SubPixelBlock::new(store, &format!("upsample.{i}"), f, r, bn, rng))
            .collect::<Result<Vec<_>>>()?;
        let output_conv = Conv2d::with_extra_inputs(
            store,
            "output.conv",
            f,
            extra,
            cfg.out_channels,
            9,
            OUTPUT_BIAS_INIT,
            rng,
            &mut ext_rng,
        )?;
        Ok(FlowModel {
            cfg,
            store: ParamStore::new(),
            input_conv,
            blocks,
            post_conv,
            post_bn,
            upsample,
            output_conv,
            external,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Number of sub-pixel blocks in the main upsampling chain.
    pub fn upsample_blocks(&self) -> usize {
        self.upsample.len()
    }

    fn check_batch(&self, batch: &Batch<'_>) -> Result<()> {
        let b = batch.coarse.len();
        if b == 0 {
            return Err(Error::shape("model", "empty batch"));
        }
        for (k, c) in batch.coarse.iter().enumerate() {
            if c.shape() != (self.cfg.coarse_height, self.cfg.coarse_width) {
                return Err(Error::shape(
                    "model",
                    format!(
                        "coarse map {k} is {}x{}, model expects {}x{}",
                        c.height(),
                        c.width(),
                        self.cfg.coarse_height,
                        self.cfg.coarse_width
                    ),
                ));
            }
        }
        match (&self.external, batch.externals) {
            (Some(_), None) => Err(Error::Config("model fuses external factors but none were given".into())),
            (Some(_), Some(e)) if e.len() != b => Err(Error::shape(
                "model",
                format!("{} external records for {b} coarse maps", e.len()),
            )),
            _ => Ok(()),
        }
    }

    /// Runs the network on `batch`, recording on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<'_>, pass: &mut Pass<'_, T>) -> Result<Forward> {
        self.check_batch(batch)?;
        let cfg = &self.cfg;
        let store = &self.store;
        let (b, i, j) = (batch.coarse.len(), cfg.coarse_height, cfg.coarse_width);
        let n = cfg.scale.get();
        let coarse_norm: Vec<f64> = batch
            .coarse
            .iter()
            .flat_map(|c| c.values().iter().map(|v| v / cfg.scalers.coarse))
            .collect();
        let mut x = tape.constant(Tensor::from_f64(&[b, 1, i, j], &coarse_norm)?);

        let mut fine_ext = None;
        if let (Some(ext), Some(records)) = (&self.external, batch.externals) {
            let e = ext.encode(tape, store, records)?;
            let (hc, hf) = ext.forward(tape, store, e, pass)?;
            x = tape.concat_channels(x, hc)?;
            fine_ext = Some(hf);
        }

        let low = self.input_conv.forward(tape, store, x)?;
        let low = tape.relu(low);
        let mut h = low;
        for block in &self.blocks {
            h = block.forward(tape, store, h, pass)?;
        }
        let h = self.post_conv.forward(tape, store, h)?;
        let h = self.post_bn.forward(tape, store, h, pass)?;
        let mut h = tape.add(h, low)?;
        for block in &self.upsample {
            h = block.forward(tape, store, h, pass)?;
        }
        if let Some(hf) = fine_ext {
            h = tape.concat_channels(h, hf)?;
        }
        let o = self.output_conv.forward(tape, store, h)?;
        let raw = tape.relu(o);

        let (fh, fw) = cfg.fine_shape();
        let raw_vals = tape.value(raw).to_f64();
        let block_mass: Vec<f64> = raw_vals
            .chunks(fh * fw)
            .flat_map(|m| crate::grid::sum_pool(m, fh, fw, n))
            .collect();

        if !cfg.variant.normalizes() {
            let fine = raw_vals
                .chunks(fh * fw)
                .map(|m| FlowMap::new(fh, fw, m.iter().map(|v| v * cfg.scalers.fine).collect()))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Forward {
                dist: None,
                pred_norm: raw,
                block_mass,
                fine,
            });
        }

        let dist = tape.n2_normalize(raw, n, T::lit(cfg.eps))?;
        let up: Vec<f64> = batch
            .coarse
            .iter()
            .flat_map(|c| upsample_nearest(c.values(), i, j, n))
            .collect();
        let factor: Vec<f64> = up.iter().map(|v| v / cfg.scalers.fine).collect();
        let pred_norm = tape.mul_const(dist, &Tensor::from_f64(&[b, 1, fh, fw], &factor)?)?;
        let dist_vals = tape.value(dist).to_f64();
        let fine = dist_vals
            .chunks(fh * fw)
            .zip(up.chunks(fh * fw))
            .map(|(d, u)| FlowMap::new(fh, fw, d.iter().zip(u).map(|(a, c)| a * c).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward {
            dist: Some(dist),
            pred_norm,
            block_mass,
            fine,
        })
    }

    /// Evaluation-mode inference on a batch.
    pub fn infer(&self, batch: &Batch<'_>) -> Result<Vec<FlowMap>> {
        let mut rng = NoRng;
        let mut pass = Pass::new(Mode::Eval, &mut rng);
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, batch, &mut pass)?.fine)
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        FlowModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            input_conv: self.input_conv.clone(),
            blocks: self.blocks.clone(),
            post_conv: self.post_conv.clone(),
            post_bn: self.post_bn.clone(),
            upsample: self.upsample.clone(),
            output_conv: self.output_conv.clone(),
            external: self.external.clone(),
        }
    }
}

/// Evaluation mode never draws random numbers.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode is deterministic")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode is deterministic")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode is deterministic")
    }
}

/// Closed-form trainable parameter count, independent of layer construction.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let f = cfg.filters;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let bn = |c: usize| 2 * c;
    let factors = cfg.scale.prime_factors();
    let extra = usize::from(cfg.external.is_some());
    let mut total = conv(1 + extra, f, 9);
    total += cfg.residual_blocks * 2 * (conv(f, f, 3) + bn(f));
    total += conv(f, f, 3) + bn(f);
    total += factors.iter().map(|r| conv(f, r * r * f, 3) + bn(r * r * f)).sum::<usize>();
    total += conv(f + extra, cfg.out_channels, 9);
    if let Some(e) = &cfg.external {
        let w = e.widths;
        total += e.schema.weather_classes * w.weather + 2 * w.holiday + 2 * w.weekend + 7 * w.day_of_week + 24 * w.hour_of_day;
        total += e.feature_len() * e.hidden + e.hidden;
        let cells = cfg.coarse_height * cfg.coarse_width;
        total += e.hidden * cells + cells;
        total += factors.iter().map(|r| conv(1, r * r, 3) + bn(r * r)).sum::<usize>();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::external::ExternalSchema;
    use crate::grid::{coarsen, relative_structural_violation};
    use rand::Rng;

    fn cfg(variant: Variant, n: usize, m: usize, f: usize, ij: usize) -> ModelConfig {
        let ext = (variant == Variant::Full).then(|| ExternalConfig::new(ExternalSchema::taxi()));
        ModelConfig::new(m, f, ScaleFactor::new(n).unwrap(), (ij, ij), variant, ext)
    }

    fn random_coarse(rng: &mut ChaCha8Rng, b: usize, ij: usize) -> Vec<FlowMap> {
        (0..b)
            .map(|_| FlowMap::new(ij, ij, (0..ij * ij).map(|_| rng.random_range(0.0..2000.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn upsampling_chain_follows_prime_factors() {
        for (n, blocks) in [(2, 1), (4, 2), (6, 2), (8, 3), (9, 2)] {
            let m = FlowModel::<f32>::build(cfg(Variant::NoExternal, n, 1, 4, 2), 0).unwrap();
            assert_eq!(m.upsample_blocks(), blocks, "N={n}");
        }
        let m = FlowModel::<f32>::build(cfg(Variant::NoExternal, 6, 1, 4, 2), 0).unwrap();
        let names: Vec<_> = m.store.names().filter(|s| s.starts_with("upsample")).collect();
        assert!(names.contains(&"upsample.0.conv.weight"));
        assert_eq!(m.store.param(m.store.find("upsample.0.conv.weight").unwrap()).value.shape(), &[16, 4, 3, 3]);
        assert_eq!(m.store.param(m.store.find("upsample.1.conv.weight").unwrap()).value.shape(), &[36, 4, 3, 3]);
    }

    #[test]
    fn variant_requirements() {
        let mut c = cfg(Variant::Full, 2, 1, 4, 2);
        c.external = None;
        assert!(FlowModel::<f32>::build(c, 0).is_err());
        let mut c = cfg(Variant::NoExternal, 2, 1, 4, 2);
        c.external = Some(ExternalConfig::new(ExternalSchema::taxi()));
        assert!(FlowModel::<f32>::build(c, 0).is_err());
        let mut c = cfg(Variant::StructuralLoss, 2, 1, 4, 2);
        c.external = Some(ExternalConfig::new(ExternalSchema::taxi()));
        assert!(FlowModel::<f32>::build(c, 0).is_ok());
    }

    #[test]
    fn build_is_deterministic() {
        let a = FlowModel::<f32>::build(cfg(Variant::Full, 2, 2, 8, 4), 11).unwrap();
        let b = FlowModel::<f32>::build(cfg(Variant::Full, 2, 2, 8, 4), 11).unwrap();
        for (p, q) in a.store.params().iter().zip(b.store.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn full_and_ne_differ_by_external_names_only() {
        let full = FlowModel::<f32>::build(cfg(Variant::Full, 2, 2, 8, 4), 0).unwrap();
        let ne = FlowModel::<f32>::build(cfg(Variant::NoExternal, 2, 2, 8, 4), 0).unwrap();
        let fset: std::collections::BTreeSet<_> = full.store.names().collect();
        let nset: std::collections::BTreeSet<_> = ne.store.names().collect();
        let diff: Vec<_> = fset.symmetric_difference(&nset).collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|s| s.starts_with("ext.")), "{diff:?}");
    }

    #[test]
    fn full_model_extends_the_ne_initialization() {
        let full = FlowModel::<f64>::build(cfg(Variant::Full, 2, 2, 8, 4), 5).unwrap();
        let ne = FlowModel::<f64>::build(cfg(Variant::NoExternal, 2, 2, 8, 4), 5).unwrap();
        let by_name = |m: &FlowModel<f64>, name: &str| {
            m.store.params().iter().find(|p| p.name == name).unwrap().value.clone()
        };
        for p in ne.store.params() {
            let a = p.value.to_f64();
            let b = by_name(&full, &p.name);
            if b.shape() == p.value.shape() {
                assert_eq!(a, b.to_f64(), "{}", p.name);
                continue;
            }
            // conv weights with one appended input channel
            let &[out, cin, k, _] = p.value.shape() else { panic!("{}", p.name) };
            let b = b.to_f64();
            for o in 0..out {
                let kk = k * k;
                assert_eq!(
                    a[o * cin * kk..(o + 1) * cin * kk],
                    b[o * (cin + 1) * kk..o * (cin + 1) * kk + cin * kk],
                    "{}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for c in [
            cfg(Variant::Full, 4, 3, 8, 4),
            cfg(Variant::NoExternal, 6, 2, 5, 3),
            cfg(Variant::StructuralLoss, 2, 0, 4, 2),
            cfg(Variant::Full, 9, 1, 3, 2),
        ] {
            let m = FlowModel::<f32>::build(c.clone(), 0).unwrap();
            assert_eq!(m.param_count(), expected_param_count(&c));
        }
    }

    #[test]
    fn forward_shapes_and_structure() {
        let m = FlowModel::<f64>::build(cfg(Variant::NoExternal, 2, 1, 4, 8), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coarse = random_coarse(&mut rng, 1, 8);
        let mut pass = Pass::new(Mode::Eval, &mut rng);
        let mut tape = Tape::new();
        let out = m
            .forward(&mut tape, &Batch { coarse: &coarse, externals: None }, &mut pass)
            .unwrap();
        assert_eq!(tape.value(out.dist.unwrap()).shape(), &[1, 1, 16, 16]);
        assert_eq!(out.fine[0].shape(), (16, 16));
        assert!(out.fine[0].values().iter().all(|v| *v >= 0.0));
        let back = coarsen(&out.fine[0], m.cfg.scale).unwrap();
        for ((c, s), mass) in coarse[0].values().iter().zip(back.values()).zip(&out.block_mass) {
            if *mass >= 1e-2 {
                assert!((c - s).abs() / c.max(1.0) <= 1e-5);
            }
        }
        assert!(relative_structural_violation(&coarse[0], &out.fine[0], m.cfg.scale).unwrap() <= 1e-5);
    }

    #[test]
    fn full_model_requires_externals() {
        let m = FlowModel::<f32>::build(cfg(Variant::Full, 2, 1, 4, 2), 1).unwrap();
        let coarse = vec![FlowMap::zeros(2, 2)];
        let err = m.infer(&Batch { coarse: &coarse, externals: None }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sl_variant_returns_scaled_relu_output() {
        let m = FlowModel::<f64>::build(cfg(Variant::StructuralLoss, 2, 1, 4, 4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coarse = random_coarse(&mut rng, 2, 4);
        let mut pass = Pass::new(Mode::Train, &mut rng);
        let mut tape = Tape::new();
        let out = m
            .forward(&mut tape, &Batch { coarse: &coarse, externals: None }, &mut pass)
            .unwrap();
        assert!(out.dist.is_none());
        let raw = tape.value(out.pred_norm).data();
        for (k, v) in out.fine.iter().flat_map(|f| f.values().iter()).enumerate() {
            assert!((v - raw[k] * 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_is_batch_invariant_and_repeatable() {
        let m = FlowModel::<f32>::build(cfg(Variant::Full, 2, 1, 8, 4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarse = random_coarse(&mut rng, 3, 4);
        let ext: Vec<_> = (0..3)
            .map(|h| ExternalRecord {
                temperature: 10.0,
                wind_speed: 2.0,
                weather: 1,
                holiday: false,
                weekend: false,
                day_of_week: 2,
                hour_of_day: h,
                ticket_price: None,
            })
            .collect();
        let all = m.infer(&Batch { coarse: &coarse, externals: Some(&ext) }).unwrap();
        let again = m.infer(&Batch { coarse: &coarse, externals: Some(&ext) }).unwrap();
        assert_eq!(all, again);
        for k in 0..3 {
            let one = m
                .infer(&Batch {
                    coarse: &coarse[k..k + 1],
                    externals: Some(&ext[k..k + 1]),
                })
                .unwrap();
            for (a, b) in one[0].values().iter().zip(all[k].values()) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }

    /// Biases of convolutions feeding a batch norm: in training mode the
    /// normalization removes any constant shift, so their gradient is zero.
    fn feeds_batch_norm(name: &str) -> bool {
        name.ends_with(".bias")
            && (name.starts_with("resblock.")
                || name.starts_with("post.conv")
                || (name.starts_with("upsample.") && name.contains(".conv.")))
    }

    fn tiny_grad_check(variant: Variant, mode: Mode) -> crate::nn::GradCheckReport {
        let mut model = FlowModel::<f64>::build(cfg(variant, 2, 1, 4, 4), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let coarse = random_coarse(&mut rng, 2, 4);
        let ext: Vec<_> = (0..2)
            .map(|k| ExternalRecord {
                temperature: 5.0 + k as f64,
                wind_speed: 3.0,
                weather: k,
                holiday: k == 1,
                weekend: false,
                day_of_week: 4,
                hour_of_day: 7 + k,
                ticket_price: None,
            })
            .collect();
        let externals = (variant == Variant::Full).then_some(&ext[..]);
        // a target near the prediction keeps the loss, and with it the
        // finite-difference round-off, small
        let mut probe_rng = ChaCha8Rng::seed_from_u64(23);
        let mut pass = Pass::new(mode, &mut probe_rng);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &Batch { coarse: &coarse, externals }, &mut pass).unwrap();
        let target: Vec<f64> = tape
            .value(out.pred_norm)
            .data()
            .iter()
            .map(|p| p + rng.random_range(-0.1..0.1))
            .collect();
        let target = Tensor::from_f64(&[2, 1, 8, 8], &target).unwrap();
        let mut store = std::mem::take(&mut model.store);
        let loss = |tape: &mut Tape<f64>, store: &mut ParamStore<f64>| {
            model.store = store.clone();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(23);
            let mut pass = Pass::new(mode, &mut drop_rng);
            let out = model.forward(tape, &Batch { coarse: &coarse, externals }, &mut pass)?;
            tape.mse(out.pred_norm, &target)
        };
        let step = crate::nn::gradcheck::DEFAULT_STEP;
        match mode {
            Mode::Eval => crate::nn::grad_check_params(loss, &mut store, step).unwrap(),
            Mode::Train => {
                let r = crate::nn::gradcheck::grad_check_params_where(loss, &mut store, step, |n| !feeds_batch_norm(n))
                    .unwrap();
                let mut tape = Tape::new();
                let mut drop_rng = ChaCha8Rng::seed_from_u64(23);
                let mut pass = Pass::new(mode, &mut drop_rng);
                model.store = store.clone();
                let out = model.forward(&mut tape, &Batch { coarse: &coarse, externals }, &mut pass).unwrap();
                let l = tape.mse(out.pred_norm, &target).unwrap();
                let grads = tape.backward(l).unwrap();
                tape.accumulate_param_grads(&grads, &mut store);
                let shifted: Vec<_> = store.params().iter().filter(|p| feeds_batch_norm(&p.name)).collect();
                assert!(!shifted.is_empty());
                for p in shifted {
                    assert!(p.grad.data().iter().all(|g| g.abs() <= 1e-12), "{}", p.name);
                }
                r
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for (variant, mode) in [
            (Variant::NoExternal, Mode::Eval),
            (Variant::NoExternal, Mode::Train),
            (Variant::Full, Mode::Eval),
            (Variant::Full, Mode::Train),
            (Variant::StructuralLoss, Mode::Train),
        ] {
            let r = tiny_grad_check(variant, mode);
            assert!(r.passes(1e-4), "{variant} {mode:?}: {r:?}");
            assert!(r.checked > 10 * r.skipped_kinks, "{r:?}");
        }
    }
}
