//! Samples, dataset manifests, on-disk formats, splitting and a synthetic
//! generator.

mod io;
mod split;
pub mod synth;

pub use io::{format_value, parse_geometry, read_dataset, read_flow_file, write_dataset, write_flow_file, MANIFEST_FILE};
pub use split::{split_filter, Splits};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external::{ExternalRecord, ExternalSchema};
use crate::grid::{coarsen, FlowMap, ScaleFactor};
use crate::model::Scalers;

/// One observation: the aggregate map, its fine counterpart and the
/// external factors at that time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub timestamp: i64,
    pub coarse: FlowMap,
    pub fine: FlowMap,
    pub external: ExternalRecord,
}

/// Chronological split proportions, normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios([f64; 3]);

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let parts = [train, valid, test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::domain("split", format!("ratios must be positive, got {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        Ok(SplitRatios(parts.map(|p| p / total)))
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = Error;
    /// Accepts `a:b:c`, e.g. `2:1:1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split ratios {s:?} must look like 2:1:1")))?;
        match parts[..] {
            [a, b, c] => SplitRatios::new(a, b, c),
            _ => Err(Error::Config(format!("split ratios {s:?} must have three parts"))),
        }
    }
}

impl std::fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Everything needed to interpret a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub scale: ScaleFactor,
    pub interval_minutes: u32,
    pub scalers: Scalers,
    pub schema: ExternalSchema,
    pub ratios: SplitRatios,
    pub zero_threshold: f64,
    pub coarse_file: String,
    pub fine_file: String,
    pub external_file: String,
}

impl DatasetManifest {
    pub fn new(name: &str, coarse: (usize, usize), scale: ScaleFactor, schema: ExternalSchema) -> Self {
        DatasetManifest {
            name: name.to_string(),
            coarse_height: coarse.0,
            coarse_width: coarse.1,
            scale,
            interval_minutes: 60,
            scalers: Scalers::default(),
            schema,
            ratios: SplitRatios([0.5, 0.25, 0.25]),
            zero_threshold: 0.9,
            coarse_file: "coarse.txt".into(),
            fine_file: "fine.txt".into(),
            external_file: "external.csv".into(),
        }
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        let n = self.scale.get();
        (self.coarse_height * n, self.coarse_width * n)
    }

    /// Checks every sample invariant; errors name the offending timestamp.
    pub fn validate_sample(&self, s: &Sample) -> Result<()> {
        let ts = s.timestamp;
        if s.coarse.shape() != (self.coarse_height, self.coarse_width) {
            return Err(Error::Data(format!(
                "sample at timestamp {ts}: coarse map is {}x{}, manifest declares {}x{}",
                s.coarse.height(),
                s.coarse.width(),
                self.coarse_height,
                self.coarse_width
            )));
        }
        if s.fine.shape() != self.fine_shape() {
            return Err(Error::Data(format!(
                "sample at timestamp {ts}: fine map is {}x{}, manifest declares {}x{}",
                s.fine.height(),
                s.fine.width(),
                self.fine_shape().0,
                self.fine_shape().1
            )));
        }
        let agg = coarsen(&s.fine, self.scale)?;
        for (k, (a, c)) in agg.values().iter().zip(s.coarse.values()).enumerate() {
            if (a - c).abs() > 1e-6 * c.abs().max(1.0) {
                return Err(Error::Data(format!(
                    "sample at timestamp {ts}: superregion ({}, {}) has coarse flow {c} but its subregions sum to {a}",
                    k / self.coarse_width,
                    k % self.coarse_width
                )));
            }
        }
        self.schema
            .check(&s.external)
            .map_err(|e| Error::Data(format!("sample at timestamp {ts}: {e}")))
    }
}

/// A manifest plus its chronologically ordered samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for w in self.samples.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::Data(format!(
                    "timestamps must increase: {} follows {}",
                    w[1].timestamp, w[0].timestamp
                )));
            }
        }
        self.samples.iter().try_for_each(|s| self.manifest.validate_sample(s))
    }
}
