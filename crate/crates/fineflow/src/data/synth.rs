//! Synthetic flows over a city with office, residential and park areas
//! whose activity follows the clock, the calendar and the weather.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::external::{ExternalRecord, ExternalSchema};
use crate::grid::{coarsen, FlowMap, ScaleFactor};
use crate::model::Scalers;

use super::{Dataset, DatasetManifest, Sample};

pub const CLASSES: [&str; 3] = ["office", "residence", "park"];

/// Weather ids at or above this value count as bad weather.
pub const BAD_WEATHER: usize = 8;

/// How strongly each area type reacts to the external factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    /// Weekday working-hours peak of office areas.
    pub office: f64,
    /// Evening/night peak of residential areas.
    pub residence: f64,
    /// Weekend/holiday daytime peak of parks.
    pub park: f64,
    /// Multiplier on park activity in bad weather.
    pub bad_weather_park: f64,
}

impl Default for Response {
    fn default() -> Self {
        Response {
            office: 1.0,
            residence: 0.8,
            park: 1.0,
            bad_weather_park: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub scale: ScaleFactor,
    pub steps: usize,
    pub seed: u64,
    /// Time-invariant allocation: every fine map is an integer multiple of
    /// one fixed map, so historical averaging recovers it exactly.
    pub stationary: bool,
    /// Standard deviation of the multiplicative per-cell noise.
    pub noise: f64,
    /// Bumps per area type; `None` picks one per 64 fine cells (at least 2).
    pub bumps_per_class: Option<usize>,
    /// Range of bump radii in fine cells. Radii below the block size mix
    /// area types inside a superregion, so how a block's flow splits
    /// depends on which types are active at the time.
    pub bump_sigma: (f64, f64),
    /// Flow of a fully active bump centre.
    pub amplitude: f64,
    /// Activity present everywhere regardless of area type.
    pub background: f64,
    pub response: Response,
    pub interval_minutes: u32,
}

impl SynthConfig {
    pub fn new(coarse: (usize, usize), scale: ScaleFactor, steps: usize, seed: u64) -> Self {
        SynthConfig {
            coarse_height: coarse.0,
            coarse_width: coarse.1,
            scale,
            steps,
            seed,
            stationary: false,
            noise: 0.0,
            bumps_per_class: None,
            bump_sigma: (0.5, 1.0),
            amplitude: 40.0,
            background: 0.02,
            response: Response::default(),
            interval_minutes: 60,
        }
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        let n = self.scale.get();
        (self.coarse_height * n, self.coarse_width * n)
    }

    fn validate(&self) -> Result<()> {
        if self.coarse_height == 0 || self.coarse_width == 0 || self.steps == 0 {
            return Err(Error::Config("grid and step count must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise < 1.0) {
            return Err(Error::Config(format!("noise {} outside [0, 1)", self.noise)));
        }
        let (lo, hi) = self.bump_sigma;
        if !(lo > 0.0 && lo <= hi) || self.amplitude <= 0.0 || self.background < 0.0 {
            return Err(Error::Config("bump radii, amplitude and background must be positive".into()));
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return Err(Error::Config("interval must divide a day".into()));
        }
        Ok(())
    }
}

/// Per-class spatial densities on the fine grid plus the partition they
/// induce (each cell belongs to its densest class).
#[derive(Debug, Clone)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
    pub density: [Vec<f64>; 3],
    pub mask: Vec<usize>,
}

fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Layout {
    let (h, w) = cfg.fine_shape();
    let k = cfg.bumps_per_class.unwrap_or((h * w / 64).max(2));
    let density = std::array::from_fn(|_| {
        let bumps: Vec<(f64, f64, f64, f64)> = (0..k)
            .map(|_| {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let s = rng.random_range(cfg.bump_sigma.0..=cfg.bump_sigma.1);
                let a = rng.random_range(0.5..1.0);
                (cy, cx, s, a)
            })
            .collect();
        let mut d = vec![0.0; h * w];
        for (idx, v) in d.iter_mut().enumerate() {
            let (y, x) = ((idx / w) as f64 + 0.5, (idx % w) as f64 + 0.5);
            *v = bumps
                .iter()
                .map(|(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum();
        }
        d
    });
    let mask = (0..h * w)
        .map(|i| {
            (0..3)
                .max_by(|a, b| density[*a][i].total_cmp(&density[*b][i]))
                .expect("three classes")
        })
        .collect();
    Layout {
        height: h,
        width: w,
        density,
        mask,
    }
}

/// Spatial layout used by a config (same seed, same layout).
pub fn synth_layout(cfg: &SynthConfig) -> Layout {
    layout(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn plateau(hour: f64, start: f64, end: f64) -> f64 {
    // smooth step up at `start` and down at `end`
    let s = |x: f64| 1.0 / (1.0 + (-2.0 * x).exp());
    s(hour - start) * s(end - hour)
}

/// Activity multipliers `(office, residence, park)` for one timestamp.
pub fn class_weights(r: &ExternalRecord, resp: &Response) -> [f64; 3] {
    let hour = r.hour_of_day as f64 + 0.5;
    let off_day = r.weekend || r.holiday;
    let bad = r.weather >= BAD_WEATHER;
    let office = if off_day {
        0.1 + 0.2 * resp.office * plateau(hour, 10.0, 16.0)
    } else {
        0.1 + resp.office * plateau(hour, 8.0, 19.0)
    };
    let night = plateau(hour, 18.0, 24.0) + plateau(hour, -1.0, 7.5);
    let residence = 0.25 + resp.residence * night + if off_day { 0.4 * plateau(hour, 9.0, 20.0) } else { 0.0 };
    let mut park = if off_day {
        0.05 + resp.park * plateau(hour, 10.0, 17.0)
    } else {
        0.05 + 0.25 * resp.park * plateau(hour, 11.5, 14.0)
    };
    let mut office = office;
    if bad {
        park *= resp.bad_weather_park;
        office *= 1.1;
    }
    [office, residence, park]
}

fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn externals(cfg: &SynthConfig, schema: &ExternalSchema, rng: &mut ChaCha8Rng) -> Vec<ExternalRecord> {
    let per_day = (1440 / cfg.interval_minutes) as usize;
    let days = cfg.steps.div_ceil(per_day);
    let holidays: Vec<bool> = (0..days).map(|d| d % 7 < 5 && rng.random::<f64>() < 0.05).collect();
    let temp_noise = Normal::new(0.0, 1.5).expect("valid");
    let wind = Normal::new(3.0, 2.0).expect("valid");
    let mut weather = 0usize;
    let (tlo, thi) = schema.temperature;
    let (wlo, whi) = schema.wind_speed;
    (0..cfg.steps)
        .map(|t| {
            let minutes = t * cfg.interval_minutes as usize;
            let day = minutes / 1440;
            let hour = (minutes % 1440) / 60;
            if rng.random::<f64>() < 0.15 {
                // mostly fair, occasionally a spell of bad weather
                weather = if rng.random::<f64>() < 0.7 {
                    rng.random_range(0..BAD_WEATHER)
                } else {
                    rng.random_range(BAD_WEATHER..schema.weather_classes.max(BAD_WEATHER + 1))
                };
            }
            let daily = (2.0 * std::f64::consts::PI * (hour as f64 - 9.0) / 24.0).sin();
            let temp = 12.0 + 8.0 * daily - if weather >= BAD_WEATHER { 3.0 } else { 0.0 } + temp_noise.sample(rng);
            ExternalRecord {
                temperature: (temp * 10.0).round().clamp(tlo * 10.0, thi * 10.0) / 10.0,
                wind_speed: (f64::abs(wind.sample(rng)) * 10.0).round().clamp(wlo * 10.0, whi * 10.0) / 10.0,
                weather: weather.min(schema.weather_classes - 1),
                holiday: holidays[day],
                weekend: day % 7 >= 5,
                day_of_week: day % 7,
                hour_of_day: hour,
                ticket_price: None,
            }
        })
        .collect()
}

/// Generates a dataset deterministically from `cfg.seed`. Flows are
/// quantized to 0.01 so the six-significant-digit files store them exactly.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lay = layout(cfg, &mut rng);
    let schema = ExternalSchema::taxi();
    let records = externals(cfg, &schema, &mut rng);
    let (h, w) = cfg.fine_shape();
    let noise = Normal::new(0.0, 1.0).expect("valid");

    let stationary_base: Vec<f64> = (0..h * w)
        .map(|i| {
            let c = lay.mask[i];
            quantize(cfg.amplitude * (cfg.background + lay.density[c][i]) / 4.0).max(0.01)
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.steps);
    for (t, ext) in records.into_iter().enumerate() {
        let values: Vec<f64> = if cfg.stationary {
            let hour = ext.hour_of_day as f64;
            let g = (2.0 + 2.0 * (1.0 + (2.0 * std::f64::consts::PI * hour / 24.0).sin())).round();
            stationary_base
                .iter()
                .map(|b| {
                    let jitter = if cfg.noise > 0.0 {
                        (1.0 + cfg.noise * noise.sample(&mut rng)).max(0.0)
                    } else {
                        1.0
                    };
                    quantize(g * b * jitter)
                })
                .collect()
        } else {
            let wts = class_weights(&ext, &cfg.response);
            (0..h * w)
                .map(|i| {
                    let mean: f64 = cfg.amplitude
                        * (cfg.background + (0..3).map(|c| wts[c] * lay.density[c][i]).sum::<f64>());
                    let jitter = if cfg.noise > 0.0 {
                        (1.0 + cfg.noise * noise.sample(&mut rng)).max(0.0)
                    } else {
                        1.0
                    };
                    quantize(mean * jitter)
                })
                .collect()
        };
        let fine = FlowMap::new(h, w, values)?;
        let sums = coarsen(&fine, cfg.scale)?;
        let coarse = FlowMap::new(
            cfg.coarse_height,
            cfg.coarse_width,
            sums.values().iter().map(|v| quantize(*v)).collect(),
        )?;
        samples.push(Sample {
            timestamp: (t * cfg.interval_minutes as usize * 60) as i64,
            coarse,
            fine,
            external: ext,
        });
    }
    let mut manifest = DatasetManifest::new(
        if cfg.stationary { "synthetic-stationary" } else { "synthetic" },
        (cfg.coarse_height, cfg.coarse_width),
        cfg.scale,
        schema,
    );
    manifest.interval_minutes = cfg.interval_minutes;
    // The default scalers are sized for city-scale counts and would leave these
    // flows near zero; scale by the series maxima instead.
    let peak = |f: fn(&Sample) -> &FlowMap| samples.iter().map(|s| f(s).grid().max()).fold(0.0, f64::max);
    let (coarse_peak, fine_peak) = (peak(|s| &s.coarse), peak(|s| &s.fine));
    if coarse_peak > 0.0 && fine_peak > 0.0 {
        manifest.scalers = Scalers { coarse: coarse_peak, fine: fine_peak };
    }
    Ok(Dataset { manifest, samples })
}
