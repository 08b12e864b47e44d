//! External factors: records, their encoding into the feature vector `e`,
//! and the fusion subnet producing coarse and fine feature maps.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScaleFactor;
use crate::nn::{BnConfig, Dense, Embedding, Pass, ParamStore, Scalar, SubPixelBlock, Tape, Tensor, Var};

/// One timestamp's external factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub temperature: f64,
    pub wind_speed: f64,
    pub weather: usize,
    pub holiday: bool,
    pub weekend: bool,
    pub day_of_week: usize,
    pub hour_of_day: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket_price: Option<f64>,
}

/// Vocabulary sizes and continuous bounds declared by dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSchema {
    pub weather_classes: usize,
    pub temperature: (f64, f64),
    pub wind_speed: (f64, f64),
    /// Present for event-driven datasets.
    pub ticket_price: Option<(f64, f64)>,
}

impl ExternalSchema {
    /// City-scale taxi schema: 16 weather classes, no ticket price.
    pub fn taxi() -> Self {
        ExternalSchema {
            weather_classes: 16,
            temperature: (-24.6, 41.0),
            wind_speed: (0.0, 48.6),
            ticket_price: None,
        }
    }

    /// Venue-scale schema: 8 weather classes plus a ticket price.
    pub fn venue() -> Self {
        ExternalSchema {
            weather_classes: 8,
            temperature: (-15.0, 39.0),
            wind_speed: (0.0, 16.0),
            ticket_price: Some((0.0, 500.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bounds = vec![("temperature", self.temperature), ("wind_speed", self.wind_speed)];
        if let Some(t) = self.ticket_price {
            bounds.push(("ticket_price", t));
        }
        for (name, (lo, hi)) in bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("{name} bounds [{lo}, {hi}] are not an interval")));
            }
        }
        if self.weather_classes == 0 {
            return Err(Error::Config("weather vocabulary is empty".into()));
        }
        Ok(())
    }

    pub fn continuous_len(&self) -> usize {
        2 + usize::from(self.ticket_price.is_some())
    }

    /// Checks vocabularies and sanity bounds.
    pub fn check(&self, r: &ExternalRecord) -> Result<()> {
        let cat = [
            ("weather", r.weather, self.weather_classes),
            ("day_of_week", r.day_of_week, 7),
            ("hour_of_day", r.hour_of_day, 24),
        ];
        for (name, v, vocab) in cat {
            if v >= vocab {
                return Err(Error::domain(
                    "external",
                    format!("{name} = {v} outside vocabulary of {vocab}"),
                ));
            }
        }
        let mut cont = vec![
            ("temperature", r.temperature, self.temperature),
            ("wind_speed", r.wind_speed, self.wind_speed),
        ];
        match (self.ticket_price, r.ticket_price) {
            (Some(b), Some(v)) => cont.push(("ticket_price", v, b)),
            (Some(_), None) => {
                return Err(Error::domain("external", "ticket_price required by schema but missing"))
            }
            (None, Some(_)) => {
                return Err(Error::domain("external", "ticket_price present but schema declares none"))
            }
            (None, None) => {}
        }
        for (name, v, (lo, hi)) in cont {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(Error::domain(
                    "external",
                    format!("{name} = {v} outside sanity bounds [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    /// Min-max scaled continuous features, in schema order.
    pub fn continuous(&self, r: &ExternalRecord) -> Vec<f64> {
        let scale = |v: f64, (lo, hi): (f64, f64)| (v - lo) / (hi - lo);
        let mut out = vec![scale(r.temperature, self.temperature), scale(r.wind_speed, self.wind_speed)];
        if let (Some(b), Some(v)) = (self.ticket_price, r.ticket_price) {
            out.push(scale(v, b));
        }
        out
    }
}

/// Embedding widths per categorical feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingWidths {
    pub weather: usize,
    pub holiday: usize,
    pub weekend: usize,
    pub day_of_week: usize,
    pub hour_of_day: usize,
}

impl Default for EmbeddingWidths {
    fn default() -> Self {
        EmbeddingWidths {
            weather: 3,
            holiday: 1,
            weekend: 1,
            day_of_week: 2,
            hour_of_day: 3,
        }
    }
}

impl EmbeddingWidths {
    pub fn total(&self) -> usize {
        self.weather + self.holiday + self.weekend + self.day_of_week + self.hour_of_day
    }
}

/// Init gain of the layer producing the external feature map. A full-scale
/// random map rivals the normalized coarse input it is stacked with and
/// slows early training; a small one lets the branch grow in as it learns.
pub const PROJECT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub schema: ExternalSchema,
    pub widths: EmbeddingWidths,
    pub hidden: usize,
    pub dropout: f64,
}

impl ExternalConfig {
    pub fn new(schema: ExternalSchema) -> Self {
        ExternalConfig {
            schema,
            widths: EmbeddingWidths::default(),
            hidden: 128,
            dropout: 0.3,
        }
    }

    /// Length of the encoded vector `e`.
    pub fn feature_len(&self) -> usize {
        self.schema.continuous_len() + self.widths.total()
    }
}

/// Parameters of the fusion subnet.
#[derive(Debug, Clone)]
pub struct ExternalSubnet {
    pub cfg: ExternalConfig,
    pub coarse: (usize, usize),
    pub scale: ScaleFactor,
    weather: Embedding,
    holiday: Embedding,
    weekend: Embedding,
    day_of_week: Embedding,
    hour_of_day: Embedding,
    hidden: Dense,
    project: Dense,
    upsample: Vec<SubPixelBlock>,
}

impl ExternalSubnet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ExternalConfig,
        coarse: (usize, usize),
        scale: ScaleFactor,
        bn: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.schema.validate()?;
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", cfg.dropout)));
        }
        let w = cfg.widths;
        let weather = Embedding::new(store, "ext.embed.weather", "weather", cfg.schema.weather_classes, w.weather, rng)?;
        let holiday = Embedding::new(store, "ext.embed.holiday", "holiday", 2, w.holiday, rng)?;
        let weekend = Embedding::new(store, "ext.embed.weekend", "weekend", 2, w.weekend, rng)?;
        let day_of_week = Embedding::new(store, "ext.embed.day_of_week", "day_of_week", 7, w.day_of_week, rng)?;
        let hour_of_day = Embedding::new(store, "ext.embed.hour_of_day", "hour_of_day", 24, w.hour_of_day, rng)?;
        let hidden = Dense::new(store, "ext.dense1", cfg.feature_len(), cfg.hidden, rng)?;
        let project = Dense::with_gain(store, "ext.dense2", cfg.hidden, coarse.0 * coarse.1, PROJECT_GAIN, rng)?;
        let upsample = scale
            .prime_factors()
            .into_iter()
            .enumerate()
            .map(|(i, r)| SubPixelBlock::new(store, &format!("ext.upsample.{i}"), 1, r, bn, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExternalSubnet {
            cfg: cfg.clone(),
            coarse,
            scale,
            weather,
            holiday,
            weekend,
            day_of_week,
            hour_of_day,
            hidden,
            project,
            upsample,
        })
    }

    /// Encodes a batch of records as `(B, len(e))`: scaled continuous
    /// features, then weather, holiday, weekend, day-of-week and hour
    /// embeddings.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        records: &[ExternalRecord],
    ) -> Result<Var> {
        for r in records {
            self.cfg.schema.check(r)?;
        }
        let cont: Vec<f64> = records.iter().flat_map(|r| self.cfg.schema.continuous(r)).collect();
        let cont = tape.constant(Tensor::from_f64(
            &[records.len(), self.cfg.schema.continuous_len()],
            &cont,
        )?);
        let idx = |f: fn(&ExternalRecord) -> usize| records.iter().map(f).collect::<Vec<_>>();
        let parts = [
            cont,
            self.weather.forward(tape, store, &idx(|r| r.weather))?,
            self.holiday.forward(tape, store, &idx(|r| usize::from(r.holiday)))?,
            self.weekend.forward(tape, store, &idx(|r| usize::from(r.weekend)))?,
            self.day_of_week.forward(tape, store, &idx(|r| r.day_of_week))?,
            self.hour_of_day.forward(tape, store, &idx(|r| r.hour_of_day))?,
        ];
        tape.concat_features(&parts)
    }

    /// Maps `e` of shape `(B, len(e))` to `(H^c_e, H^f_e)` with shapes
    /// `(B, 1, I, J)` and `(B, 1, NI, NJ)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        e: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<(Var, Var)> {
        let (b, d) = tape.value(e).dims2("external")?;
        if d != self.cfg.feature_len() {
            return Err(Error::shape(
                "external",
                format!("feature vector has length {d}, expected {}", self.cfg.feature_len()),
            ));
        }
        let h = self.hidden.forward(tape, store, e)?;
        let h = match pass.mode {
            crate::nn::Mode::Train => tape.dropout(h, self.cfg.dropout, Some(&mut *pass.rng))?,
            crate::nn::Mode::Eval => h,
        };
        let h = tape.relu(h);
        let h = self.project.forward(tape, store, h)?;
        let h = tape.relu(h);
        let coarse = tape.reshape(h, &[b, 1, self.coarse.0, self.coarse.1])?;
        let mut fine = coarse;
        for block in &self.upsample {
            fine = block.forward(tape, store, fine, pass)?;
        }
        Ok((coarse, fine))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    timestamp: i64,
    temperature: f64,
    wind_speed: f64,
    weather: usize,
    holiday: u8,
    weekend: u8,
    day_of_week: usize,
    hour_of_day: usize,
    #[serde(default)]
    ticket_price: Option<f64>,
}

fn flag(v: u8, name: &str, path: &Path, line: usize) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{name} must be 0 or 1, got {v}"),
        }),
    }
}

/// Reads `(timestamp, record)` rows from a CSV whose header names the
/// features; `ticket_price` may be absent.
pub fn read_external_csv(path: &Path) -> Result<Vec<(i64, ExternalRecord)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        out.push((
            row.timestamp,
            ExternalRecord {
                temperature: row.temperature,
                wind_speed: row.wind_speed,
                weather: row.weather,
                holiday: flag(row.holiday, "holiday", path, line)?,
                weekend: flag(row.weekend, "weekend", path, line)?,
                day_of_week: row.day_of_week,
                hour_of_day: row.hour_of_day,
                ticket_price: row.ticket_price,
            },
        ));
    }
    Ok(out)
}

pub fn write_external_csv(path: &Path, rows: &[(i64, ExternalRecord)]) -> Result<()> {
    let with_ticket = rows.iter().any(|(_, r)| r.ticket_price.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![
        "timestamp",
        "temperature",
        "wind_speed",
        "weather",
        "holiday",
        "weekend",
        "day_of_week",
        "hour_of_day",
    ];
    if with_ticket {
        header.push("ticket_price");
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (t, r) in rows {
        let mut rec = vec![
            t.to_string(),
            format!("{}", r.temperature),
            format!("{}", r.wind_speed),
            r.weather.to_string(),
            u8::from(r.holiday).to_string(),
            u8::from(r.weekend).to_string(),
            r.day_of_week.to_string(),
            r.hour_of_day.to_string(),
        ];
        if with_ticket {
            rec.push(r.ticket_price.map(|v| format!("{v}")).unwrap_or_default());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}
