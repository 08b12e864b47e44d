use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::external::{read_external_csv, write_external_csv, ExternalSchema};
use crate::grid::{FlowMap, ScaleFactor};
use crate::model::Scalers;

use super::{Dataset, DatasetManifest, Sample, SplitRatios};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Decimal text with six significant digits.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Writes maps as a `T H W` header followed by `T` blocks of `H` lines.
pub fn write_flow_file(path: &Path, maps: &[FlowMap]) -> Result<()> {
    let (h, w) = maps.first().map(|m| m.shape()).unwrap_or((0, 0));
    let mut out = String::new();
    let _ = writeln!(out, "{} {h} {w}", maps.len());
    for m in maps {
        if m.shape() != (h, w) {
            return Err(Error::shape("write_flow_file", "maps have differing shapes"));
        }
        for row in m.values().chunks(w) {
            let line: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_flow_file(path: &Path) -> Result<Vec<FlowMap>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing \"T H W\" header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(1, format!("header {header:?} is not \"T H W\"")))?;
    let [t, h, w] = dims[..] else {
        return Err(err(1, format!("header {header:?} is not \"T H W\"")));
    };
    if h == 0 || w == 0 {
        return Err(err(1, "grid dimensions must be positive".into()));
    }
    let mut maps = Vec::with_capacity(t);
    let mut last = 1;
    for k in 0..t {
        let mut values = Vec::with_capacity(h * w);
        for r in 0..h {
            let (no, line) = lines
                .next()
                .ok_or_else(|| err(last + 1, format!("file ends inside map {k} (expected row {r} of {h})")))?;
            last = no;
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| err(no, format!("{tok:?} is not a number")))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(err(no, format!("flow {tok} must be finite and nonnegative")));
                }
                values.push(v);
            }
            if values.len() - before != w {
                return Err(err(no, format!("expected {w} values, found {}", values.len() - before)));
            }
        }
        maps.push(FlowMap::new(h, w, values)?);
    }
    if let Some((no, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(no, format!("unexpected trailing content {line:?}")));
    }
    Ok(maps)
}

fn bounds(v: (f64, f64)) -> String {
    format!("{},{}", v.0, v.1)
}

pub(crate) fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("name", m.name.clone());
    kv("coarse", format!("{}x{}", m.coarse_width, m.coarse_height));
    kv("scale", m.scale.get().to_string());
    kv("interval_minutes", m.interval_minutes.to_string());
    kv("coarse_scaler", m.scalers.coarse.to_string());
    kv("fine_scaler", m.scalers.fine.to_string());
    kv("weather_classes", m.schema.weather_classes.to_string());
    kv("temperature_bounds", bounds(m.schema.temperature));
    kv("wind_speed_bounds", bounds(m.schema.wind_speed));
    if let Some(t) = m.schema.ticket_price {
        kv("ticket_price_bounds", bounds(t));
    }
    kv("split", m.ratios.to_string());
    kv("zero_threshold", m.zero_threshold.to_string());
    kv("coarse_file", m.coarse_file.clone());
    kv("fine_file", m.fine_file.clone());
    kv("external_file", m.external_file.clone());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses `WxH` (width first), e.g. `16x8` is 8 rows of 16 columns.
pub fn parse_geometry(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("geometry {s:?} must look like WxH, e.g. 16x16"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

pub(crate) fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let get = |k: &str| -> Result<(usize, String)> {
        kv.get(k).cloned().ok_or_else(|| perr(0, format!("missing key {k}")))
    };
    fn num<T: std::str::FromStr>(p: &Path, (line, v): (usize, String), k: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            path: p.to_path_buf(),
            line,
            message: format!("{k} = {v:?} is not a valid number"),
        })
    }
    let pair = |k: &str| -> Result<(f64, f64)> {
        let (line, v) = get(k)?;
        let parts: Vec<&str> = v.split(',').collect();
        match parts[..] {
            [a, b] => Ok((
                num(path, (line, a.trim().to_string()), k)?,
                num(path, (line, b.trim().to_string()), k)?,
            )),
            _ => Err(perr(line, format!("{k} must be lo,hi"))),
        }
    };
    let (cl, coarse) = get("coarse")?;
    let (ch, cw) = parse_geometry(&coarse).map_err(|e| perr(cl, e.to_string()))?;
    let (sl, scale) = get("scale")?;
    let scale = ScaleFactor::new(num(path, (sl, scale), "scale")?).map_err(|e| perr(sl, e.to_string()))?;
    let (rl, ratios) = get("split")?;
    let ratios: SplitRatios = ratios.parse().map_err(|e: Error| perr(rl, e.to_string()))?;
    let schema = ExternalSchema {
        weather_classes: num(path, get("weather_classes")?, "weather_classes")?,
        temperature: pair("temperature_bounds")?,
        wind_speed: pair("wind_speed_bounds")?,
        ticket_price: if kv.contains_key("ticket_price_bounds") {
            Some(pair("ticket_price_bounds")?)
        } else {
            None
        },
    };
    schema.validate()?;
    let scalers = Scalers {
        coarse: num(path, get("coarse_scaler")?, "coarse_scaler")?,
        fine: num(path, get("fine_scaler")?, "fine_scaler")?,
    };
    scalers.validate()?;
    let zero_threshold: f64 = num(path, get("zero_threshold")?, "zero_threshold")?;
    if !(0.0..=1.0).contains(&zero_threshold) {
        return Err(Error::Config(format!("zero_threshold {zero_threshold} outside [0, 1]")));
    }
    Ok(DatasetManifest {
        name: get("name")?.1,
        coarse_height: ch,
        coarse_width: cw,
        scale,
        interval_minutes: num(path, get("interval_minutes")?, "interval_minutes")?,
        scalers,
        schema,
        ratios,
        zero_threshold,
        coarse_file: get("coarse_file")?.1,
        fine_file: get("fine_file")?.1,
        external_file: get("external_file")?.1,
    })
}

/// Writes the manifest, both flow files and the external CSV into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &dataset.manifest;
    let coarse: Vec<FlowMap> = dataset.samples.iter().map(|s| s.coarse.clone()).collect();
    let fine: Vec<FlowMap> = dataset.samples.iter().map(|s| s.fine.clone()).collect();
    let ext: Vec<_> = dataset.samples.iter().map(|s| (s.timestamp, s.external.clone())).collect();
    write_manifest(&dir.join(MANIFEST_FILE), m)?;
    write_flow_file(&dir.join(&m.coarse_file), &coarse)?;
    write_flow_file(&dir.join(&m.fine_file), &fine)?;
    write_external_csv(&dir.join(&m.external_file), &ext)
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let coarse = read_flow_file(&dir.join(&manifest.coarse_file))?;
    let fine = read_flow_file(&dir.join(&manifest.fine_file))?;
    let ext = read_external_csv(&dir.join(&manifest.external_file))?;
    if coarse.len() != fine.len() || coarse.len() != ext.len() {
        return Err(Error::Data(format!(
            "{} coarse maps, {} fine maps and {} external rows",
            coarse.len(),
            fine.len(),
            ext.len()
        )));
    }
    let samples = coarse
        .into_iter()
        .zip(fine)
        .zip(ext)
        .map(|((coarse, fine), (timestamp, external))| Sample {
            timestamp,
            coarse,
            fine,
            external,
        })
        .collect();
    let d = Dataset { manifest, samples };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::external::ExternalRecord;
    use crate::grid::coarsen;

    fn dataset() -> Dataset {
        let scale = ScaleFactor::new(2).unwrap();
        let manifest = DatasetManifest::new("t", (2, 2), scale, ExternalSchema::taxi());
        let samples = (0..3)
            .map(|t| {
                let fine = FlowMap::new(4, 4, (0..16).map(|k| (37 * k * (t + 1)) as f64 / 100.0).collect()).unwrap();
                let sums = coarsen(&fine, scale).unwrap();
                let stored = sums.values().iter().map(|v| format_value(*v).parse().unwrap()).collect();
                Sample {
                    timestamp: t as i64 * 3600,
                    coarse: FlowMap::new(2, 2, stored).unwrap(),
                    fine,
                    external: ExternalRecord {
                        temperature: 3.5,
                        wind_speed: 1.25,
                        weather: t,
                        holiday: t == 1,
                        weekend: false,
                        day_of_week: 0,
                        hour_of_day: t,
                        ticket_price: None,
                    },
                }
            })
            .collect();
        Dataset { manifest, samples }
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_value(1234.5678), "1234.57");
        assert_eq!(format_value(0.000123456789), "0.000123457");
        assert_eq!(format_value(2.0), "2");
        assert_eq!(format_value(0.0), "0");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset();
        write_dataset(&d, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn header_and_row_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        let row = |n: usize| vec!["1"; n].join(" ");
        let ok = format!("2 4 8\n{}\n", vec![row(8); 8].join("\n"));
        fs::write(&p, ok).unwrap();
        assert_eq!(read_flow_file(&p).unwrap().len(), 2);
        let mut rows = vec![row(8); 8];
        rows[5] = row(7);
        fs::write(&p, format!("2 4 8\n{}\n", rows.join("\n"))).unwrap();
        let err = read_flow_file(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
    }

    #[test]
    fn truncated_file_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        fs::write(&p, "2 2 2\n1 2\n3 4\n5 6\n").unwrap();
        let err = read_flow_file(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");
        assert!(err.to_string().contains(":5"), "{err}");
    }

    #[test]
    fn inconsistent_sample_names_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = dataset();
        write_dataset(&d, dir.path()).unwrap();
        d.samples[2].coarse = FlowMap::new(2, 2, vec![1.0; 4]).unwrap();
        write_flow_file(
            &dir.path().join("coarse.txt"),
            &d.samples.iter().map(|s| s.coarse.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("timestamp 7200"), "{err}");
    }

    #[test]
    fn geometry_is_width_by_height() {
        assert_eq!(parse_geometry("16x8").unwrap(), (8, 16));
        assert!(parse_geometry("16").is_err());
        assert!(parse_geometry("0x4").is_err());
    }
}
