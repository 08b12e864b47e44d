//! Python module `fineflow_py`: dataset generation, the grid algebra,
//! checkpoint inference, metrics, and the command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fineflow::data::{synth_generate, write_dataset, SynthConfig};
use fineflow::external::ExternalRecord;
use fineflow::grid::{self, FlowMap, Grid, ScaleFactor};
use fineflow::model::{Batch, FlowModel};
use fineflow::Error;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn scale(n: usize) -> PyResult<ScaleFactor> {
    ScaleFactor::new(n).map_err(py_err)
}

fn to_map(rows: &Rows) -> PyResult<FlowMap> {
    FlowMap::from_rows(rows).map_err(py_err)
}

fn to_rows(values: &[f64], width: usize) -> Rows {
    values.chunks(width).map(<[f64]>::to_vec).collect()
}

fn map_rows(m: &FlowMap) -> Rows {
    to_rows(m.values(), m.width())
}

/// Sums each `scale x scale` block.
#[pyfunction]
fn coarsen(fine: Rows, scale: usize) -> PyResult<Rows> {
    let s = self::scale(scale)?;
    Ok(map_rows(&grid::coarsen(&to_map(&fine)?, s).map_err(py_err)?))
}

/// Splits every coarse cell evenly over its block.
#[pyfunction]
fn mean_partition(coarse: Rows, scale: usize) -> PyResult<Rows> {
    let s = self::scale(scale)?;
    Ok(map_rows(&fineflow::baselines::mean_partition(&to_map(&coarse)?, s)))
}

/// Divides each entry by its block sum plus `eps`.
#[pyfunction]
#[pyo3(signature = (raw, scale, eps = grid::DEFAULT_EPS))]
fn n2_normalize(raw: Rows, scale: usize, eps: f64) -> PyResult<Rows> {
    let s = self::scale(scale)?;
    let g = Grid::from_rows(&raw).map_err(py_err)?;
    let d = grid::n2_normalize(&g, s, eps).map_err(py_err)?;
    Ok(to_rows(d.values(), g.width))
}

/// RMSE, MAE and MAPE over paired lists of maps.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, preds: Vec<Rows>, targets: Vec<Rows>) -> PyResult<Bound<'py, PyDict>> {
    let p = preds.iter().map(to_map).collect::<PyResult<Vec<_>>>()?;
    let t = targets.iter().map(to_map).collect::<PyResult<Vec<_>>>()?;
    let r = fineflow::eval::compute_metrics(&p, &t).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("rmse", r.rmse)?;
    d.set_item("mae", r.mae)?;
    d.set_item("mape", r.mape)?;
    d.set_item("samples", r.samples)?;
    Ok(d)
}

/// Writes a synthetic dataset directory; returns the sample count.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, coarse = (16, 16), scale = 2, steps = 600, stationary = false, noise = 0.05))]
fn generate(
    out: PathBuf,
    seed: u64,
    coarse: (usize, usize),
    scale: usize,
    steps: usize,
    stationary: bool,
    noise: f64,
) -> PyResult<usize> {
    let mut cfg = SynthConfig::new(coarse, self::scale(scale)?, steps, seed);
    cfg.stationary = stationary;
    cfg.noise = noise;
    let d = synth_generate(&cfg).map_err(py_err)?;
    write_dataset(&d, &out).map_err(py_err)?;
    Ok(d.samples.len())
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    fineflow::cli::run(std::iter::once("fineflow".to_string()).chain(args))
}

fn record(d: &Bound<'_, PyDict>) -> PyResult<ExternalRecord> {
    fn get<'py, T: FromPyObjectOwned<'py>>(d: &Bound<'py, PyDict>, key: &str) -> PyResult<T> {
        match d.get_item(key)? {
            Some(v) => v.extract().map_err(Into::into),
            None => Err(PyValueError::new_err(format!("external record is missing '{key}'"))),
        }
    }
    Ok(ExternalRecord {
        temperature: get(d, "temperature")?,
        wind_speed: get(d, "wind_speed")?,
        weather: get(d, "weather")?,
        holiday: get(d, "holiday")?,
        weekend: get(d, "weekend")?,
        day_of_week: get(d, "day_of_week")?,
        hour_of_day: get(d, "hour_of_day")?,
        ticket_price: match d.get_item("ticket_price")? {
            Some(v) if !v.is_none() => Some(v.extract()?),
            _ => None,
        },
    })
}

/// A trained network loaded from a checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: FlowModel<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = fineflow::checkpoint::load_checkpoint(&path).map_err(py_err)?;
        Ok(Model { inner: ck.model })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.cfg.variant.as_str()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Fine maps for a list of coarse maps; `externals` is a list of
    /// dicts, required by models that fuse external factors.
    #[pyo3(signature = (coarse, externals = None))]
    fn infer(&self, coarse: Vec<Rows>, externals: Option<Vec<Bound<'_, PyDict>>>) -> PyResult<Vec<Rows>> {
        let maps = coarse.iter().map(to_map).collect::<PyResult<Vec<_>>>()?;
        let records = externals
            .map(|v| v.iter().map(record).collect::<PyResult<Vec<_>>>())
            .transpose()?;
        let fine = self
            .inner
            .infer(&Batch {
                coarse: &maps,
                externals: records.as_deref(),
            })
            .map_err(py_err)?;
        Ok(fine.iter().map(map_rows).collect())
    }
}

#[pymodule]
fn fineflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(coarsen, m)?)?;
    m.add_function(wrap_pyfunction!(mean_partition, m)?)?;
    m.add_function(wrap_pyfunction!(n2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
