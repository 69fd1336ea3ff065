//! Python module `pysfnngp`. Arrays cross the boundary as nested lists.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sfnngp::archive::ChainArchive;
use sfnngp::config::RunConfig;
use sfnngp::covariance::{nngp_factorize_coords, nngp_log_density, CorrelationKernel};
use sfnngp::geometry::{build_ordering, knn_for_prediction, nearest_neighbors, Point};
use sfnngp::{metrics, pipeline, SfError};

fn to_py(e: SfError) -> PyErr {
    match e {
        SfError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("[{}] {e}", e.kind())),
    }
}

fn points(coords: Vec<(f64, f64)>) -> Vec<Point> {
    coords.into_iter().map(|(x, y)| [x, y]).collect()
}

/// Sample CRPS of `samples` against `obs`.
#[pyfunction]
fn crps(samples: Vec<f64>, obs: f64) -> PyResult<f64> {
    metrics::crps(&samples, obs).map_err(to_py)
}

#[pyfunction]
fn rmspe(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::rmspe(&pred, &truth).map_err(to_py)
}

/// `(coverage percent, mean width)` of central `level` intervals.
#[pyfunction]
#[pyo3(signature = (draws, truth, level = 0.95))]
fn coverage_and_width(draws: Vec<Vec<f64>>, truth: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    metrics::coverage_and_width(&draws, &truth, level).map_err(to_py)
}

/// `(order, neighbors)`: storage index at each ordered position, and for each
/// ordered position the ordered positions of its neighbors.
#[pyfunction]
fn neighbor_sets(coords: Vec<(f64, f64)>, m: usize) -> PyResult<(Vec<usize>, Vec<Vec<usize>>)> {
    let pts = points(coords);
    let order = build_ordering(&pts).map_err(to_py)?;
    let ordered: Vec<Point> = order.iter().map(|&i| pts[i]).collect();
    let g = nearest_neighbors(&ordered, m).map_err(to_py)?;
    let nb = (0..g.len()).map(|i| g.neighbors(i).to_vec()).collect();
    Ok((order, nb))
}

/// Indices of the `m` reference points nearest to `query`.
#[pyfunction]
fn prediction_neighbors(reference: Vec<(f64, f64)>, query: (f64, f64), m: usize) -> Vec<usize> {
    knn_for_prediction(&points(reference), &[query.0, query.1], m)
}

/// NNGP log density of `w` given in ordered position, with exponential decay `phi`.
#[pyfunction]
fn nngp_logpdf(ordered_coords: Vec<(f64, f64)>, w: Vec<f64>, m: usize, phi: f64) -> PyResult<f64> {
    let pts = points(ordered_coords);
    if w.len() != pts.len() {
        return Err(PyValueError::new_err("w must have one value per location"));
    }
    let g = nearest_neighbors(&pts, m).map_err(to_py)?;
    let kernel = CorrelationKernel::exponential(phi).map_err(to_py)?;
    let f = nngp_factorize_coords(&g, &pts, &kernel).map_err(to_py)?;
    Ok(nngp_log_density(&w, &f, &g))
}

/// Canonical form of a configuration text (validates it).
#[pyfunction]
fn canonical_config(text: &str) -> PyResult<String> {
    Ok(RunConfig::parse(text).map_err(to_py)?.to_canonical())
}

/// Run one subcommand (or `all`) from configuration text. Returns the
/// written file paths.
#[pyfunction]
fn run_step(py: Python<'_>, name: &str, config_text: &str) -> PyResult<Vec<String>> {
    let cfg = RunConfig::parse(config_text).map_err(to_py)?;
    let reports = py
        .detach(|| {
            if name == "all" {
                pipeline::run_all(&cfg)
            } else {
                pipeline::run_subcommand(name, &cfg).map(|r| vec![r])
            }
        })
        .map_err(to_py)?;
    Ok(reports
        .iter()
        .flat_map(|r| r.files.iter().map(move |f| r.dir.join(f).to_string_lossy().into_owned()))
        .collect())
}

/// Archive directory as `(meta, blocks)`; each block is a list of draws.
#[pyfunction]
fn read_archive(path: &str) -> PyResult<(BTreeMap<String, String>, BTreeMap<String, Vec<Vec<f64>>>)> {
    let ar = ChainArchive::read_dir(Path::new(path)).map_err(to_py)?;
    let blocks = ar
        .blocks
        .iter()
        .map(|b| (b.name.clone(), (0..ar.draws()).map(|t| b.row(t).to_vec()).collect()))
        .collect();
    Ok((ar.meta.clone(), blocks))
}

#[pymodule]
fn pysfnngp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(rmspe, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_and_width, m)?)?;
    m.add_function(wrap_pyfunction!(neighbor_sets, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(nngp_logpdf, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_step, m)?)?;
    m.add_function(wrap_pyfunction!(read_archive, m)?)?;
    Ok(())
}
