//! Python bindings. Models always run in double precision here; the CLI is
//! the place for single-precision sweeps.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tokenhorizon::efficiency::{arch_preset, calibrate_text_tokens, flops_estimate as estimate, LLAVA_BASELINE_FLOPS};
use tokenhorizon::engine::{ModelCheckpoint, MultimodalSequence};
use tokenhorizon::harness::{self, gen_task as gen, Recipe, SweepConfig, TaskKind, TaskSpec};
use tokenhorizon::information::{self, average_stats, profile_stats, LayerStats};
use tokenhorizon::pruning::{self as pr, PruneSchedule};
use tokenhorizon::tensor::Matrix;
use tokenhorizon::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn task(kind: &str) -> PyResult<TaskKind> {
    kind.parse().map_err(err)
}

/// One tokenised task instance: text prefix, visual features, question.
#[pyclass(name = "Sequence", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PySequence {
    inner: MultimodalSequence,
}

#[pymethods]
impl PySequence {
    #[getter]
    fn n_visual(&self) -> usize {
        self.inner.n_visual()
    }

    #[getter]
    fn label(&self) -> u32 {
        self.inner.label
    }

    #[getter]
    fn question_ids(&self) -> Vec<u32> {
        self.inner.question_ids.clone()
    }

    /// Visual features, one row per token.
    fn visual(&self) -> Vec<Vec<f64>> {
        let v = &self.inner.visual;
        (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Sequence(n_visual={}, label={})", self.inner.n_visual(), self.inner.label)
    }
}

/// Task samples encoded for a model width of `d_model`.
#[pyfunction]
#[pyo3(signature = (kind, d_model, n_samples=200, seed=1, grid_side=4, n_colors=4))]
fn gen_task(kind: &str, d_model: usize, n_samples: usize, seed: u64, grid_side: usize, n_colors: usize) -> PyResult<Vec<PySequence>> {
    let spec = TaskSpec::new(task(kind)?, grid_side, n_colors, n_samples, 1, seed);
    let splits = gen(&spec).map_err(err)?;
    Ok(splits.train.sequences(d_model).into_iter().map(|inner| PySequence { inner }).collect())
}

fn unwrap_seqs(data: &[PyRef<'_, PySequence>]) -> Vec<MultimodalSequence> {
    data.iter().map(|s| s.inner.clone()).collect()
}

#[pyclass(name = "Checkpoint", frozen)]
pub struct PyCheckpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ModelCheckpoint::load(path, None).map(|inner| Self { inner }).map_err(err)
    }

    /// Random initialisation of a recipe preset's architecture.
    #[staticmethod]
    #[pyo3(signature = (preset="default", seed=0))]
    fn init(preset: &str, seed: u64) -> PyResult<Self> {
        let r = Recipe::preset(preset).map_err(err)?;
        ModelCheckpoint::init(r.arch, seed).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.arch.n_layers
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.arch.d_model
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Next-token distribution after the prompt.
    fn probs(&self, seq: &PySequence) -> PyResult<Vec<f64>> {
        let m = self.inner.model::<f64>().map_err(err)?;
        let run = m
            .forward_prefill(&seq.inner, &tokenhorizon::engine::CaptureFlags::none())
            .map_err(err)?;
        Ok(run.probs)
    }

    fn accuracy(&self, data: Vec<PyRef<'_, PySequence>>) -> PyResult<f64> {
        let m = self.inner.model::<f64>().map_err(err)?;
        harness::eval_accuracy(&m, &unwrap_seqs(&data)).map_err(err)
    }

    /// Information of each visual token at each layer, `[layer][token]`.
    fn information_profile(&self, seq: &PySequence) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.model::<f64>().map_err(err)?;
        let p = information::information_profile(&m, &seq.inner).map_err(err)?;
        Ok((0..=p.n_layers()).map(|l| p.row(l).to_vec()).collect())
    }

    /// Averaged per-layer statistics and the detected horizon.
    #[pyo3(signature = (data, tau=information::DEFAULT_TAU, persistence=information::DEFAULT_PERSISTENCE))]
    fn horizon(&self, data: Vec<PyRef<'_, PySequence>>, tau: f64, persistence: usize) -> PyResult<(Option<usize>, Vec<BTreeMap<&'static str, f64>>)> {
        let m = self.inner.model::<f64>().map_err(err)?;
        let mut per = Vec::new();
        for s in &data {
            per.push(profile_stats(&information::information_profile(&m, &s.inner).map_err(err)?));
        }
        let stats = average_stats(&per);
        Ok((information::detect_horizon(&stats, tau, persistence), stats.iter().map(stats_dict).collect()))
    }

    /// Accuracy with all visual tokens withdrawn after each layer.
    #[pyo3(signature = (data, samples=200))]
    fn withdraw_sweep<'py>(&self, py: Python<'py>, data: Vec<PyRef<'_, PySequence>>, samples: usize) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.model::<f64>().map_err(err)?;
        let cfg = SweepConfig {
            samples,
            info_samples: samples,
            ..Default::default()
        };
        let w = harness::withdraw_sweep(&m, "data", &unwrap_seqs(&data), &cfg).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("baseline", w.baseline)?;
        out.set_item("accuracy", w.accuracy)?;
        out.set_item("empirical_horizon", w.empirical_horizon)?;
        out.set_item("detected_horizon", w.detected_horizon)?;
        Ok(out)
    }

    /// Runs a schedule; returns output probabilities and visual tokens alive after each layer.
    fn apply_schedule(&self, seq: &PySequence, schedule: &PySchedule) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let m = self.inner.model::<f64>().map_err(err)?;
        let run = pr::apply_schedule(&m, &seq.inner, &schedule.inner).map_err(err)?;
        Ok((run.result.probs, run.retained_counts))
    }

    fn __repr__(&self) -> String {
        let a = &self.inner.arch;
        format!("Checkpoint(n_layers={}, d_model={}, heads={})", a.n_layers, a.d_model, a.n_heads)
    }
}

fn stats_dict(s: &LayerStats) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("mean", s.mean), ("variance", s.variance), ("mean_abs", s.mean_abs), ("p_text", s.p_text)])
}

/// Trains a recipe preset; returns the checkpoint and the per-step loss.
#[pyfunction]
#[pyo3(signature = (preset="default", steps=None, seed=None))]
fn train(py: Python<'_>, preset: &str, steps: Option<usize>, seed: Option<u64>) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let mut r = Recipe::preset(preset).map_err(err)?;
    if let Some(s) = seed {
        r = r.with_seed(s);
    }
    if let Some(s) = steps {
        r.train.steps = s;
    }
    let (inner, trace) = py.detach(|| r.run()).map_err(err)?;
    Ok((PyCheckpoint { inner }, trace))
}

/// Held-out split a recipe preset evaluates on.
#[pyfunction]
#[pyo3(signature = (kind, preset="default"))]
fn heldout(kind: &str, preset: &str) -> PyResult<Vec<PySequence>> {
    let r = Recipe::preset(preset).map_err(err)?;
    Ok(r.heldout(task(kind)?).map_err(err)?.into_iter().map(|inner| PySequence { inner }).collect())
}

#[pyclass(name = "Schedule", frozen)]
pub struct PySchedule {
    inner: PruneSchedule,
}

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        pr::preset(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown schedule preset {name}")))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        PruneSchedule::from_toml(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        pr::preset_names().into_iter().collect()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// Visual tokens alive after each layer boundary.
    fn alive_counts(&self, n_visual: usize, n_layers: usize) -> PyResult<Vec<usize>> {
        self.inner.alive_counts(n_visual, n_layers).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Schedule({:?}, {} actions)", self.inner.name, self.inner.actions.len())
    }
}

/// Analytic cost of a schedule on a named architecture. `n_text` defaults to
/// the value that reproduces the published unpruned LLaVA cost.
#[pyfunction]
#[pyo3(signature = (schedule, arch="llava-7b", n_visual=576, n_text=None, bytes_per_element=2))]
fn flops_estimate(
    schedule: &PySchedule,
    arch: &str,
    n_visual: usize,
    n_text: Option<usize>,
    bytes_per_element: u64,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let a = arch_preset(arch).ok_or_else(|| PyValueError::new_err(format!("unknown architecture {arch}")))?;
    let n_text = n_text.unwrap_or_else(|| calibrate_text_tokens(&a, n_visual, LLAVA_BASELINE_FLOPS));
    let base = estimate(&a, &PruneSchedule::empty("none"), n_visual, n_text, bytes_per_element).map_err(err)?;
    let r = estimate(&a, &schedule.inner, n_visual, n_text, bytes_per_element).map_err(err)?;
    Ok(BTreeMap::from([
        ("total_flops", r.total_flops as f64),
        ("tflops", r.total_tflops()),
        ("kv_cache_mib", r.kv_cache_mib()),
        ("mean_visual_tokens", r.mean_visual_tokens(n_text)),
        ("reduction_percent", r.reduction_vs(&base)),
        ("n_text", n_text as f64),
    ]))
}

/// Greedy max-min diverse subset of feature rows.
#[pyfunction]
fn select_maxmin(features: Vec<Vec<f64>>, retain_ratio: f64) -> PyResult<Vec<usize>> {
    let cols = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged feature rows"));
    }
    let m = Matrix::from_fn(features.len(), cols, |r, c| features[r][c]);
    let alive: Vec<usize> = (0..features.len()).collect();
    pr::select_maxmin_diversity(&m, &alive, retain_ratio).map_err(err)
}

/// Number kept out of `n` at `ratio`, rounding half up.
#[pyfunction]
fn retained_count(ratio: f64, n: usize) -> PyResult<usize> {
    pr::retained_count(ratio, n).map_err(err)
}

#[pymodule]
fn tokenhorizon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(gen_task, m)?)?;
    m.add_function(wrap_pyfunction!(heldout, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(flops_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(select_maxmin, m)?)?;
    m.add_function(wrap_pyfunction!(retained_count, m)?)?;
    m.add("DEFAULT_TAU", information::DEFAULT_TAU)?;
    Ok(())
}
