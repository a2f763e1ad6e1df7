//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mixgan::config::{parse_overrides, ExperimentConfig, Preset};
use mixgan::data::{DatasetSpec, GaussianMixtureSpec, NoiseSpec, RealData, TrainingSetMode};
use mixgan::metrics::{self, MetricReport, MomentStats};
use mixgan::mixgan::{class_partition, device_assignment, mixture_weights as weights, split_ranges};
use mixgan::optim::{AdamConfig, AdamState};
use mixgan::runner::{self, RunOptions};
use mixgan::{rng, Error, Matrix, NetworkSpec, Vector};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Matrix::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn moments(mean: Vec<f64>, cov: &[Vec<f64>]) -> PyResult<MomentStats> {
    Ok(MomentStats { mean: Vector::from(mean), covariance: to_matrix(cov)? })
}

/// Fully connected LeakyReLU network with a linear output layer.
#[pyclass(module = "mixgan")]
struct Network {
    inner: mixgan::Network,
}

#[pymethods]
impl Network {
    /// Glorot-uniform initialization; `layers` counts affine layers.
    #[new]
    #[pyo3(signature = (input_dim, output_dim, layers, width, seed=0, slope=0.2))]
    fn new(input_dim: usize, output_dim: usize, layers: usize, width: usize, seed: u64, slope: f64) -> PyResult<Self> {
        let spec = NetworkSpec::new(input_dim, output_dim, layers, width).with_seed(seed).with_slope(slope);
        Ok(Self { inner: mixgan::Network::glorot(&spec).map_err(err)? })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.forward(&to_matrix(&x)?).map_err(err)?))
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&values).map_err(err)
    }

    /// Flat parameter gradient of `sum(forward(x) * cotangent)`.
    fn param_grads(&self, x: Vec<Vec<f64>>, cotangent: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let g = self.inner.param_grads(&to_matrix(&x)?, &to_matrix(&cotangent)?).map_err(err)?;
        Ok(g.flatten())
    }

    /// Gradient of the scalar output with respect to each input row.
    fn input_gradients(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.input_gradients(&to_matrix(&x)?).map_err(err)?))
    }

    /// `(penalty, flat parameter gradient)` of the gradient penalty at `x`.
    fn gradient_penalty(&self, x: Vec<Vec<f64>>, lam: f64) -> PyResult<(f64, Vec<f64>)> {
        let (v, g) = self.inner.gradient_penalty_with_grads(&to_matrix(&x)?, lam).map_err(err)?;
        Ok((v, g.flatten()))
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.encode()
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: mixgan::Network::decode(&data).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: mixgan::Network::load(&path).map_err(err)? })
    }
}

/// Adam state over a flat parameter vector.
#[pyclass(module = "mixgan")]
struct Adam {
    inner: AdamState,
}

#[pymethods]
impl Adam {
    #[new]
    #[pyo3(signature = (size, lr, beta1=0.5, beta2=0.9, eps=1e-8))]
    fn new(size: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> PyResult<Self> {
        let cfg = AdamConfig { learning_rate: lr, beta1, beta2, epsilon: eps };
        cfg.validate().map_err(err)?;
        Ok(Self { inner: AdamState::new(cfg, size) })
    }

    /// Returns the updated parameters.
    fn step(&mut self, params: Vec<f64>, grads: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut p = params;
        self.inner.step_slice(&mut p, &grads).map_err(err)?;
        Ok(p)
    }

    /// Updates a network in place from a flat gradient.
    fn step_network(&mut self, net: &mut Network, grads: Vec<f64>) -> PyResult<()> {
        let mut p = net.inner.params();
        self.inner.step_slice(&mut p, &grads).map_err(err)?;
        net.inner.set_params(&p).map_err(err)
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.step_count()
    }
}

/// Experiment configuration resolved on top of a preset.
#[pyclass(module = "mixgan")]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (preset="desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        let p: Preset = preset.parse().map_err(err)?;
        Ok(Self { inner: ExperimentConfig::preset(p) })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::parse(text).map_err(err)? })
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    /// Sets one dotted key, e.g. `set("train.lr_g", "1e-4")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.apply(&[(key.to_string(), value.to_string())]).map_err(err)
    }

    /// Applies `--section.key=value` style flags.
    fn apply_overrides(&mut self, flags: Vec<String>) -> PyResult<()> {
        let pairs = parse_overrides(&flags).map_err(err)?;
        self.inner.apply(&pairs).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn run_name(&self) -> String {
        self.inner.run_name()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("frechet_distance", r.frechet_distance)?;
    d.set_item("critic_gap", r.critic_gap)?;
    d.set_item("wasserstein_estimate", r.wasserstein_estimate)?;
    d.set_item("lipschitz_estimate", r.lipschitz_estimate)?;
    d.set_item("raw_independent_gap", r.raw_independent_gap)?;
    d.set_item("judge_accuracy", r.judge_accuracy)?;
    d.set_item("tv_lower_bound", r.tv_lower_bound)?;
    d.set_item("train_judge_accuracy", r.train_judge_accuracy)?;
    d.set_item("train_wasserstein_estimate", r.train_wasserstein_estimate)?;
    d.set_item("fd_samples", r.fd_samples)?;
    d.set_item("eval_samples", r.eval_samples)?;
    Ok(d)
}

/// Trains and evaluates `config` under `out_root`; returns the run
/// directory and the final report.
#[pyfunction]
#[pyo3(signature = (config, out_root, skip_aux=false, skip_projection=false))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &Config,
    out_root: PathBuf,
    skip_aux: bool,
    skip_projection: bool,
) -> PyResult<(String, Bound<'py, PyDict>)> {
    let cfg = config.inner.clone();
    let s = py
        .detach(|| runner::run_experiment(&cfg, &out_root, RunOptions { skip_aux, skip_projection }))
        .map_err(err)?;
    Ok((s.run_dir.display().to_string(), report_dict(py, &s.report)?))
}

/// Recomputes the final report of a finished run.
#[pyfunction]
fn eval_run<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| runner::eval_run(&run_dir)).map_err(err)?;
    report_dict(py, &r)
}

/// `(mean, covariance)` with the `1/(n-1)` normalization.
#[pyfunction]
fn empirical_moments(samples: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = metrics::empirical_moments(&to_matrix(&samples)?).map_err(err)?;
    Ok((m.mean.to_vec(), to_rows(&m.covariance)))
}

#[pyfunction]
fn frechet_distance(mean1: Vec<f64>, cov1: Vec<Vec<f64>>, mean2: Vec<f64>, cov2: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&moments(mean1, &cov1)?, &moments(mean2, &cov2)?).map_err(err)
}

#[pyfunction]
fn tv_lower_bound(acc: f64) -> f64 {
    metrics::tv_lower_bound(acc)
}

/// `(total variation, optimal classifier accuracy)` of two discrete
/// distributions.
#[pyfunction]
fn brute_force_tv_and_optacc(p: Vec<f64>, q: Vec<f64>) -> PyResult<(f64, f64)> {
    let pair = metrics::DiscreteDistributionPair::new(p, q).map_err(err)?;
    metrics::brute_force_tv_and_optacc(&pair).map_err(err)
}

#[pyfunction]
fn mixture_weights(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    weights(&logits).map_err(err)
}

#[pyfunction]
#[pyo3(name = "device_assignment")]
fn py_device_assignment(i: usize, n: usize) -> PyResult<usize> {
    device_assignment(i, n).map_err(err)
}

/// Row ranges `(start, end)` of an even split.
#[pyfunction]
#[pyo3(name = "split_ranges")]
fn py_split_ranges(rows: usize, parts: usize) -> PyResult<Vec<(usize, usize)>> {
    Ok(split_ranges(rows, parts).map_err(err)?.into_iter().map(|r| (r.start, r.end)).collect())
}

#[pyfunction]
#[pyo3(name = "class_partition")]
fn py_class_partition(k: usize, n_g: usize) -> PyResult<Vec<Vec<usize>>> {
    class_partition(k, n_g).map_err(err)
}

/// `(rows, 1-based labels)` drawn from the Gaussian mixture with centers
/// at the first `components` basis vectors.
#[pyfunction]
#[pyo3(signature = (dim, components, n, seed=0))]
fn sample_gaussian_mixture(dim: usize, components: usize, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let data = RealData::new(
        DatasetSpec::GaussianMixture(GaussianMixtureSpec::new(dim, components)),
        TrainingSetMode::Infinite,
        NoiseSpec { dim },
    )
    .map_err(err)?;
    let b = data.sample_fresh(n, &mut rng::from_seed(seed)).map_err(err)?;
    Ok((to_rows(&b.x), b.labels.unwrap_or_default()))
}

#[pymodule]
#[pyo3(name = "mixgan")]
fn mixgan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<Adam>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(eval_run, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_moments, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(tv_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_tv_and_optacc, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_weights, m)?)?;
    m.add_function(wrap_pyfunction!(py_device_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(py_split_ranges, m)?)?;
    m.add_function(wrap_pyfunction!(py_class_partition, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gaussian_mixture, m)?)?;
    Ok(())
}
