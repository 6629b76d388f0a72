//! Python bindings: simulation, stage-1 fitting, association tests and the
//! gradient suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use icm_gwas::assoc::{self, AssociationResult, Method, DEFAULT_THRESHOLD};
use icm_gwas::cli::Dataset;
use icm_gwas::icm::{IcmConfig, SnpModel};
use icm_gwas::lfvi::{self, Stage1Config, VariationalState};
use icm_gwas::numerics::{self, Matrix};
use icm_gwas::simgen::{self, Family, SimConfig};
use icm_gwas::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Singular { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Genotypes with optional traits and simulation truth.
#[pyclass(name = "Dataset", module = "icmpy")]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (family = "psd", a = 0.1, snps = 5000, individuals = 500, n_causal = 10, seed = 0))]
    fn simulate(py: Python<'_>, family: &str, a: f64, snps: usize, individuals: usize, n_causal: usize, seed: u64) -> PyResult<Self> {
        let family: Family = parse(family)?;
        let cfg = SimConfig { family, a, snps, individuals, n_causal, seed };
        let sim = py.detach(|| simgen::simulate(&cfg)).map_err(py_err)?;
        Ok(PyDataset { inner: Dataset::from(sim) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: Dataset::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn individuals(&self) -> usize {
        self.inner.genotypes.individuals()
    }

    #[getter]
    fn snps(&self) -> usize {
        self.inner.genotypes.snps()
    }

    /// Row-major `individuals × snps` bytes.
    #[getter]
    fn genotypes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.genotypes.bytes())
    }

    fn genotype(&self, individual: usize, snp: usize) -> PyResult<u8> {
        let g = &self.inner.genotypes;
        if individual >= g.individuals() || snp >= g.snps() {
            return Err(PyValueError::new_err("genotype index out of range"));
        }
        Ok(g.get(individual, snp))
    }

    #[getter]
    fn traits(&self) -> Option<Vec<f64>> {
        self.inner.traits.clone()
    }

    #[getter]
    fn causal(&self) -> Option<Vec<usize>> {
        self.inner.truth.as_ref().map(|t| t.causal.clone())
    }

    #[getter]
    fn populations(&self) -> Option<Vec<usize>> {
        self.inner.truth.as_ref().and_then(|t| t.populations.clone())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(individuals={}, snps={}, traits={})", self.individuals(), self.snps(), self.inner.traits.is_some())
    }
}

/// Variational state of the implicit causal model.
#[pyclass(name = "Model", module = "icmpy")]
pub struct PyModel {
    state: VariationalState,
    seed: u64,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (dataset, k = 3, snp_model = "logistic", batch_norm = true, seed = 0))]
    fn new(dataset: &PyDataset, k: usize, snp_model: &str, batch_norm: bool, seed: u64) -> PyResult<Self> {
        let snp_model: SnpModel = parse(snp_model)?;
        let cfg = IcmConfig { k, snp_model, batch_norm, ..IcmConfig::default() };
        let g = &dataset.inner.genotypes;
        let state = VariationalState::init(&cfg, g.individuals(), g.snps(), seed).map_err(py_err)?;
        Ok(PyModel { state, seed })
    }

    /// Continues stage 1 up to `epochs` total epochs; returns the mean ELBO
    /// of each epoch run.
    #[pyo3(signature = (dataset, epochs = 60, snp_batch_size = 256, step_size_z = 0.1, step_size_w = 0.1, step_size_phi = 0.005))]
    fn fit(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        epochs: usize,
        snp_batch_size: usize,
        step_size_z: f64,
        step_size_w: f64,
        step_size_phi: f64,
    ) -> PyResult<Vec<f64>> {
        let cfg = Stage1Config { epochs, snp_batch_size, step_size_z, step_size_w, step_size_phi, seed: self.seed, ..Stage1Config::default() };
        let x = &dataset.inner.genotypes;
        let state = &mut self.state;
        let report = py.detach(|| lfvi::stage1_fit(x, state, &cfg)).map_err(py_err)?;
        Ok(report.epochs.iter().map(|e| e.elbo_mean).collect())
    }

    /// Monte Carlo ELBO over all SNPs and individuals: `(mean, se)`.
    #[pyo3(signature = (dataset, samples = 4, seed = 0))]
    fn elbo(&self, py: Python<'_>, dataset: &PyDataset, samples: usize, seed: u64) -> PyResult<(f64, Option<f64>)> {
        let x = &dataset.inner.genotypes;
        py.detach(|| lfvi::estimate_elbo(x, &self.state, samples, seed)).map_err(py_err)
    }

    /// Posterior means of the confounders, one row per individual.
    #[getter]
    fn z_hat(&self) -> Vec<Vec<f64>> {
        rows_of(self.state.z_hat())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.state.stage1_epochs
    }

    #[getter]
    fn k(&self) -> usize {
        self.state.config.k
    }
}

/// Per-SNP test results.
#[pyclass(name = "Association", module = "icmpy")]
pub struct PyAssociation {
    inner: AssociationResult,
}

#[pymethods]
impl PyAssociation {
    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn statistic(&self) -> Vec<f64> {
        self.inner.statistic.clone()
    }

    #[getter]
    fn p_value(&self) -> Vec<f64> {
        self.inner.p_value.clone()
    }

    #[getter]
    fn degenerate(&self) -> Vec<bool> {
        self.inner.degenerate.clone()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    #[pyo3(signature = (threshold = None))]
    fn significant(&self, threshold: Option<f64>) -> Vec<usize> {
        self.inner.significant_at(threshold.unwrap_or(self.inner.threshold))
    }

    /// Fraction of significant SNPs that are causal; `None` with no discoveries.
    fn precision(&self, causal: Vec<usize>) -> Option<f64> {
        assoc::precision(&self.inner, &causal)
    }

    /// Genomic-control inflation factor of the p-values.
    fn inflation_factor(&self) -> f64 {
        assoc::inflation_factor(&self.inner.p_value)
    }
}

/// Tests every SNP against the dataset's traits. `method` is `icm` (needs a
/// fitted `model`), `pca` or `uncorrected`.
#[pyfunction]
#[pyo3(signature = (dataset, method = "icm", model = None, k_pc = 3, threshold = DEFAULT_THRESHOLD))]
fn associate(
    py: Python<'_>,
    dataset: &PyDataset,
    method: &str,
    model: Option<&PyModel>,
    k_pc: usize,
    threshold: f64,
) -> PyResult<PyAssociation> {
    let method: Method = parse(method)?;
    let d = &dataset.inner;
    let y = d.traits.as_deref().ok_or_else(|| PyValueError::new_err("dataset has no traits"))?;
    let x = &d.genotypes;
    let result = match method {
        Method::Uncorrected => py.detach(|| assoc::test_uncorrected(y, x, threshold)),
        Method::Pca => py.detach(|| assoc::test_pca_baseline(y, x, k_pc, threshold)),
        Method::Icm => {
            let m = model.ok_or_else(|| PyValueError::new_err("method 'icm' needs a fitted model"))?;
            py.detach(|| assoc::test_corrected(y, x, m.state.z_hat(), threshold))
        }
    }
    .map_err(py_err)?;
    Ok(PyAssociation { inner: result })
}

/// Finite-difference gradient checks: `(name, instances, max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (instances = 20))]
fn gradient_suite(py: Python<'_>, instances: usize) -> Vec<(String, usize, f64, bool)> {
    py.detach(|| icm_gwas::verify::gradient_suite(instances))
        .into_iter()
        .map(|r| (r.name.to_string(), r.instances, r.max_error, r.passed()))
        .collect()
}

/// K-means labels for the rows of `points`.
#[pyfunction]
#[pyo3(signature = (points, k, seed = 0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    let cols = points.first().map_or(0, Vec::len);
    if points.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged point matrix"));
    }
    let m = Matrix::from_vec(points.len(), cols, points.concat()).map_err(py_err)?;
    Ok(numerics::kmeans(&m, k, &mut numerics::RngStream::new(seed)).map_err(py_err)?.labels)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("label vectors differ in length"));
    }
    Ok(numerics::adjusted_rand_index(&a, &b))
}

/// Runs the command-line front end with `args` (without the program name);
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| icm_gwas::cli::run(std::iter::once("icm".to_string()).chain(args)))
}

#[pymodule]
fn icmpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAssociation>()?;
    m.add_function(wrap_pyfunction!(associate, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("DEFAULT_THRESHOLD", DEFAULT_THRESHOLD)?;
    Ok(())
}
