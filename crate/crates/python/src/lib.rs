//! Python bindings: the wavelet transform, potentials, the reconstruction
//! engine and PSNR.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use treevb::inference::{self, Estimator, Model, ModelConfig, Problem};
use treevb::{harness, Image, ObservationOp};

fn err(e: treevb::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Orthonormal Haar transform of an `height x width` image, pixels in
/// row-major order.
#[pyclass(name = "WaveletLayout", frozen)]
struct PyLayout {
    inner: treevb::WaveletLayout,
}

#[pymethods]
impl PyLayout {
    #[new]
    fn new(height: usize, width: usize, levels: usize) -> PyResult<Self> {
        Ok(Self {
            inner: treevb::WaveletLayout::new(height, width, levels).map_err(err)?,
        })
    }

    fn forward(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let l = &self.inner;
        let img = Image::new(l.height(), l.width(), pixels).map_err(err)?;
        l.forward(&img).map_err(err)
    }

    fn inverse(&self, coeffs: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.inverse(&coeffs).map_err(err)?.pixels)
    }

    /// Level of each coefficient; 0 marks scaling coefficients.
    fn levels(&self) -> Vec<usize> {
        self.inner.info().iter().map(|c| c.level).collect()
    }

    #[getter]
    fn n_scaling(&self) -> usize {
        self.inner.n_scaling()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Potential", frozen)]
struct PyPotential {
    inner: treevb::Potential,
}

#[pymethods]
impl PyPotential {
    #[staticmethod]
    fn laplace(tau: f64) -> PyResult<Self> {
        Ok(Self {
            inner: treevb::Potential::laplace(tau).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (tau, nu = 2.1))]
    fn student_t(tau: f64, nu: f64) -> PyResult<Self> {
        Ok(Self {
            inner: treevb::Potential::student_t(tau, nu).map_err(err)?,
        })
    }

    #[staticmethod]
    fn gaussian(xi: f64) -> PyResult<Self> {
        Ok(Self {
            inner: treevb::Potential::gaussian(xi).map_err(err)?,
        })
    }

    /// `-2 log t(s)`
    fn neg2_log(&self, s: f64) -> f64 {
        self.inner.neg2_log(s)
    }

    fn gamma_min(&self, s: f64) -> f64 {
        self.inner.gamma_min(s)
    }

    fn h_dual(&self, gamma: f64) -> PyResult<f64> {
        self.inner.h_dual(gamma).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    fn __repr__(&self) -> String {
        format!("Potential.{}({})", self.inner.kind(), self.inner.scale())
    }
}

#[pyclass(name = "RunResult", frozen, get_all)]
struct PyRunResult {
    /// Reconstruction, row-major.
    u: Vec<f64>,
    /// Bound value after every stage.
    phi_trace: Vec<f64>,
    phi_final: f64,
    outer_iters: usize,
    /// `Q(delta_j = 1)` per detail coefficient (tree models).
    q1: Option<Vec<f64>>,
    /// Scale hyperparameters per level and state.
    level_scales: Vec<Vec<f64>>,
}

/// Reconstruct an image from `y`, the full-size data (values at unobserved
/// pixels are ignored). `observed` lists the observed pixel indices; omit it
/// for denoising.
#[pyfunction]
#[pyo3(signature = (
    y, height, width, observed = None, model = "lap-tree", mode = "vb", sigma2 = 0.01,
    levels = 8, learn_hypers = false, outer = None, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn reconstruct(
    py: Python<'_>,
    y: Vec<f64>,
    height: usize,
    width: usize,
    observed: Option<Vec<usize>>,
    model: &str,
    mode: &str,
    sigma2: f64,
    levels: usize,
    learn_hypers: bool,
    outer: Option<usize>,
    seed: u64,
) -> PyResult<PyRunResult> {
    let n = height * width;
    if y.len() != n {
        return Err(PyValueError::new_err(format!(
            "expected {n} values, got {}",
            y.len()
        )));
    }
    let model: Model = model.parse().map_err(err)?;
    let estimator: Estimator = mode.parse().map_err(err)?;
    let mut config = ModelConfig::new(model, estimator);
    config.levels = levels;
    config.sigma2 = sigma2;
    config.learn_hypers = learn_hypers;
    config.seed = seed;
    if let Some(o) = outer {
        config.budgets.outer = o;
    }
    let problem = match observed {
        None => Problem::denoising(&Image::new(height, width, y).map_err(err)?, levels, sigma2),
        Some(idx) => {
            let vals = idx
                .iter()
                .map(|&i| y.get(i).copied().unwrap_or(f64::NAN))
                .collect();
            ObservationOp::mask(n, idx, sigma2)
                .and_then(|obs| Problem::new(height, width, levels, obs, vals))
        }
    }
    .map_err(err)?;
    let res = py
        .detach(|| inference::run(&problem, &config))
        .map_err(err)?;
    let level_scales = res
        .hypers
        .levels
        .iter()
        .map(|p| (0..p.n_states()).map(|r| p.state(r).scale()).collect())
        .collect();
    Ok(PyRunResult {
        u: res.u_star.pixels,
        phi_trace: res.phi_trace,
        phi_final: res.phi_final,
        outer_iters: res.outer_iters,
        q1: res.marginals.map(|m| m.q1),
        level_scales,
    })
}

/// Peak signal-to-noise ratio in dB for intensities in `[0, 1]`.
#[pyfunction]
fn psnr(estimate: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    let a = Image::new(1, estimate.len(), estimate).map_err(err)?;
    let b = Image::new(1, truth.len(), truth).map_err(err)?;
    harness::psnr(&a, &b).map_err(err)
}

/// Run the built-in reference checks; true when all pass.
#[pyfunction]
fn selftest() -> bool {
    treevb::selftest::run_all(&mut std::io::sink())
}

#[pymodule]
fn treevb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLayout>()?;
    m.add_class::<PyPotential>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
