//! Python bindings. Premium and data columns cross the boundary as lists of
//! floats; fitted corrections are returned as `Model` objects that replay on
//! new data and serialise to the same JSON body the CLI embeds.

use multical_core::categorical::{
    balance_correct as core_bc, iterate_multical_categorical, multibalance_correct as core_mbc,
    quantile_bins, CalibrationConfig,
};
use multical_core::continuous::{
    iterate_multical_continuous, local_balance_correct as core_local_bc, mbc_bivariate_centered,
    ContinuousConfig,
};
use multical_core::data::{Grouping, Portfolio as CorePortfolio, PremiumVector, SensitiveColumn};
use multical_core::isotonic::isotonic_fitted;
use multical_core::metrics::{self, quantile_grouping};
use multical_core::model::ModelBody;
use multical_core::synth::{distorted_baseline, generate, Distortion, GroupKind, SynthConfig};
use multical_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn premium(values: Vec<f64>) -> PyResult<PremiumVector> {
    PremiumVector::new(values).map_err(err)
}

/// Claims, exposures and an optional sensitive column.
///
/// `sensitive` is a list of strings (categorical) or of floats (continuous).
#[pyclass(module = "multical", frozen)]
struct Portfolio {
    inner: CorePortfolio,
}

#[pymethods]
impl Portfolio {
    #[new]
    #[pyo3(signature = (claims, exposure, sensitive=None))]
    fn new(claims: Vec<f64>, exposure: Vec<f64>, sensitive: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let mut inner = CorePortfolio::from_columns(claims, exposure).map_err(err)?;
        if let Some(s) = sensitive {
            let column = if let Ok(labels) = s.extract::<Vec<String>>() {
                SensitiveColumn::Categorical(Grouping::from_labels(&labels))
            } else {
                SensitiveColumn::Continuous(s.extract::<Vec<f64>>()?)
            };
            inner = inner.with_sensitive(column).map_err(err)?;
        }
        Ok(Portfolio { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn claims(&self) -> Vec<f64> {
        self.inner.claims().to_vec()
    }

    #[getter]
    fn exposure(&self) -> Vec<f64> {
        self.inner.exposure().to_vec()
    }

    #[getter]
    fn is_continuous(&self) -> bool {
        matches!(self.inner.sensitive(), Some(SensitiveColumn::Continuous(_)))
    }
}

/// A fitted correction.
#[pyclass(module = "multical", frozen)]
struct Model {
    body: ModelBody,
}

#[pymethods]
impl Model {
    #[getter]
    fn mode(&self) -> &'static str {
        self.body.mode_name()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.body.converged()
    }

    /// Stopping criterion per iteration; `None` for one-shot modes.
    #[getter]
    fn trace(&self) -> Option<Vec<f64>> {
        self.body.trace().map(<[f64]>::to_vec)
    }

    /// Replays the correction on `premium`.
    fn apply(&self, py: Python<'_>, portfolio: &Portfolio, premium: Vec<f64>) -> PyResult<Vec<f64>> {
        let p = self::premium(premium)?;
        let (out, _) = py.detach(|| self.body.apply(&portfolio.inner, &p)).map_err(err)?;
        Ok(out.into_inner())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.body).map_err(|e| err(e.into()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let body = serde_json::from_str(text).map_err(|e| err(e.into()))?;
        Ok(Model { body })
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={:?}, converged={})", self.body.mode_name(), self.body.converged())
    }
}

fn fitted(out: PremiumVector, body: ModelBody) -> (Vec<f64>, Model) {
    (out.into_inner(), Model { body })
}

fn grouping(p: &Portfolio) -> PyResult<&Grouping> {
    p.inner.grouping().map_err(err)
}

fn sensitive_values(p: &Portfolio) -> PyResult<&[f64]> {
    p.inner.sensitive_values().map_err(err)
}

/// Weighted isotonic (non-decreasing) regression; returns fitted values.
#[pyfunction]
fn isotonic_fit(x: Vec<f64>, y: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
    isotonic_fitted(&x, &y, &w).map(|(v, _)| v).map_err(err)
}

/// Isotonic recalibration of the frequency on the premium.
#[pyfunction]
fn balance_correct(portfolio: &Portfolio, premium: Vec<f64>) -> PyResult<(Vec<f64>, Model)> {
    let p = self::premium(premium)?;
    let (out, f) = core_bc(&portfolio.inner, &p).map_err(err)?;
    Ok(fitted(out, ModelBody::Bc(f)))
}

/// Isotonic recalibration within each level of a categorical sensitive column.
#[pyfunction]
#[pyo3(signature = (portfolio, premium, min_group_size=30))]
fn multibalance_correct(portfolio: &Portfolio, premium: Vec<f64>, min_group_size: usize) -> PyResult<(Vec<f64>, Model)> {
    let p = self::premium(premium)?;
    let (out, m) = core_mbc(&portfolio.inner, &p, grouping(portfolio)?, min_group_size).map_err(err)?;
    Ok(fitted(out, ModelBody::Mbc(m)))
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (portfolio, premium, bins=10, eta=0.2, credibility=100.0, tol=0.01, max_iterations=500, ignore_sensitive=false))]
fn iterate_categorical(
    py: Python<'_>,
    portfolio: &Portfolio,
    premium: Vec<f64>,
    bins: usize,
    eta: f64,
    credibility: f64,
    tol: f64,
    max_iterations: usize,
    ignore_sensitive: bool,
) -> PyResult<(Vec<f64>, Model)> {
    let p = self::premium(premium)?;
    let cfg = CalibrationConfig {
        bins,
        eta,
        credibility,
        tol,
        max_iterations,
        ..CalibrationConfig::default()
    };
    let constant;
    let group = if ignore_sensitive {
        constant = Grouping::constant(portfolio.inner.len(), "all");
        &constant
    } else {
        grouping(portfolio)?
    };
    let (out, m) = py
        .detach(|| iterate_multical_categorical(&portfolio.inner, &p, group, &cfg))
        .map_err(err)?;
    let body = if ignore_sensitive { ModelBody::AutoIter(m) } else { ModelBody::MultiIter(m) };
    Ok(fitted(out, body))
}

fn continuous_config(alpha: f64, eta: f64, credibility: f64, tol: f64, max_iterations: usize) -> ContinuousConfig {
    ContinuousConfig {
        alpha,
        eta,
        credibility,
        tol,
        max_iterations,
        ..ContinuousConfig::default()
    }
}

/// Local-regression recalibration of the frequency on the premium.
#[pyfunction]
#[pyo3(signature = (portfolio, premium, alpha=0.5))]
fn local_balance_correct(py: Python<'_>, portfolio: &Portfolio, premium: Vec<f64>, alpha: f64) -> PyResult<(Vec<f64>, Model)> {
    let p = self::premium(premium)?;
    let cfg = ContinuousConfig { alpha, ..ContinuousConfig::default() };
    let (out, m) = py.detach(|| core_local_bc(&portfolio.inner, &p, &cfg)).map_err(err)?;
    Ok(fitted(out, ModelBody::from_continuous(m)))
}

/// Joint local recalibration on premium and a continuous sensitive column,
/// centred so that the premium-only balance is kept.
#[pyfunction]
#[pyo3(signature = (portfolio, premium, alpha=0.5))]
fn local_multibalance_correct(py: Python<'_>, portfolio: &Portfolio, premium: Vec<f64>, alpha: f64) -> PyResult<(Vec<f64>, Model)> {
    let p = self::premium(premium)?;
    let s = sensitive_values(portfolio)?;
    let cfg = ContinuousConfig { alpha, ..ContinuousConfig::default() };
    let (out, m) = py
        .detach(|| mbc_bivariate_centered(&portfolio.inner, &p, s, &cfg))
        .map_err(err)?;
    Ok(fitted(out, ModelBody::from_continuous(m)))
}

#[pyfunction]
#[pyo3(signature = (portfolio, premium, alpha=0.5, eta=0.2, credibility=100.0, tol=0.01, max_iterations=500))]
fn iterate_continuous(
    py: Python<'_>,
    portfolio: &Portfolio,
    premium: Vec<f64>,
    alpha: f64,
    eta: f64,
    credibility: f64,
    tol: f64,
    max_iterations: usize,
) -> PyResult<(Vec<f64>, Model)> {
    let p = self::premium(premium)?;
    let s = sensitive_values(portfolio)?;
    let cfg = continuous_config(alpha, eta, credibility, tol, max_iterations);
    let (out, m) = py
        .detach(|| iterate_multical_continuous(&portfolio.inner, &p, s, &cfg))
        .map_err(err)?;
    Ok(fitted(out, ModelBody::from_continuous(m)))
}

#[pyfunction]
fn poisson_deviance(claims: Vec<f64>, exposure: Vec<f64>, premium: Vec<f64>) -> PyResult<f64> {
    metrics::poisson_deviance(&claims, &exposure, &premium).map_err(err)
}

#[pyfunction]
fn gini(premium: Vec<f64>, claims: Vec<f64>, exposure: Vec<f64>) -> PyResult<f64> {
    metrics::gini_coefficient(&premium, &claims, &exposure).map_err(err)
}

/// Deviance, Gini, balance gap and the max/mean absolute cell bias over
/// premium bins crossed with the sensitive groups. A continuous sensitive
/// column is cut into `s_bins` quantile groups.
#[pyfunction]
#[pyo3(signature = (portfolio, premium, bins=10, s_bins=10))]
fn evaluate<'py>(
    py: Python<'py>,
    portfolio: &Portfolio,
    premium: Vec<f64>,
    bins: usize,
    s_bins: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let pf = &portfolio.inner;
    let scheme = quantile_bins(&premium, pf.exposure(), bins).map_err(err)?;
    let group = match pf.sensitive() {
        Some(SensitiveColumn::Continuous(s)) => quantile_grouping(s, pf.exposure(), s_bins).map_err(err)?.0,
        Some(SensitiveColumn::Categorical(g)) => g.clone(),
        None => Grouping::constant(pf.len(), "all"),
    };
    let report = metrics::diagnose(pf, &premium, &scheme, &group, None).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("deviance", report.deviance)?;
    d.set_item("gini", report.gini)?;
    d.set_item("global_balance_gap", report.global_balance_gap)?;
    d.set_item("max_abs_bias", report.multical_error.max)?;
    d.set_item("mean_abs_bias", report.multical_error.mean)?;
    Ok(d)
}

/// Synthetic Poisson portfolio with a distorted baseline premium.
///
/// `levels=0` draws a continuous sensitive variable on (0, 20).
#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (n, seed=0, levels=4, beta_s=0.3, intercept=-2.0, power=1.0, drop_s=true))]
fn simulate<'py>(
    py: Python<'py>,
    n: usize,
    seed: u64,
    levels: usize,
    beta_s: f64,
    intercept: f64,
    power: f64,
    drop_s: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SynthConfig {
        n,
        seed,
        group_kind: if levels == 0 { GroupKind::Continuous } else { GroupKind::Categorical { levels } },
        intercept,
        beta_s,
        ..SynthConfig::default()
    };
    let synth = generate(&cfg).map_err(err)?;
    let spec = Distortion { scale: None, power, drop_s, drop_features: vec![] };
    let base = distorted_baseline(&synth, &spec).map_err(err)?;
    let pf = Portfolio { inner: synth.portfolio };
    let d = PyDict::new(py);
    d.set_item("premium", base.into_inner())?;
    d.set_item("true_mu", synth.true_mu.into_inner())?;
    d.set_item("portfolio", pf)?;
    Ok(d)
}

#[pymodule]
fn multical(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Portfolio>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(isotonic_fit, m)?)?;
    m.add_function(wrap_pyfunction!(balance_correct, m)?)?;
    m.add_function(wrap_pyfunction!(multibalance_correct, m)?)?;
    m.add_function(wrap_pyfunction!(iterate_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(local_balance_correct, m)?)?;
    m.add_function(wrap_pyfunction!(local_multibalance_correct, m)?)?;
    m.add_function(wrap_pyfunction!(iterate_continuous, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_deviance, m)?)?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
