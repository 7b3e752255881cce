//! Python bindings for the `sdca` library.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sdca::bank::{batch_stats, ClassStats, CovarianceMode, DistributionBank, SpaceTag};
use sdca::contrastive::{self, Temperature};
use sdca::experiment;
use sdca::maps::{LabelMap, VectorMap};
use sdca::metrics::{self, ConfusionMatrix};
use sdca::numeric::{rng_from_seed, Mat};
use sdca::seg_loss;
use sdca::SdcaError;

fn err(e: SdcaError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn class_stats(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<ClassStats> {
    let cov = Mat::from_rows(&cov).map_err(err)?;
    Ok(ClassStats { count: 1, mean, cov })
}

fn negatives(means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<ClassStats>> {
    if means.len() != covs.len() {
        return Err(PyValueError::new_err("neg_means and neg_covs differ in length"));
    }
    means.into_iter().zip(covs).map(|(m, c)| class_stats(m, c)).collect()
}

/// Per-class running mean and covariance.
#[pyclass(name = "DistributionBank")]
struct PyBank {
    inner: DistributionBank,
}

#[pymethods]
impl PyBank {
    #[new]
    #[pyo3(signature = (num_classes, dim, diagonal = false))]
    fn new(num_classes: usize, dim: usize, diagonal: bool) -> PyResult<Self> {
        let mode = if diagonal { CovarianceMode::Diagonal } else { CovarianceMode::Full };
        let inner = DistributionBank::new(num_classes, dim, SpaceTag::Feature, mode).map_err(err)?;
        Ok(PyBank { inner })
    }

    /// Merge one batch of labeled vectors.
    fn update(&mut self, vectors: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<()> {
        if vectors.len() != labels.len() {
            return Err(PyValueError::new_err("vectors and labels differ in length"));
        }
        for k in 0..self.inner.num_classes() {
            let members: Vec<&[f64]> = vectors
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == k)
                .map(|(v, _)| v.as_slice())
                .collect();
            if members.is_empty() {
                continue;
            }
            let b = batch_stats(members.iter().copied()).map_err(err)?;
            self.inner.merge_batch(k, &b).map_err(err)?;
        }
        Ok(())
    }

    fn count(&self, k: usize) -> u64 {
        self.inner.class(k).count
    }

    fn mean(&self, k: usize) -> Vec<f64> {
        self.inner.class(k).mean.clone()
    }

    fn covariance(&self, k: usize) -> Vec<Vec<f64>> {
        let c = &self.inner.class(k).cov;
        (0..c.dim()).map(|i| c.row(i).to_vec()).collect()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Closed-form bound and its gradient with respect to `q`.
#[pyfunction]
fn closed_form_bound(
    q: Vec<f64>,
    pos_mean: Vec<f64>,
    pos_cov: Vec<Vec<f64>>,
    neg_means: Vec<Vec<f64>>,
    neg_covs: Vec<Vec<Vec<f64>>>,
    tau: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let pos = class_stats(pos_mean, pos_cov)?;
    let negs = negatives(neg_means, neg_covs)?;
    let refs: Vec<&ClassStats> = negs.iter().collect();
    contrastive::closed_form_bound(&q, &pos, &refs, Temperature::new(tau).map_err(err)?).map_err(err)
}

/// Monte-Carlo expected loss; returns `(estimate, std_error)`.
#[pyfunction]
#[pyo3(signature = (q, pos_mean, pos_cov, neg_means, neg_covs, tau, n_samples = 100_000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn mc_expected_loss(
    q: Vec<f64>,
    pos_mean: Vec<f64>,
    pos_cov: Vec<Vec<f64>>,
    neg_means: Vec<Vec<f64>>,
    neg_covs: Vec<Vec<Vec<f64>>>,
    tau: f64,
    n_samples: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let pos = class_stats(pos_mean, pos_cov)?;
    let negs = negatives(neg_means, neg_covs)?;
    let refs: Vec<&ClassStats> = negs.iter().collect();
    let mut rng = rng_from_seed(seed);
    let r = contrastive::mc_expected_loss(&q, &pos, &refs, Temperature::new(tau).map_err(err)?, n_samples, &mut rng)
        .map_err(err)?;
    Ok((r.estimate, r.std_error))
}

/// Lovász-Softmax of per-pixel scores (`H*W` rows of `K` logits) against labels.
#[pyfunction]
fn lovasz_softmax(height: usize, width: usize, scores: Vec<Vec<f64>>, labels: Vec<u8>) -> PyResult<f64> {
    let k = scores.first().map_or(0, Vec::len);
    let map = VectorMap::from_data(height, width, k, scores.concat()).map_err(err)?;
    let lab = LabelMap::from_labels(height, width, labels).map_err(err)?;
    Ok(seg_loss::lovasz_softmax(&map, &lab).map_err(err)?.value)
}

/// Per-class IoU (`None` for empty unions) and mIoU.
#[pyfunction]
fn iou(truth: Vec<u8>, pred: Vec<u8>, num_classes: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let n = truth.len();
    let t = LabelMap::from_labels(1, n, truth).map_err(err)?;
    let p = LabelMap::from_labels(1, n, pred).map_err(err)?;
    let mut c = ConfusionMatrix::new(num_classes);
    c.accumulate(&t, &p).map_err(err)?;
    let r = metrics::iou(&c);
    Ok((r.per_class, r.miou))
}

/// Experiment configuration in `key = value` form.
#[pyclass(name = "ExperimentConfig")]
struct PyConfig {
    inner: experiment::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => experiment::ExperimentConfig::parse(t).map_err(err)?,
            None => experiment::ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Train and evaluate; returns the run summary as JSON.
    fn run(&self) -> PyResult<String> {
        let art = experiment::run(&self.inner).map_err(err)?;
        serde_json::to_string(&art.summary).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Numerical self-checks; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (seed = 0, quick = true))]
fn certify(seed: u64, quick: bool) -> PyResult<String> {
    let scale = if quick { sdca::certify::CertScale::quick() } else { sdca::certify::CertScale::full() };
    let r = sdca::certify::certify(seed, scale).map_err(err)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn sdca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBank>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(closed_form_bound, m)?)?;
    m.add_function(wrap_pyfunction!(mc_expected_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lovasz_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    Ok(())
}
