//! Python bindings. Tensors cross the boundary as flat `list[float]` plus a shape.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use sf_nn::Tensor;
use siftfunnel::datahub::synth_dataset;
use siftfunnel::defenselosses::{distance_correlation, pearson_channel_loss};
use siftfunnel::harness::transport::{Dtype, FeatureFrame};
use siftfunnel::harness::Target;
use siftfunnel::infometrics::{dmia_score, estimate_mi_flagged, fano_lower_bound, train_mine, GaussianPairs, MineConfig};
use siftfunnel::inversion::total_variation;
use siftfunnel::quality::{image_metrics, psnr};
use siftfunnel::splitmodels::{
    build_backbone, build_siftfunnel_edge, param_count, split_at, tap, BackboneConfig, BackboneKind, DefenseSpec, FeatureMap, TapPoint,
};

fn err(e: siftfunnel::Error) -> PyErr {
    match e {
        siftfunnel::Error::Validation(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_tap(s: &str) -> PyResult<TapPoint> {
    match s {
        "edge_output" => Ok(TapPoint::EdgeOutput),
        "post_compensation" => Ok(TapPoint::PostCompensation),
        o => Err(PyValueError::new_err(format!("unknown tap point '{o}'"))),
    }
}

/// A split classifier: edge and cloud halves.
#[pyclass(name = "SplitModel")]
struct PySplitModel {
    inner: siftfunnel::splitmodels::SplitModel,
}

#[pymethods]
impl PySplitModel {
    #[new]
    #[pyo3(signature = (backbone="base_cnn", classes=10, resolution=(32, 32), width=1.0, seed=0, split_point=None, siftfunnel=false))]
    fn new(
        backbone: &str,
        classes: usize,
        resolution: (usize, usize),
        width: f64,
        seed: u64,
        split_point: Option<&str>,
        siftfunnel: bool,
    ) -> PyResult<Self> {
        let kind = BackboneKind::parse(backbone).map_err(err)?;
        let cfg = BackboneConfig::new(kind, classes, resolution).with_width(width).with_seed(seed);
        let mut m = build_backbone(&cfg).map_err(err)?;
        if let Some(p) = split_point {
            m = split_at(m, p).map_err(err)?;
        }
        if siftfunnel {
            m = build_siftfunnel_edge(m, &DefenseSpec::default()).map_err(err)?;
        }
        Ok(Self { inner: m })
    }

    /// Loads a checkpoint directory written by the trainer.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self { inner: Target::load(dir.as_ref()).map_err(err)?.model })
    }

    fn edge_params(&self) -> usize {
        param_count(&self.inner.edge)
    }

    fn cloud_params(&self) -> usize {
        param_count(&self.inner.cloud)
    }

    fn edge_blocks(&self) -> Vec<String> {
        self.inner.edge.names().into_iter().map(String::from).collect()
    }

    fn feature_shape(&self) -> (usize, usize, usize) {
        self.inner.feature_shape()
    }

    /// Intercepted features for an image batch `(n, c, h, w)`.
    #[pyo3(signature = (images, shape, point="edge_output"))]
    fn tap(&self, images: Vec<f64>, shape: Vec<usize>, point: &str) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let z = tap(&self.inner, &tensor(images, shape)?, parse_tap(point)?).map_err(err)?;
        let s = z.values().shape().to_vec();
        Ok((z.into_tensor().into_data(), s))
    }

    fn logits(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let x = tensor(images, shape)?;
        if x.ndim() != 4 || x.shape()[1..] != [self.inner.input_shape().0, self.inner.input_shape().1, self.inner.input_shape().2] {
            return Err(PyValueError::new_err(format!("images {:?} do not match the model input", x.shape())));
        }
        let l = self.inner.logits(&x);
        let s = l.shape().to_vec();
        Ok((l.into_data(), s))
    }
}

/// Seeded synthetic images: returns `(pixels, shape, labels)`.
#[pyfunction]
#[pyo3(signature = (n, resolution=(32, 32), classes=10, seed=0))]
fn synthetic_images(n: usize, resolution: (usize, usize), classes: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let ds = synth_dataset(n, resolution, classes, seed).map_err(err)?;
    let x = ds.all_images();
    let s = x.shape().to_vec();
    Ok((x.into_data(), s, ds.labels().to_vec()))
}

#[pyfunction]
fn dcor(x: Vec<f64>, x_shape: Vec<usize>, z: Vec<f64>, z_shape: Vec<usize>) -> PyResult<f64> {
    distance_correlation(&tensor(x, x_shape)?, &tensor(z, z_shape)?).map_err(err)
}

#[pyfunction]
fn pearson_loss(z: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    let fm = FeatureMap::new(tensor(z, shape)?).map_err(err)?;
    pearson_channel_loss(&fm).map_err(err)
}

#[pyfunction]
fn tv(x: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    total_variation(&tensor(x, shape)?).map_err(err)
}

#[pyfunction]
fn psnr_db(mse: f64) -> f64 {
    psnr(mse)
}

/// `(mse, psnr_db, ssim)` between two image batches.
#[pyfunction]
fn quality(recon: Vec<f64>, target: Vec<f64>, shape: Vec<usize>) -> PyResult<(f64, f64, f64)> {
    let m = image_metrics(&tensor(recon, shape.clone())?, &tensor(target, shape)?).map_err(err)?;
    Ok((m.mse, m.psnr_db, m.ssim))
}

/// MINE estimate on a correlated Gaussian pair; returns `(estimate, truth, saturated)`.
#[pyfunction]
#[pyo3(signature = (rho, seed=0, steps=2000, dim=1))]
fn mine_gaussian(rho: f64, seed: u64, steps: usize, dim: usize) -> PyResult<(f64, f64, bool)> {
    let cfg = MineConfig { steps, seed, ..MineConfig::default() };
    let mut train = GaussianPairs::new(dim, rho, seed);
    let truth = train.true_mi();
    let est = train_mine(&mut train, &cfg).map_err(err)?;
    let r = estimate_mi_flagged(&est, &mut GaussianPairs::new(dim, rho, seed ^ 0xE7A1)).map_err(err)?;
    Ok((r.nats, truth, r.saturated))
}

/// `(bound, vacuous)`.
#[pyfunction]
fn fano(h_x: f64, h_z: f64, log_card_x: f64) -> PyResult<(f64, bool)> {
    let f = fano_lower_bound(h_x, h_z, log_card_x).map_err(err)?;
    Ok((f.value, f.vacuous))
}

/// `(score, degenerate)`.
#[pyfunction]
#[pyo3(signature = (h_x_given_z, h_z, delta_z, k1=1.0, k2=1.0))]
fn dmia(h_x_given_z: f64, h_z: f64, delta_z: f64, k1: f64, k2: f64) -> (f64, bool) {
    let d = dmia_score(h_x_given_z, h_z, delta_z, k1, k2);
    (d.value, d.degenerate)
}

/// Serialises a feature batch as a wire frame.
#[pyfunction]
#[pyo3(signature = (values, shape, dtype="f32"))]
fn encode_frame<'py>(py: Python<'py>, values: Vec<f64>, shape: Vec<usize>, dtype: &str) -> PyResult<Bound<'py, PyBytes>> {
    let dt = match dtype {
        "f32" => Dtype::F32,
        "f16" => Dtype::F16,
        o => return Err(PyValueError::new_err(format!("unknown dtype '{o}'"))),
    };
    let f = FeatureFrame::from_tensor(&tensor(values, shape)?, dt).map_err(err)?;
    Ok(PyBytes::new(py, &f.to_bytes()))
}

#[pyfunction]
fn decode_frame(bytes: &[u8]) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let t = FeatureFrame::from_bytes(bytes).and_then(|f| f.to_tensor()).map_err(err)?;
    let s = t.shape().to_vec();
    Ok((t.into_data(), s))
}

#[pymodule]
fn siftfunnel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySplitModel>()?;
    m.add_function(wrap_pyfunction!(synthetic_images, m)?)?;
    m.add_function(wrap_pyfunction!(dcor, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tv, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_db, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    m.add_function(wrap_pyfunction!(mine_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(fano, m)?)?;
    m.add_function(wrap_pyfunction!(dmia, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    Ok(())
}
