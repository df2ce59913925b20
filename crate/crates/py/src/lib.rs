//! Python bindings: configuration, networks and checkpoints, the loss
//! functions, CMC scoring, synthetic data and training.
//!
//! Images cross the boundary as flat lists of floats in `[C, H, W]` order.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mtdnet::autodiff::gradcheck::CheckOptions;
use mtdnet::autodiff::ParamStore;
use mtdnet::checkpoint::Checkpoint;
use mtdnet::config::{net_config_from_text, net_config_to_text};
use mtdnet::evaluation::{self, ScoreMatrix};
use mtdnet::losses::{self, PairLabel};
use mtdnet::network::{self, ForwardMode, Variant};
use mtdnet::sampling::LabeledImage;
use mtdnet::synth::{self, SynthSpec};
use mtdnet::trainer::{self, TrainConfig};
use mtdnet::Tensor;

fn py_err(e: mtdnet::Error) -> PyErr {
    match e {
        mtdnet::Error::Io { .. } | mtdnet::Error::Image { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn label(y: u8) -> PyResult<PairLabel> {
    PairLabel::from_u8(y).map_err(py_err)
}

fn vec_tensor(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![n], v).expect("1-D shape matches length")
}

/// Network architecture plus loss settings.
#[pyclass(name = "NetConfig", module = "mtdnet", from_py_object)]
#[derive(Clone)]
struct PyNetConfig {
    inner: network::NetConfig,
}

#[pymethods]
impl PyNetConfig {
    #[staticmethod]
    fn desk() -> Self {
        PyNetConfig {
            inner: network::NetConfig::desk(),
        }
    }

    #[staticmethod]
    fn paper() -> Self {
        PyNetConfig {
            inner: network::NetConfig::paper(),
        }
    }

    /// Parses `key = value` text (the `net.*` and `loss.*` keys).
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyNetConfig {
            inner: net_config_from_text(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        net_config_to_text(&self.inner)
    }

    fn with_variant(&self, variant: &str) -> PyResult<Self> {
        Ok(PyNetConfig {
            inner: self.inner.clone().with_variant(Variant::parse(variant).map_err(py_err)?),
        })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.input_shape;
        (c, h, w)
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    fn trunk_output_shape(&self) -> PyResult<(usize, usize, usize)> {
        let [c, h, w] = self.inner.trunk_output_shape().map_err(py_err)?;
        Ok((c, h, w))
    }

    fn param_shapes(&self) -> PyResult<Vec<(String, Vec<usize>)>> {
        self.inner.param_shapes().map_err(py_err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("NetConfig(preset={}, variant={})", self.inner.preset.name(), self.inner.variant.name())
    }
}

/// A parameter set bound to its configuration.
#[pyclass(name = "Network", module = "mtdnet")]
struct PyNetwork {
    config: network::NetConfig,
    params: ParamStore<f32>,
}

impl PyNetwork {
    fn image(&self, data: Vec<f32>) -> PyResult<Tensor<f32>> {
        Tensor::new(self.config.input_shape.to_vec(), data).map_err(py_err)
    }
}

#[pymethods]
impl PyNetwork {
    /// Freshly initialised network.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: PyNetConfig, seed: u64) -> PyResult<Self> {
        let params = network::init_params(&config.inner, seed).map_err(py_err)?;
        Ok(PyNetwork {
            config: config.inner,
            params,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyNetwork {
            config: ck.net,
            params: ck.params,
        })
    }

    #[pyo3(signature = (path, seed = 0, epoch = 0))]
    fn save(&self, path: PathBuf, seed: u64, epoch: u32) -> PyResult<()> {
        Checkpoint {
            net: self.config.clone(),
            seed,
            epoch,
            params: self.params.clone(),
        }
        .save(&path)
        .map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyNetConfig {
        PyNetConfig {
            inner: self.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Flat values of one named parameter tensor.
    fn parameter(&self, name: &str) -> PyResult<Vec<f32>> {
        self.params
            .get(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no parameter '{name}'")))
    }

    /// Probability that the two images show the same person.
    fn similarity(&self, a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
        let mut net = network::Network::build(&self.config, ForwardMode::TestPair, self.params.clone()).map_err(py_err)?;
        net.forward_similarity(&self.image(a)?, &self.image(b)?).map_err(py_err)
    }

    fn embed(&self, a: Vec<f32>) -> PyResult<Vec<f32>> {
        let mut net = network::Network::build(&self.config, ForwardMode::EmbedOnly, self.params.clone()).map_err(py_err)?;
        Ok(net.forward_embedding(&self.image(a)?).map_err(py_err)?.into_data())
    }

    /// `(triplet, classification, combined)` for one triplet; absent terms are `None`.
    fn triplet_losses(&self, anchor: Vec<f32>, positive: Vec<f32>, negative: Vec<f32>) -> PyResult<(Option<f64>, Option<f64>, f64)> {
        let mut net =
            network::Network::build(&self.config, ForwardMode::TrainTriplet, self.params.clone()).map_err(py_err)?;
        let l = net
            .forward_triplet(&self.image(anchor)?, &self.image(positive)?, &self.image(negative)?)
            .map_err(py_err)?;
        Ok((l.triplet, l.classification, l.combined))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(preset={}, variant={}, parameters={})",
            self.config.preset.name(),
            self.config.variant.name(),
            self.params.num_scalars()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, alpha = 1.0))]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, alpha: f64) -> PyResult<f64> {
    losses::triplet_loss(&vec_tensor(anchor), &vec_tensor(positive), &vec_tensor(negative), alpha).map_err(py_err)
}

#[pyfunction]
fn classification_loss(probs: Vec<f64>, y: u8) -> PyResult<f64> {
    losses::classification_loss(&vec_tensor(probs), label(y)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, y, margin = 1.0))]
fn contrastive_loss(a: Vec<f64>, b: Vec<f64>, y: u8, margin: f64) -> PyResult<f64> {
    losses::contrastive_loss(&vec_tensor(a), &vec_tensor(b), label(y)?, margin).map_err(py_err)
}

#[pyfunction]
fn xnor_label(a: u8, b: u8) -> PyResult<u8> {
    Ok(losses::xnor_label(label(a)?, label(b)?).as_u8())
}

/// CMC accuracies for ranks 1..=gallery size; `matches[q]` is the gallery
/// index of query `q`'s true match. Ties count against the match.
#[pyfunction]
fn cmc(scores: Vec<Vec<f64>>, matches: Vec<usize>) -> PyResult<Vec<f64>> {
    Ok(evaluation::cmc(&ScoreMatrix::new(scores, matches).map_err(py_err)?).accuracies)
}

/// The two-case threshold-versus-ranking comparison as text.
#[pyfunction]
fn case_study() -> PyResult<(bool, String)> {
    let cs = evaluation::threshold_ranking_case_study().map_err(py_err)?;
    Ok((cs.holds(), cs.render()))
}

/// Synthetic two-camera images as `(pixels, person_id, camera_id)` tuples.
#[pyfunction]
#[pyo3(signature = (n_identities = 16, domain_shift = 0.3, seed = 0, size = 32, images_per_camera = 1))]
fn generate(
    n_identities: usize,
    domain_shift: f64,
    seed: u64,
    size: usize,
    images_per_camera: usize,
) -> PyResult<Vec<(Vec<f32>, u32, u8)>> {
    let data = synth::generate(&SynthSpec {
        n_identities,
        images_per_camera,
        image_size: [size, size],
        domain_shift,
        seed,
        ..SynthSpec::default()
    })
    .map_err(py_err)?;
    Ok(data.into_iter().map(|d| (d.image.into_data(), d.person_id, d.camera_id)).collect())
}

/// Trains `config` from its seeded initialisation on `(pixels, person_id,
/// camera_id)` samples; returns the network and per-epoch combined loss.
#[pyfunction]
#[pyo3(signature = (config, data, epochs = 5, seed = 0, learning_rate = 1e-3, batch_size = 16))]
fn train(
    py: Python<'_>,
    config: PyNetConfig,
    data: Vec<(Vec<f32>, u32, u8)>,
    epochs: usize,
    seed: u64,
    learning_rate: f64,
    batch_size: usize,
) -> PyResult<(PyNetwork, Vec<f64>)> {
    let net = config.inner;
    let shape = net.input_shape.to_vec();
    let data = data
        .into_iter()
        .map(|(px, pid, cam)| LabeledImage::new(Tensor::new(shape.clone(), px)?, pid, cam))
        .collect::<mtdnet::Result<Vec<_>>>()
        .map_err(py_err)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        learning_rate,
        batch_size,
        ..TrainConfig::default()
    };
    let out = py
        .detach(|| {
            let params = network::init_params(&net, seed)?;
            trainer::train_single(&net, params, &data, &cfg, None)
        })
        .map_err(py_err)?;
    let history = out.history.iter().map(|e| e.combined).collect();
    Ok((
        PyNetwork {
            config: net,
            params: out.params,
        },
        history,
    ))
}

/// Largest relative error of the finite-difference check on `config`.
#[pyfunction]
#[pyo3(signature = (config, seed = 0, alpha = 10.0))]
fn gradcheck(py: Python<'_>, config: PyNetConfig, seed: u64, alpha: f64) -> PyResult<(bool, f64)> {
    let mut cfg = config.inner;
    cfg.loss.alpha = alpha;
    let (r, _) = py
        .detach(|| network::gradcheck_network(&cfg, seed, &CheckOptions::default()))
        .map_err(py_err)?;
    Ok((r.passed(), r.max_rel_err()))
}

#[pymodule]
#[pyo3(name = "mtdnet")]
fn mtdnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(classification_loss, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(xnor_label, m)?)?;
    m.add_function(wrap_pyfunction!(cmc, m)?)?;
    m.add_function(wrap_pyfunction!(case_study, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
