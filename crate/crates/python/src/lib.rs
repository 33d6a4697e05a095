//! Python bindings: datasets, model configs, training, checkpoints and
//! evaluation.

use std::path::PathBuf;

use edgeformer::baselines::{init_baseline, BaselineKind};
use edgeformer::data::{self, DatasetSpec, EdgeRecord, FeatureStats, FeatureWidths};
use edgeformer::eval::{self, Scorer};
use edgeformer::gradcheck::model_grad_check;
use edgeformer::model::mae::{init_mae, transfer_encoder};
use edgeformer::model::transformer::init_classifier;
use edgeformer::training::{self, ModelKind, TrainConfig, TrainMode};
use edgeformer::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::Io { .. } | Error::Checkpoint(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for edgeformer::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// A set of edges with head, edge and tail features.
#[pyclass(module = "edgeformer_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic dataset from the planted return model.
    #[staticmethod]
    #[pyo3(signature = (n_heads, seed=0, candidates=10, widths=(16, 4, 16), unlabeled_fraction=0.0, latent_dim=0, latent_strength=0.8))]
    fn generate(
        n_heads: usize,
        seed: u64,
        candidates: usize,
        widths: (usize, usize, usize),
        unlabeled_fraction: f64,
        latent_dim: usize,
        latent_strength: f64,
    ) -> PyResult<Self> {
        let spec = DatasetSpec {
            n_heads,
            candidates_min: candidates,
            candidates_max: candidates,
            widths: FeatureWidths {
                head: widths.0,
                edge: widths.1,
                tail: widths.2,
            },
            unlabeled_fraction,
            latent_dim,
            latent_strength,
            seed,
            ..DatasetSpec::default()
        };
        Ok(Dataset {
            inner: data::generate_dataset(&spec).py()?,
        })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: data::load_csv(&path, None).py()?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        data::save_csv(&self.inner, &path).py()
    }

    /// `(train, val)` split by head.
    #[pyo3(signature = (ratio=0.8, seed=0))]
    fn split(&self, ratio: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = data::split_dataset(&self.inner, ratio, seed).py()?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    fn labeled(&self) -> Dataset {
        Dataset {
            inner: self.inner.labeled(),
        }
    }

    fn unlabeled(&self) -> Dataset {
        Dataset {
            inner: self.inner.unlabeled(),
        }
    }

    /// `(head, edge, tail)` feature widths.
    #[getter]
    fn widths(&self) -> (usize, usize, usize) {
        let w = self.inner.widths;
        (w.head, w.edge, w.tail)
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.head_ids().len()
    }

    /// Labels as 1, 0 or -1.
    fn labels(&self) -> Vec<i8> {
        self.inner
            .edges
            .iter()
            .map(|e| match e.label {
                data::Label::Positive => 1,
                data::Label::Negative => 0,
                data::Label::Unlabeled => -1,
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let w = self.inner.widths;
        format!(
            "Dataset(edges={}, heads={}, widths=({}, {}, {}))",
            self.inner.len(),
            self.n_heads(),
            w.head,
            w.edge,
            w.tail
        )
    }
}

/// Edge Transformer architecture.
#[pyclass(module = "edgeformer_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct ModelConfig {
    inner: edgeformer::model::ModelConfig,
}

#[pymethods]
impl ModelConfig {
    #[new]
    #[pyo3(signature = (widths, d_model=48, n_heads=3, n_encoder_layers=2, n_decoder_layers=1, ffn_dim=None, mask_ratio=1.0/3.0, dropout=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        widths: (usize, usize, usize),
        d_model: usize,
        n_heads: usize,
        n_encoder_layers: usize,
        n_decoder_layers: usize,
        ffn_dim: Option<usize>,
        mask_ratio: f64,
        dropout: f64,
    ) -> PyResult<Self> {
        let inner = edgeformer::model::ModelConfig {
            d_model,
            n_heads,
            n_encoder_layers,
            n_decoder_layers,
            ffn_dim: ffn_dim.unwrap_or(4 * d_model),
            dim_head_features: widths.0,
            dim_edge_features: widths.1,
            dim_tail_features: widths.2,
            mask_ratio,
            dropout,
        };
        inner.validate().py()?;
        Ok(ModelConfig { inner })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads
    }

    /// Parameter count of the classifier.
    fn param_count(&self) -> usize {
        self.inner.classifier_param_count()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Trained parameters with their config, feature statistics and loss trace.
#[pyclass(module = "edgeformer_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: training::Checkpoint,
    trace: Vec<f64>,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: training::Checkpoint::load(&path).py()?,
            trace: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().py()
    }

    /// `mae`, `classifier` or the baseline name.
    #[getter]
    fn kind(&self) -> String {
        match &self.inner.kind {
            ModelKind::Mae => "mae".into(),
            ModelKind::Classifier => "classifier".into(),
            ModelKind::Baseline(n) => n.clone(),
        }
    }

    /// Mean training loss per epoch (empty for loaded checkpoints).
    #[getter]
    fn trace(&self) -> Vec<f64> {
        self.trace.clone()
    }

    #[getter]
    fn config(&self) -> ModelConfig {
        ModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.numel()
    }

    /// Scores (logits) for every edge of `data`.
    fn scores(&self, py: Python<'_>, data: &Dataset) -> PyResult<Vec<f64>> {
        let scorer = Scorer::from_checkpoint(&self.inner).py()?;
        let edges: Vec<&EdgeRecord> = data.inner.edges.iter().collect();
        py.detach(|| scorer.scores(&edges)).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(kind={}, params={}, epoch={}, loss={:.6})",
            self.kind(),
            self.n_params(),
            self.inner.meta.epoch,
            self.inner.meta.loss
        )
    }
}

fn train_config(mode: TrainMode, epochs: Option<usize>, lr: Option<f64>, batch_size: Option<usize>, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::for_mode(mode);
    t.seed = seed;
    if let Some(e) = epochs {
        t.epochs = e;
    }
    if let Some(lr) = lr {
        t.optim.learning_rate = lr;
    }
    if let Some(b) = batch_size {
        t.batch_size = b;
    }
    t
}

fn wrap(run: training::TrainRun) -> Checkpoint {
    Checkpoint {
        inner: run.checkpoint,
        trace: run.trace,
    }
}

/// Masked-autoencoder pre-training; labels are ignored.
#[pyfunction]
#[pyo3(signature = (data, config, epochs=None, lr=None, batch_size=None, seed=0))]
fn pretrain(
    py: Python<'_>,
    data: &Dataset,
    config: &ModelConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: u64,
) -> PyResult<Checkpoint> {
    let t = train_config(TrainMode::Pretrain, epochs, lr, batch_size, seed);
    let (d, cfg) = (&data.inner, &config.inner);
    py.detach(|| {
        let stats = FeatureStats::fit(d);
        let init = init_mae(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        training::pretrain_loop(d, &stats, cfg, &t, init)
    })
    .py()
    .map(wrap)
}

/// Fine-tunes the classifier on the labeled edges of `data`, from a
/// pre-trained checkpoint when `init` is given.
#[pyfunction]
#[pyo3(signature = (data, config=None, init=None, epochs=None, lr=None, batch_size=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    data: &Dataset,
    config: Option<&ModelConfig>,
    init: Option<&Checkpoint>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: u64,
) -> PyResult<Checkpoint> {
    let t = train_config(TrainMode::Finetune, epochs, lr, batch_size, seed);
    let d = data.inner.labeled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cfg, stats, params) = match (init, config) {
        (Some(c), _) => {
            if c.inner.kind != ModelKind::Mae {
                return Err(PyValueError::new_err("init must be a pre-training checkpoint"));
            }
            let params = transfer_encoder(&c.inner.params, &c.inner.config, &mut rng).py()?;
            (c.inner.config.clone(), c.inner.stats.clone(), params)
        }
        (None, Some(cfg)) => {
            let params = init_classifier(&cfg.inner, &mut rng).py()?;
            (cfg.inner.clone(), FeatureStats::fit(&d), params)
        }
        (None, None) => return Err(PyValueError::new_err("pass config or init")),
    };
    py.detach(|| training::finetune_loop(&d, &stats, &cfg, &t, params)).py().map(wrap)
}

/// Trains a baseline: edge_mlp, bilinear, distmult, transe or convkb.
#[pyfunction]
#[pyo3(signature = (kind, data, config, epochs=None, lr=None, batch_size=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_baseline(
    py: Python<'_>,
    kind: &str,
    data: &Dataset,
    config: &ModelConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: u64,
) -> PyResult<Checkpoint> {
    let kind: BaselineKind = kind.parse().py()?;
    let t = train_config(TrainMode::Baseline(kind), epochs, lr, batch_size, seed);
    let d = data.inner.labeled();
    let cfg = &config.inner;
    py.detach(|| {
        let stats = FeatureStats::fit(&d);
        let init = init_baseline(kind, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        training::baseline_loop(&d, &stats, cfg, kind, &t, init)
    })
    .py()
    .map(wrap)
}

/// Ranking report of a checkpoint, or of the intimacy column when `model`
/// is the string "intimacy".
#[pyfunction]
#[pyo3(signature = (model, data, seed=0))]
fn evaluate<'py>(py: Python<'py>, model: &Bound<'py, PyAny>, data: &Dataset, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let scorer = if let Ok(c) = model.cast::<Checkpoint>() {
        Scorer::from_checkpoint(&c.get().inner).py()?
    } else if model.extract::<String>().is_ok_and(|s| s == "intimacy") {
        Scorer::Intimacy { index: 0 }
    } else {
        return Err(PyValueError::new_err("model must be a Checkpoint or 'intimacy'"));
    };
    let d = &data.inner;
    let r = py.detach(|| eval::evaluate(&scorer, d, seed)).py()?;
    let out = PyDict::new(py);
    out.set_item("hits1", r.hits1)?;
    out.set_item("hits3", r.hits3)?;
    out.set_item("hits5", r.hits5)?;
    out.set_item("hits10", r.hits10)?;
    out.set_item("mr", r.mr)?;
    out.set_item("mrr", r.mrr)?;
    out.set_item("top5_back", r.top5_back)?;
    out.set_item("top10_back", r.top10_back)?;
    out.set_item("n_groups", r.n_groups)?;
    out.set_item("seed", r.seed)?;
    out.set_item("model", r.model)?;
    Ok(out)
}

/// Two-sided paired t-test of `a - b`: `(t, p)`, with `p` None when the
/// differences are constant and non-zero.
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, Option<f64>)> {
    let r = eval::paired_t_test(&a, &b).py()?;
    Ok((r.t, r.p))
}

/// Central-difference gradient check of the classifier and MAE losses.
#[pyfunction]
#[pyo3(signature = (config, batch=4, seed=0))]
fn grad_check<'py>(py: Python<'py>, config: &ModelConfig, batch: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = model_grad_check(&config.inner, batch, seed, 1e-5).py()?;
    let out = PyDict::new(py);
    out.set_item("classifier", r.classifier)?;
    out.set_item("mae", r.mae)?;
    out.set_item("checked", r.checked)?;
    Ok(out)
}

#[pymodule]
fn edgeformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<ModelConfig>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
