//! Python bindings: synthetic data, pretraining, head fine-tuning,
//! active-learning curves and the scoring functions.

use std::path::PathBuf;

use afm_core::active::{self, ALConfig, ClassDistribution, OneHotLabel};
use afm_core::checkpoint;
use afm_core::contrastive::{self, ContrastiveBatch};
use afm_core::encoder::EncoderConfig;
use afm_core::error::Error;
use afm_core::heads::{HeadKind, Projection};
use afm_core::signal::{self, LabeledDataset, Origin, SignalWindow, SyntheticSpec};
use afm_core::train::{self, ModelCheckpoint, Splits, Strategy, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else if matches!(e, Error::Io { .. }) {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn windows(values: Vec<Vec<f64>>, labels: Option<&[usize]>) -> PyResult<Vec<SignalWindow>> {
    if let Some(l) = labels {
        if l.len() != values.len() {
            return Err(PyValueError::new_err(format!(
                "{} windows but {} labels",
                values.len(),
                l.len()
            )));
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let origin = Origin {
                source_id: "python".into(),
                start: i,
            };
            SignalWindow::new(v, labels.map(|l| l[i]), origin).map_err(py_err)
        })
        .collect()
}

fn dataset(values: Vec<Vec<f64>>, labels: &[usize]) -> PyResult<LabeledDataset> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let w = windows(values, Some(labels))?;
    LabeledDataset::new(w, num_classes, LabeledDataset::default_names(num_classes)).map_err(py_err)
}

fn distributions(rows: Vec<Vec<f64>>) -> PyResult<Vec<ClassDistribution>> {
    rows.into_iter()
        .map(|r| ClassDistribution::new(r).map_err(py_err))
        .collect()
}

fn matrix_rows(m: &afm_core::tensor::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Synthetic vibration windows and labels.
#[pyfunction]
#[pyo3(signature = (seed=0, num_classes=4, windows_per_class=500, noise_sigma=None, window_len=192))]
fn synth_dataset(
    seed: u64,
    num_classes: usize,
    windows_per_class: usize,
    noise_sigma: Option<f64>,
    window_len: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut spec = SyntheticSpec::with_classes(num_classes);
    spec.windows_per_class = windows_per_class;
    spec.window_len = window_len;
    if let Some(n) = noise_sigma {
        spec.noise_sigma = n;
    }
    let ds = signal::synth_generate(&spec, seed).map_err(py_err)?;
    let labels = ds.labels();
    Ok((ds.windows.into_iter().map(|w| w.values).collect(), labels))
}

/// Shannon entropy (nats) of a probability vector.
#[pyfunction]
fn shannon_entropy(probs: Vec<f64>) -> PyResult<f64> {
    Ok(active::shannon_entropy(&ClassDistribution::new(probs).map_err(py_err)?))
}

/// KL divergence from the one-hot `label` to `probs`.
#[pyfunction]
fn class_kl(label: usize, probs: Vec<f64>) -> PyResult<f64> {
    let p = ClassDistribution::new(probs).map_err(py_err)?;
    let q = OneHotLabel::new(label, p.num_classes()).map_err(py_err)?;
    Ok(active::class_kl(&q, &p))
}

/// Indices of the `count` highest-entropy rows.
#[pyfunction]
fn select_by_entropy(pool_probs: Vec<Vec<f64>>, count: usize) -> PyResult<Vec<usize>> {
    active::select_by_entropy(&distributions(pool_probs)?, count).map_err(py_err)
}

/// NT-Xent loss over paired views (rows are L2-normalized first).
#[pyfunction]
#[pyo3(signature = (z_a, z_b, temperature=0.1))]
fn nt_xent_loss(z_a: Vec<Vec<f64>>, z_b: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let batch = ContrastiveBatch {
        z_a: z_a.into_iter().map(Projection::normalized).collect(),
        z_b: z_b.into_iter().map(Projection::normalized).collect(),
        temperature,
    };
    contrastive::nt_xent_loss(&batch).map_err(py_err)
}

/// A pretrained encoder with its projection head and, after `finetune`, a
/// classifier head.
#[pyclass(module = "afm")]
struct Backbone {
    inner: ModelCheckpoint,
}

#[pymethods]
impl Backbone {
    #[staticmethod]
    #[pyo3(signature = (
        windows, *, seed=0, epochs=10, d_model=32, num_blocks=2, num_heads=4,
        proj_dim=64, batch_size=64, temperature=0.1,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn pretrain(
        windows: Vec<Vec<f64>>,
        seed: u64,
        epochs: usize,
        d_model: usize,
        num_blocks: usize,
        num_heads: usize,
        proj_dim: usize,
        batch_size: usize,
        temperature: f64,
    ) -> PyResult<Self> {
        let window_len = windows.first().map_or(0, Vec::len);
        let enc = EncoderConfig {
            window_len,
            d_model,
            num_blocks,
            num_heads,
            proj_dim,
            ..Default::default()
        };
        let cfg = TrainConfig {
            seed,
            pretrain_epochs: epochs,
            batch_size,
            temperature,
            ..Default::default()
        };
        let w = self::windows(windows, None)?;
        let inner = train::pretrain_backbone(&w, &enc, &cfg).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    /// Per-epoch pretraining losses.
    #[getter]
    fn pretrain_losses(&self) -> Vec<f64> {
        self.inner.losses("pretrain")
    }

    #[getter]
    fn backbone_hash(&self) -> u64 {
        self.inner.model.backbone_hash()
    }

    /// Frozen-backbone embeddings, one row per window.
    fn embed(&self, windows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let w = self::windows(windows, None)?;
        Ok(matrix_rows(&self.inner.model.embed(&w).map_err(py_err)?))
    }

    /// A copy with a new classifier head trained on the labeled windows;
    /// the backbone itself is not modified.
    #[pyo3(signature = (windows, labels, *, head="mlp", min_steps=200, seed=0))]
    fn finetune(
        &self,
        windows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        head: &str,
        min_steps: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: HeadKind = head.parse().map_err(py_err)?;
        let ds = dataset(windows, &labels)?;
        let cfg = TrainConfig {
            seed,
            head_kind: kind,
            head_min_steps: min_steps,
            ..Default::default()
        };
        let inner = train::train_head(&self.inner, &ds.windows, ds.num_classes, &cfg).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn predict_proba(&self, windows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let w = self::windows(windows, None)?;
        Ok(matrix_rows(&self.inner.model.predict_proba(&w).map_err(py_err)?))
    }

    fn predict(&self, windows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let w = self::windows(windows, None)?;
        self.inner.model.predict(&w).map_err(py_err)
    }

    /// Learning curve of the active-learning (`"al"`) or random arm on a
    /// stratified 60/20/20 split of the labeled windows.
    #[pyo3(signature = (windows, labels, *, strategy="al", rounds=5, seed=0, min_steps=200))]
    #[allow(clippy::too_many_arguments)]
    fn al_curve<'py>(
        &self,
        py: Python<'py>,
        windows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        strategy: &str,
        rounds: usize,
        seed: u64,
        min_steps: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let strategy: Strategy = strategy.parse().map_err(py_err)?;
        let ds = dataset(windows, &labels)?;
        let (train, val, test) = signal::split_dataset(&ds, (0.6, 0.2, 0.2), seed).map_err(py_err)?;
        let splits = Splits { train, val, test };
        let al = ALConfig {
            rounds,
            seed,
            ..Default::default()
        };
        let cfg = TrainConfig {
            seed,
            head_min_steps: min_steps,
            ..Default::default()
        };
        let run = train::al_training_loop(&self.inner, &splits, &al, &cfg, strategy).map_err(py_err)?;
        run.curve
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("round", p.round)?;
                d.set_item("label_fraction", p.label_fraction)?;
                d.set_item("labeled", p.labeled)?;
                d.set_item("oracle_count", p.oracle_count)?;
                d.set_item("val_accuracy", p.val_accuracy)?;
                d.set_item("test_accuracy", p.test_accuracy)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn afm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(class_kl, m)?)?;
    m.add_function(wrap_pyfunction!(select_by_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent_loss, m)?)?;
    m.add_class::<Backbone>()?;
    Ok(())
}
