//! Python bindings exposing the toolkit's main types and operations.
//!
//! Build with `cargo build -p poisonforge-python --release`, then rename
//! `libpoisonforge_py.so` to `poisonforge_py.so` somewhere on the Python
//! path (or use maturin). `python/smoke_test.py` at the repo root does this
//! automatically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use poisonforge::defense::cleanse;
use poisonforge::defense::nad;
use poisonforge::defense::strip;
use poisonforge::fixtures;
use poisonforge::generate::{render_prompt as core_render_prompt, PoisonCandidate, PromptKind};
use poisonforge::manifest::DatasetManifest;
use poisonforge::nn::tensor::Tensor3;
use poisonforge::nn::{Classifier, NeuralNet};
use poisonforge::pipeline;
use poisonforge::select;
use poisonforge::suggest;
use poisonforge::trainer;

fn to_py_err(err: poisonforge::Error) -> PyErr {
    if err.is_config() {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

/// A loaded dataset manifest.
#[pyclass(name = "Manifest")]
struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyManifest {
            inner: DatasetManifest::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn poisoned_count(&self) -> usize {
        self.inner.entries.iter().filter(|e| e.poisoned).count()
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .entries
            .iter()
            .map(|entry| {
                let d = PyDict::new(py);
                d.set_item("image_id", &entry.image_id)?;
                d.set_item("uri", &entry.uri)?;
                d.set_item("label", entry.label)?;
                d.set_item("split", entry.split.to_string())?;
                d.set_item("poisoned", entry.poisoned)?;
                d.set_item("trigger", entry.trigger.clone())?;
                d.set_item("score", entry.score)?;
                Ok(d)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

/// A trained classifier checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: NeuralNet,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: NeuralNet::load(&path).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch.clone()
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names()
    }

    /// Predict the class of a flat CHW pixel array in [0,1].
    fn predict(&self, pixels: Vec<f64>, channels: usize, height: usize, width: usize) -> PyResult<usize> {
        if pixels.len() != channels * height * width {
            return Err(PyValueError::new_err("pixel buffer does not match shape"));
        }
        Ok(self
            .inner
            .predict(&Tensor3::from_vec(channels, height, width, pixels)))
    }
}

/// Render the synthetic fixture dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, classes=5, per_class=400, val_per_class=100, real_per_class=100, size=64, seed=7))]
fn make_fixtures(
    out_dir: PathBuf,
    classes: usize,
    per_class: usize,
    val_per_class: usize,
    real_per_class: usize,
    size: usize,
    seed: u64,
) -> PyResult<String> {
    fixtures::make_desk_dataset(
        &out_dir,
        classes,
        per_class,
        val_per_class,
        real_per_class,
        size,
        seed,
    )
    .map_err(to_py_err)?;
    Ok(out_dir.join("manifest.jsonl").display().to_string())
}

/// Normalize a raw VQA answer into at most k object names.
#[pyfunction]
#[pyo3(signature = (raw, k=5))]
fn normalize_answer(raw: &str, k: usize) -> Vec<String> {
    suggest::normalize_answer(raw, k)
}

/// Compatibility band ("low" | "moderate" | "high") for a frequency.
#[pyfunction]
fn band(frequency: f64) -> PyResult<&'static str> {
    match suggest::band(frequency).map_err(to_py_err)? {
        suggest::Band::Low => Ok("low"),
        suggest::Band::Moderate => Ok("moderate"),
        suggest::Band::High => Ok("high"),
    }
}

/// Instantiate one of the prompt templates ("edit" | "generate" | "select").
#[pyfunction]
fn render_prompt(kind: &str, fields: BTreeMap<String, String>) -> PyResult<String> {
    let kind = match kind {
        "edit" => PromptKind::Edit,
        "generate" => PromptKind::Generate,
        "select" => PromptKind::Select,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown prompt kind `{other}`"
            )))
        }
    };
    core_render_prompt(kind, &fields).map_err(to_py_err)
}

/// Rank `(candidate_id, score)` pairs and keep the top k ids.
#[pyfunction]
#[pyo3(signature = (scored, k, min_score=None))]
fn select_top_k(scored: Vec<(String, f64)>, k: usize, min_score: Option<f64>) -> PyResult<Vec<String>> {
    let candidates: Vec<PoisonCandidate> = scored
        .into_iter()
        .map(|(candidate_id, score)| PoisonCandidate {
            uri: format!("{candidate_id}.png"),
            candidate_id,
            origin: poisonforge::generate::CandidateOrigin::Generated,
            prompt: String::new(),
            trigger: String::new(),
            subject: None,
            guidance_scale: None,
            source_image_id: None,
            score: Some(score),
            score_failed: false,
        })
        .collect();
    Ok(select::select_top_k(&candidates, k, min_score)
        .map_err(to_py_err)?
        .into_iter()
        .map(|c| c.candidate_id)
        .collect())
}

/// Cosine learning-rate schedule value.
#[pyfunction]
fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> PyResult<f64> {
    trainer::cosine_lr(step, total_steps, base_lr).map_err(to_py_err)
}

/// MAD-based anomaly indices for per-class mask norms.
#[pyfunction]
fn anomaly_index(norms: Vec<f64>) -> PyResult<Vec<f64>> {
    cleanse::anomaly_index(&norms).map_err(to_py_err)
}

/// Unit-normalized spatial attention of a flat CHW feature array.
#[pyfunction]
fn attention_map(features: Vec<f64>, channels: usize, height: usize, width: usize) -> PyResult<Vec<f64>> {
    if features.len() != channels * height * width {
        return Err(PyValueError::new_err("feature buffer does not match shape"));
    }
    Ok(nad::attention_map(&Tensor3::from_vec(channels, height, width, features)).data)
}

/// Shannon entropy (bits) of a softmax over the given logits.
#[pyfunction]
fn prediction_entropy(logits: Vec<f64>) -> f64 {
    poisonforge::nn::tensor::entropy_bits(&poisonforge::nn::tensor::softmax(&logits))
}

/// Median helper matching the STRIP report statistics.
#[pyfunction]
fn median(values: Vec<f64>) -> f64 {
    strip::median(&values)
}

/// Execute the full pipeline from a config file; returns the summary path.
#[pyfunction]
fn run_pipeline(config_path: PathBuf, out_dir: PathBuf) -> PyResult<String> {
    pipeline::run_pipeline(&config_path, &out_dir).map_err(to_py_err)?;
    Ok(out_dir.join(pipeline::SUMMARY_FILE).display().to_string())
}

/// Continue a run directory from its first incomplete stage.
#[pyfunction]
fn resume(run_dir: PathBuf) -> PyResult<String> {
    pipeline::resume(Path::new(&run_dir)).map_err(to_py_err)?;
    Ok(run_dir.join(pipeline::SUMMARY_FILE).display().to_string())
}

#[pymodule]
fn poisonforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(make_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(band, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_index, m)?)?;
    m.add_function(wrap_pyfunction!(attention_map, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(median, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(resume, m)?)?;
    Ok(())
}
