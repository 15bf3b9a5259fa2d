//! Python bindings: load and save checkpoints, run greedy answers, score predictions
//! and poke at the building blocks (buckets, span corruption, synthetic pages).

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tilt::checkpoint::Checkpoint;
use tilt::config::{SynthKind, PRESETS};
use tilt::layout::{document_line, load_dataset, read_document_line, Document, TaskInstance, TaskKind, TokenKind};
use tilt::metrics::{self, Metric};
use tilt::model::{Tilt, TiltConfig};
use tilt::objectives::{reconstruct, select_spans, span_corrupt, to_seq2seq};
use tilt::spatial_bias;
use tilt::train::{evaluate, synth_docs};
use tilt::TiltError;

fn py_err(e: TiltError) -> PyErr {
    match e {
        TiltError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

pub fn parse_kind(kind: &str) -> PyResult<SynthKind> {
    serde_json::from_value(serde_json::Value::String(kind.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown synthetic kind `{kind}`")))
}

pub fn parse_metric(name: &str) -> PyResult<Metric> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown metric `{name}`")))
}

#[pyclass(name = "Document", module = "pytilt", from_py_object)]
#[derive(Clone)]
pub struct PyDocument {
    pub inner: Document,
}

#[pymethods]
impl PyDocument {
    /// Parses one dataset line; relative image paths resolve against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (line, base_dir = "."))]
    fn from_json(line: &str, base_dir: &str) -> PyResult<Self> {
        let base = Path::new(base_dir);
        let inner = read_document_line(line, base, Path::new("<python>"), 1).map_err(py_err)?;
        Ok(PyDocument { inner })
    }

    /// Dataset line without the raster.
    fn to_json(&self) -> PyResult<String> {
        document_line(&self.inner).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.inner.page.width, self.inner.page.height)
    }

    #[getter]
    fn has_image(&self) -> bool {
        self.inner.page.image.is_some()
    }

    #[getter]
    fn words(&self) -> Vec<String> {
        self.inner
            .tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Word)
            .map(|t| t.text.clone())
            .collect()
    }

    #[getter]
    fn boxes(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner
            .tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Word)
            .map(|t| (t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1))
            .collect()
    }

    /// (prompt, answers) pairs.
    #[getter]
    fn questions(&self) -> Vec<(String, Vec<String>)> {
        self.inner
            .annotations
            .iter()
            .map(|a| (a.prompt.clone(), a.answers.clone()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.tokens.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Document(id={:?}, tokens={}, questions={})",
            self.inner.id,
            self.inner.tokens.len(),
            self.inner.annotations.len()
        )
    }
}

#[pyclass(name = "Model", module = "pytilt")]
pub struct PyModel {
    pub inner: Tilt<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh weights; `config` is a JSON model configuration (defaults when omitted).
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: TiltConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TiltConfig::default(),
        };
        cfg.validate().map_err(py_err)?;
        Ok(PyModel {
            inner: Tilt::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Ok(PyModel {
            inner: ckpt.into_model(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), None)
            .and_then(|c| c.save(path))
            .map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.iter().map(|(_, t)| t.len()).sum()
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Greedy answer to `prompt` about `doc`.
    #[pyo3(signature = (doc, prompt, max_len = 16))]
    fn generate(&self, py: Python<'_>, doc: &PyDocument, prompt: &str, max_len: usize) -> PyResult<String> {
        let task = TaskInstance::new(TaskKind::Qa, prompt, &[]);
        let ex = to_seq2seq(&doc.inner, &task).map_err(py_err)?;
        py.detach(|| self.inner.generate(&ex, max_len)).map_err(py_err)
    }

    /// Teacher-forced cross-entropy of `answer`.
    fn loss(&self, py: Python<'_>, doc: &PyDocument, prompt: &str, answer: &str) -> PyResult<f32> {
        let task = TaskInstance::new(TaskKind::Qa, prompt, &[answer]);
        let ex = to_seq2seq(&doc.inner, &task).map_err(py_err)?;
        py.detach(|| self.inner.prepare(&ex, true).and_then(|p| self.inner.loss(&p)))
            .map_err(py_err)
    }

    /// Aggregate score over every annotation of `docs`.
    #[pyo3(signature = (docs, metric = "anls", max_len = 16))]
    fn evaluate(&self, py: Python<'_>, docs: Vec<PyDocument>, metric: &str, max_len: usize) -> PyResult<f64> {
        let metric = parse_metric(metric)?;
        let docs: Vec<Document> = docs.into_iter().map(|d| d.inner).collect();
        let report = py
            .detach(|| evaluate(&self.inner, &docs, metric, max_len))
            .map_err(py_err)?;
        Ok(report.aggregate())
    }
}

/// Synthetic page of kind "layout_qa", "relation_qa" or "font_cue".
#[pyfunction]
#[pyo3(signature = (kind, seed, items = 4))]
fn synth_document(kind: &str, seed: u64, items: usize) -> PyResult<PyDocument> {
    let mut docs = synth_docs(parse_kind(kind)?, seed, 1, items).map_err(py_err)?;
    Ok(PyDocument { inner: docs.remove(0) })
}

#[pyfunction(name = "load_dataset")]
fn load_dataset_py(path: &str) -> PyResult<Vec<PyDocument>> {
    load_dataset(path)
        .and_then(|r| r.collect::<tilt::Result<Vec<_>>>())
        .map(|docs| docs.into_iter().map(|inner| PyDocument { inner }).collect())
        .map_err(py_err)
}

#[pyfunction]
fn bucket_1d(d: i64) -> usize {
    spatial_bias::bucket_1d(d)
}

#[pyfunction]
fn bucket_axis(dc: i64) -> usize {
    spatial_bias::bucket_axis(dc)
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

#[pyfunction]
fn anls(pred: &str, golds: Vec<String>) -> PyResult<f64> {
    metrics::anls(pred, &golds).map_err(py_err)
}

#[pyfunction]
fn exact_match(pred: &str, gold: &str) -> bool {
    metrics::exact_match(pred, gold)
}

/// Masks spans of `doc` and returns (source text, target, reconstruction).
#[pyfunction]
#[pyo3(signature = (doc, seed = 0))]
fn span_corruption(doc: &PyDocument, seed: u64) -> PyResult<(String, String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = select_spans(&doc.inner, &mut rng);
    let ex = span_corrupt(&doc.inner, &spans).map_err(py_err)?;
    let restored = reconstruct(&ex.source, &ex.target).map_err(py_err)?;
    Ok((ex.source_text(), ex.target, restored))
}

/// (name, batch, steps, lr, schedule) for every finetuning preset.
#[pyfunction]
fn presets() -> Vec<(String, usize, u64, f64, String)> {
    PRESETS
        .iter()
        .map(|p| {
            let schedule = serde_json::to_value(p.schedule)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            (p.name.to_string(), p.batch, p.steps, p.lr, schedule)
        })
        .collect()
}

#[pymodule]
pub fn pytilt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDocument>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_document, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset_py, m)?)?;
    m.add_function(wrap_pyfunction!(bucket_1d, m)?)?;
    m.add_function(wrap_pyfunction!(bucket_axis, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(anls, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(span_corruption, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
