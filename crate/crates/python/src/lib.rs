//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use s3ld::dsp::{self, FeatureConfig, SynthSpec, Waveform};
use s3ld::encoder::{self, Role};
use s3ld::eval::{self, EvalPair};
use s3ld::objectives::{self, DistractorPolicy};
use s3ld::tensor::{Graph, Tensor};
use s3ld::trainer::{self, Checkpoint};

type Rows = Vec<Vec<f64>>;

fn py_err(e: s3ld::Error) -> PyErr {
    match e {
        s3ld::Error::Io(_) | s3ld::Error::Version(_) | s3ld::Error::Corruption(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: &Rows) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn rows<F: s3ld::tensor::Real>(t: &Tensor<F>) -> Rows {
    (0..t.dim(0)).map(|r| t.row(r).iter().map(|v| v.f64()).collect()).collect()
}

fn waveform(samples: Vec<f64>) -> PyResult<Waveform> {
    Waveform::new(samples, None).map_err(py_err)
}

/// Synthetic utterance: `(samples, [(start, end, class), ...])`.
#[pyfunction]
#[pyo3(signature = (seed, n_classes = 5))]
fn synth_utterance(seed: u64, n_classes: usize) -> PyResult<(Vec<f64>, Vec<(usize, usize, usize)>)> {
    let spec = SynthSpec::default().with_classes(n_classes);
    let w = dsp::synth_utterance(&spec, seed).map_err(py_err)?;
    let segs = w.labels.unwrap_or_default().iter().map(|s| (s.start, s.end, s.class)).collect();
    Ok((w.samples, segs))
}

/// Log-mel spectrogram `[n_mels][frames]` of 16 kHz samples.
#[pyfunction]
fn log_mel(samples: Vec<f64>) -> PyResult<Rows> {
    let m = dsp::log_mel(&waveform(samples)?, &FeatureConfig::default()).map_err(py_err)?;
    Ok(rows(&m.values))
}

/// MFCCs `[n_coeff][frames]`.
#[pyfunction]
#[pyo3(signature = (samples, n_coeff = 13))]
fn mfcc(samples: Vec<f64>, n_coeff: usize) -> PyResult<Rows> {
    let m = dsp::log_mel(&waveform(samples)?, &FeatureConfig::default()).map_err(py_err)?;
    Ok(rows(&dsp::mfcc(&m, n_coeff).map_err(py_err)?))
}

/// CTC negative log-likelihood of `labels` (1-based; 0 is blank) under
/// per-frame log-probabilities.
#[pyfunction]
fn ctc_loss(log_probs: Rows, labels: Vec<usize>) -> PyResult<f64> {
    let mut g = Graph::<f64>::inference();
    let lp = g.constant(tensor(&log_probs)?);
    let l = objectives::ctc_loss(&mut g, lp, &labels).map_err(py_err)?;
    Ok(g.value(l).data()[0])
}

#[pyfunction]
fn greedy_ctc_decode(log_probs: Rows) -> PyResult<Vec<usize>> {
    eval::greedy_ctc_decode(&tensor(&log_probs)?).map_err(py_err)
}

#[pyfunction]
fn levenshtein(hyp: Vec<i64>, reference: Vec<i64>) -> usize {
    eval::levenshtein(&hyp, &reference)
}

fn pairs(items: Vec<(Vec<usize>, Vec<usize>)>) -> Vec<EvalPair> {
    items.into_iter().map(|(h, r)| EvalPair::new(h, r)).collect()
}

/// Total edits over total reference tokens for `[(hyp, ref), ...]`.
#[pyfunction]
fn token_error_rate(items: Vec<(Vec<usize>, Vec<usize>)>) -> PyResult<f64> {
    eval::token_error_rate(&pairs(items)).map_err(py_err)
}

/// Fraction of pairs with any error.
#[pyfunction]
fn utterance_error_rate(items: Vec<(Vec<usize>, Vec<usize>)>) -> PyResult<f64> {
    eval::utterance_error_rate(&pairs(items)).map_err(py_err)
}

/// InfoNCE over in-utterance distractors for `[T][P]` student and teacher.
#[pyfunction]
#[pyo3(signature = (student, teacher, tau = 0.1))]
fn contrastive_loss(student: Rows, teacher: Rows, tau: f64) -> PyResult<f64> {
    let mut g = Graph::<f64>::inference();
    let s = tensor(&student)?;
    let t = s.dim(0);
    let z = g.constant(s);
    let d = objectives::sample_distractors(t, DistractorPolicy::InUtteranceAll).map_err(py_err)?;
    let l = objectives::contrastive_loss(&mut g, z, &tensor(&teacher)?, tau, &d).map_err(py_err)?;
    Ok(g.value(l).data()[0])
}

/// `(centroids, assignments)`.
#[pyfunction]
#[pyo3(signature = (features, k, iters = 25, seed = 0))]
fn kmeans(features: Rows, k: usize, iters: usize, seed: u64) -> PyResult<(Rows, Vec<usize>)> {
    let m = objectives::kmeans_fit(&features, k, iters, seed).map_err(py_err)?;
    let a = objectives::kmeans_assign(&features, &m).map_err(py_err)?;
    Ok((m.centroids, a))
}

/// ABX score of `[(a, b, x), ...]` where `a` and `x` share a category.
#[pyfunction]
fn abx(triples: Vec<(Rows, Rows, Rows)>) -> PyResult<f64> {
    let inst = triples
        .into_iter()
        .map(|(a, b, x)| Ok(eval::AbxInstance { a: tensor(&a)?, b: tensor(&b)?, x: tensor(&x)?, cat_a: 0, cat_b: 1 }))
        .collect::<PyResult<Vec<_>>>()?;
    eval::abx_score(&inst, eval::FrameDistance::Angular).map_err(py_err)
}

/// Checkpoint header: `(meta, [(name, shape), ...])`.
#[pyfunction]
fn inspect_checkpoint(path: PathBuf) -> PyResult<(BTreeMap<String, String>, Vec<(String, Vec<usize>)>)> {
    let ck = Checkpoint::load(&path).map_err(py_err)?;
    let arrays = ck.arrays.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    Ok((ck.meta, arrays))
}

#[pyclass(name = "EncoderConfig", frozen)]
struct PyEncoderConfig {
    inner: encoder::EncoderConfig,
}

#[pymethods]
impl PyEncoderConfig {
    /// `tiny`, `paper`, or a path to a description file.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { inner: encoder::EncoderConfig::from_preset_or_path(name).map_err(py_err)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: encoder::EncoderConfig::parse(text).map_err(py_err)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn downsample(&self) -> usize {
        self.inner.downsample()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.inner.n_mels
    }

    fn output_frames(&self, t: usize) -> Option<usize> {
        self.inner.output_frames(t)
    }
}

#[pyclass(name = "Encoder", frozen)]
struct PyEncoder {
    inner: encoder::Encoder<f32>,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyEncoderConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: encoder::Encoder::new_student(&config.inner, seed).map_err(py_err)? })
    }

    /// Student encoder stored in a checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let config = encoder::EncoderConfig::parse(&ck.config_text).map_err(py_err)?;
        let inner = encoder::Encoder::with_params(&config, Role::Student, ck.group("student")).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Final representation `[T_out][D]` of a `[n_mels][T]` input.
    fn encode(&self, mel: Rows) -> PyResult<Rows> {
        let mut g = Graph::inference();
        let b = self.inner.bind(&mut g, false);
        let out = self.inner.encode(&mut g, &b, &tensor(&mel)?.cast()).map_err(py_err)?;
        Ok(rows(g.value(out.final_)))
    }

    /// Softmax-weighted layer aggregate `[T_out][D]`.
    fn aggregate(&self, mel: Rows) -> PyResult<Rows> {
        let layers = trainer::frozen_layers(&self.inner, &tensor(&mel)?).map_err(py_err)?;
        let mut g = Graph::inference();
        let lv: Vec<_> = layers.into_iter().map(|t| g.constant(t)).collect();
        let idx = self.inner.agg_index().expect("student encoder");
        let logits = g.constant(self.inner.params.tensors()[idx].clone());
        let agg = encoder::aggregate_layers(&mut g, &lv, logits).map_err(py_err)?;
        Ok(rows(g.value(agg)))
    }
}

#[pymodule]
fn s3ld_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_utterance, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_ctc_decode, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(token_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(utterance_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(abx, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_class::<PyEncoderConfig>()?;
    m.add_class::<PyEncoder>()?;
    Ok(())
}
