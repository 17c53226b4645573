//! Python bindings: task generation, the encoder model, pruning
//! contexts, the training pipeline, and the FLOPs model.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ltp_core::datagen;
use ltp_core::encoder::{load_checkpoint, save_checkpoint, EncoderModel};
use ltp_core::flops;
use ltp_core::pruning::{self, PruneContext};
use ltp_core::training::{self, PipelineConfig, Stage, StageConfig};
use ltp_core::{Graph, Tensor, ThresholdSet};

fn err(e: ltp_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// serde_json value -> native Python object.
fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_py(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py(py)
            }
        }
        serde_json::Value::String(s) => s.into_py(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty_bound(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new_bound(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_py(py)
        }
    })
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

#[pyclass(name = "TaskSpec")]
#[derive(Clone)]
struct PyTaskSpec {
    inner: datagen::TaskSpec,
}

#[pymethods]
impl PyTaskSpec {
    #[new]
    #[pyo3(signature = (vocab, num_classes, n_signal, signal_ids_per_class, length_mu, length_sigma, n_max, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab: usize,
        num_classes: usize,
        n_signal: usize,
        signal_ids_per_class: usize,
        length_mu: f64,
        length_sigma: f64,
        n_max: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = datagen::TaskSpec {
            vocab,
            num_classes,
            n_signal,
            signal_ids_per_class,
            length_mu,
            length_sigma,
            n_max,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(PyTaskSpec { inner })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "ModelConfig")]
#[derive(Clone)]
struct PyModelConfig {
    inner: ltp_core::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (layers, heads, d_model, d_head, d_ffn, vocab, n_max, num_classes))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        layers: usize,
        heads: usize,
        d_model: usize,
        d_head: usize,
        d_ffn: usize,
        vocab: usize,
        n_max: usize,
        num_classes: usize,
    ) -> PyResult<Self> {
        let inner = ltp_core::ModelConfig {
            layers,
            heads,
            d_model,
            d_head,
            d_ffn,
            vocab,
            n_max,
            num_classes,
        };
        inner.validate().map_err(err)?;
        Ok(PyModelConfig { inner })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Encoder model plus the thresholds learned for it, if any.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: EncoderModel,
    thresholds: Option<ThresholdSet>,
}

impl PyModel {
    fn context(&self, mode: &str, theta_final: Option<f64>, final_ratio: Option<f64>) -> PyResult<PruneContext> {
        let layers = self.inner.config.layers;
        let ctx = match mode {
            "none" => PruneContext::none(),
            "hard" => {
                let mut ts = self
                    .thresholds
                    .clone()
                    .ok_or_else(|| PyValueError::new_err("model has no thresholds; train or set them first"))?;
                ts.freeze();
                PruneContext::hard(ts)
            }
            "manual" => {
                let theta = theta_final
                    .ok_or_else(|| PyValueError::new_err("manual mode requires theta_final"))?;
                PruneContext::manual(theta, layers, 1e-3).map_err(err)?
            }
            "topk" => {
                let ratio = final_ratio
                    .ok_or_else(|| PyValueError::new_err("topk mode requires final_ratio"))?;
                PruneContext::topk(
                    ltp_core::experiments::fixed_schedule(layers, ratio).map_err(err)?,
                )
            }
            "spatten" => {
                let ratio = final_ratio
                    .ok_or_else(|| PyValueError::new_err("spatten mode requires final_ratio"))?;
                PruneContext::spatten(ratio, layers).map_err(err)?
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown mode {:?}; expected none/hard/manual/topk/spatten",
                    other
                )))
            }
        };
        Ok(ctx)
    }
}

fn to_examples(data: Vec<(Vec<usize>, usize)>) -> Vec<datagen::Example> {
    data.into_iter()
        .map(|(tokens, label)| datagen::Example { tokens, label })
        .collect()
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: EncoderModel::new(config.inner, seed).map_err(err)?,
            thresholds: None,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, thresholds) = load_checkpoint(path.as_ref()).map_err(err)?;
        Ok(PyModel { inner, thresholds })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path.as_ref(), &self.inner, self.thresholds.as_ref()).map_err(err)
    }

    #[getter]
    fn thresholds(&self) -> Option<Vec<f64>> {
        self.thresholds.as_ref().map(|t| t.values())
    }

    #[pyo3(signature = (values, temperature=1e-3))]
    fn set_thresholds(&mut self, values: Vec<f64>, temperature: f64) -> PyResult<()> {
        if values.len() != self.inner.config.layers {
            return Err(PyValueError::new_err("one threshold per layer required"));
        }
        self.thresholds = Some(ThresholdSet::new(values, temperature, false).map_err(err)?);
        Ok(())
    }

    /// Class logits for one unpruned sequence.
    fn logits(&self, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        let pad = vec![false; tokens.len()];
        let mut g = Graph::new();
        let out = self
            .inner
            .encode(&mut g, &tokens, &pad, &PruneContext::none())
            .map_err(err)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    /// Per-layer token importance scores for one unpruned sequence.
    fn importance_scores(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let layers = self.inner.config.layers;
        let ctx = PruneContext::hard(
            ThresholdSet::new(vec![0.0; layers], 1e-3, false).map_err(err)?,
        );
        let pad = vec![false; tokens.len()];
        let mut g = Graph::new();
        let out = self.inner.encode(&mut g, &tokens, &pad, &ctx).map_err(err)?;
        Ok(out.trace.layers.iter().map(|lt| lt.scores.clone()).collect())
    }

    /// Accuracy, relative FLOPs, and retained-length summary on a dataset.
    #[pyo3(signature = (data, mode="none", theta_final=None, final_ratio=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        data: Vec<(Vec<usize>, usize)>,
        mode: &str,
        theta_final: Option<f64>,
        final_ratio: Option<f64>,
    ) -> PyResult<PyObject> {
        let ctx = self.context(mode, theta_final, final_ratio)?;
        let report = training::evaluate(&self.inner, &ctx, &to_examples(data)).map_err(err)?;
        to_py(py, &report)
    }

    /// The full training procedure: pretrain, soft stage with learnable
    /// thresholds, binarize, hard fine-tune. Stores the learned
    /// thresholds on the model and returns the stage reports.
    #[pyo3(signature = (train, eval, epochs=(3, 2, 2), lr=1e-3, batch_size=16,
                        lambda_=0.05, temperature=1e-3, theta_final=0.01, seed=1))]
    #[allow(clippy::too_many_arguments)]
    fn train_pipeline(
        &mut self,
        py: Python<'_>,
        train: Vec<(Vec<usize>, usize)>,
        eval: Vec<(Vec<usize>, usize)>,
        epochs: (usize, usize, usize),
        lr: f64,
        batch_size: usize,
        lambda_: f64,
        temperature: f64,
        theta_final: f64,
        seed: u64,
    ) -> PyResult<PyObject> {
        let stage = |s, e, t, l, seed| StageConfig {
            stage: s,
            epochs: e,
            lr,
            temperature: t,
            lambda: l,
            batch_size,
            seed,
        };
        let cfg = PipelineConfig {
            pretrain: stage(Stage::Pretrain, epochs.0, None, None, seed),
            soft: stage(Stage::Soft, epochs.1, Some(temperature), Some(lambda_), seed + 1),
            hard: stage(Stage::Hard, epochs.2, None, None, seed + 2),
            theta_final,
        };
        let (outcome, ctx) = training::run_pipeline(
            &self.inner,
            &cfg,
            &to_examples(train),
            &to_examples(eval),
        )
        .map_err(err)?;
        self.thresholds = ctx.thresholds;
        to_py(py, &outcome)
    }
}

/// Generate a synthetic classification dataset as (tokens, label) pairs.
#[pyfunction]
fn generate(task: PyTaskSpec, count: usize) -> PyResult<Vec<(Vec<usize>, usize)>> {
    Ok(datagen::generate(&task.inner, count)
        .map_err(err)?
        .into_iter()
        .map(|e| (e.tokens, e.label))
        .collect())
}

/// Quantile and histogram statistics of a length sample, with an
/// optional KL divergence against a reference sample.
#[pyfunction]
#[pyo3(signature = (lengths, bins=10, reference=None))]
fn length_stats(
    py: Python<'_>,
    lengths: Vec<usize>,
    bins: usize,
    reference: Option<Vec<usize>>,
) -> PyResult<PyObject> {
    let stats = datagen::length_stats(&lengths, bins, reference.as_deref()).map_err(err)?;
    to_py(py, &stats)
}

/// Relative FLOPs of a model that sees `layer_lengths[l]` tokens at
/// layer l of an n-token sequence.
#[pyfunction]
fn relative_flops(config: PyModelConfig, layer_lengths: Vec<usize>, n: usize) -> PyResult<f64> {
    Ok(flops::model_flops(&layer_lengths, n, &config.inner)
        .map_err(err)?
        .relative)
}

/// Differentiable soft mask values sigmoid((s - theta) / T).
#[pyfunction]
fn soft_mask(scores: Vec<f64>, theta: f64, temperature: f64) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let s = g.leaf(Tensor::vector(scores), false);
    let t = g.leaf(Tensor::vector(vec![theta]), false);
    let m = pruning::soft_mask(&mut g, s, t, temperature).map_err(err)?;
    Ok(g.value(m).data().to_vec())
}

/// Binary keep flags: score strictly above the threshold.
#[pyfunction]
#[pyo3(signature = (scores, theta, protected=vec![]))]
fn hard_mask(scores: Vec<f64>, theta: f64, protected: Vec<usize>) -> Vec<bool> {
    pruning::hard_mask(&scores, theta, &protected)
}

/// Keep flags for the k highest scores (ties broken toward lower index).
#[pyfunction]
fn topk_select(scores: Vec<f64>, k: usize) -> PyResult<Vec<bool>> {
    pruning::topk_select(&scores, k).map_err(err)
}

#[pymodule]
fn ltp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskSpec>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(length_stats, m)?)?;
    m.add_function(wrap_pyfunction!(relative_flops, m)?)?;
    m.add_function(wrap_pyfunction!(soft_mask, m)?)?;
    m.add_function(wrap_pyfunction!(hard_mask, m)?)?;
    m.add_function(wrap_pyfunction!(topk_select, m)?)?;
    Ok(())
}
