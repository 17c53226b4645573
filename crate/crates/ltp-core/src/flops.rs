//! Analytic FLOPs model for the encoder under per-layer retained lengths.
//!
//! One multiply-add counts as 2 FLOPs. Softmax, LayerNorm, and GELU are
//! excluded, as are the embedding and classifier (constant offsets shared
//! by every pruning method).

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<u64>,
    pub total: u64,
    pub baseline: u64,
    pub relative: f64,
}

/// FLOPs of one encoder layer entered by `n_in` tokens: QKV projections,
/// attention logits, probs x V, output projection, and the two FFN matmuls.
pub fn layer_flops(n_in: usize, cfg: &ModelConfig) -> u64 {
    let n = n_in as u64;
    let d = cfg.d_model as u64;
    let d_ffn = cfg.d_ffn as u64;
    let qkv = 3 * 2 * n * d * d;
    let logits = 2 * n * n * d;
    let probs_v = 2 * n * n * d;
    let out_proj = 2 * n * d * d;
    let ffn = 2 * (2 * n * d * d_ffn);
    qkv + logits + probs_v + out_proj + ffn
}

/// Sum layer FLOPs over per-layer entering lengths; baseline uses the
/// unpruned length `n` at every layer.
pub fn model_flops(lengths: &[usize], n: usize, cfg: &ModelConfig) -> Result<FlopsReport> {
    if lengths.len() != cfg.layers {
        return Err(Error::invalid(format!(
            "expected {} per-layer lengths, got {}",
            cfg.layers,
            lengths.len()
        )));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l > cfg.n_max) {
        return Err(Error::invalid(format!("length {} exceeds n_max {}", bad, cfg.n_max)));
    }
    let per_layer: Vec<u64> = lengths.iter().map(|&l| layer_flops(l, cfg)).collect();
    let total: u64 = per_layer.iter().sum();
    let baseline = layer_flops(n, cfg) * cfg.layers as u64;
    Ok(FlopsReport {
        per_layer,
        total,
        baseline,
        relative: total as f64 / baseline as f64,
    })
}

/// Average per-sequence relative FLOPs over a dataset of length vectors.
/// Each entry pairs the per-layer entering lengths with the unpruned length.
pub fn dataset_relative_flops(per_sequence: &[(Vec<usize>, usize)], cfg: &ModelConfig) -> Result<f64> {
    if per_sequence.is_empty() {
        return Err(Error::invalid("dataset_relative_flops: empty dataset"));
    }
    let mut total = 0u64;
    let mut baseline = 0u64;
    for (lengths, n) in per_sequence {
        let r = model_flops(lengths, *n, cfg)?;
        total += r.total;
        baseline += r.baseline;
    }
    Ok(total as f64 / baseline as f64)
}
