//! Transformer encoder stack exposing per-layer attention probabilities,
//! with token pruning hooks wired into the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Param};
use crate::error::{Error, Result};
use crate::pruning::{
    self, hard_mask, importance_scores, ratio_to_count, topk_select, LayerTrace, PruneContext,
    PruneMode, PruneTrace,
};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const MASK_LOGIT: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub n_max: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != heads {} * d_head {}",
                self.d_model, self.heads, self.d_head
            )));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("vocab", self.vocab),
            ("n_max", self.n_max),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{} must be >= 1", name)));
            }
        }
        Ok(())
    }
}

pub struct LayerParams {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub w_1: Param,
    pub b_1: Param,
    pub w_2: Param,
    pub b_2: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

pub struct EncoderModel {
    pub config: ModelConfig,
    pub token_emb: Param,
    pub pos_emb: Param,
    pub layers: Vec<LayerParams>,
    pub cls_w: Param,
    pub cls_b: Param,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).expect("randn shape")
}

impl EncoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LayerParams {
                w_q: Param::new(format!("layer{}.w_q", l), randn(&mut rng, vec![d, d], std)),
                w_k: Param::new(format!("layer{}.w_k", l), randn(&mut rng, vec![d, d], std)),
                w_v: Param::new(format!("layer{}.w_v", l), randn(&mut rng, vec![d, d], std)),
                w_o: Param::new(format!("layer{}.w_o", l), randn(&mut rng, vec![d, d], std)),
                ln1_gain: Param::new(format!("layer{}.ln1_gain", l), Tensor::ones(vec![d, 1])),
                ln1_bias: Param::new(format!("layer{}.ln1_bias", l), Tensor::zeros(vec![d, 1])),
                w_1: Param::new(format!("layer{}.w_1", l), randn(&mut rng, vec![config.d_ffn, d], std)),
                b_1: Param::new(format!("layer{}.b_1", l), Tensor::zeros(vec![config.d_ffn, 1])),
                w_2: Param::new(format!("layer{}.w_2", l), randn(&mut rng, vec![d, config.d_ffn], std)),
                b_2: Param::new(format!("layer{}.b_2", l), Tensor::zeros(vec![d, 1])),
                ln2_gain: Param::new(format!("layer{}.ln2_gain", l), Tensor::ones(vec![d, 1])),
                ln2_bias: Param::new(format!("layer{}.ln2_bias", l), Tensor::zeros(vec![d, 1])),
            });
        }
        Ok(EncoderModel {
            token_emb: Param::new("token_emb", randn(&mut rng, vec![config.vocab, d], std)),
            pos_emb: Param::new("pos_emb", randn(&mut rng, vec![config.n_max, d], std)),
            layers,
            cls_w: Param::new("cls_w", randn(&mut rng, vec![config.num_classes, d], std)),
            cls_b: Param::new("cls_b", Tensor::zeros(vec![config.num_classes, 1])),
            config,
        })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![self.token_emb.clone(), self.pos_emb.clone()];
        for l in &self.layers {
            out.extend([
                l.w_q.clone(),
                l.w_k.clone(),
                l.w_v.clone(),
                l.w_o.clone(),
                l.ln1_gain.clone(),
                l.ln1_bias.clone(),
                l.w_1.clone(),
                l.b_1.clone(),
                l.w_2.clone(),
                l.b_2.clone(),
                l.ln2_gain.clone(),
                l.ln2_bias.clone(),
            ]);
        }
        out.push(self.cls_w.clone());
        out.push(self.cls_b.clone());
        out
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// One multi-head attention block: LN(Att(x) + x). Returns the block
    /// output and per-head attention probability nodes. Masked key
    /// positions receive -inf logits before the softmax.
    pub fn mha_forward(
        &self,
        graph: &mut Graph,
        x: NodeId,
        layer: usize,
        key_mask: &[bool],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let lp = &self.layers[layer];
        let n = graph.value(x).cols();
        let d = self.config.d_model;
        if key_mask.len() != n {
            return Err(Error::shape(
                "mha_forward",
                format!("key_mask len {} vs n {}", key_mask.len(), n),
            ));
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::invalid("mha_forward: all keys masked (degenerate softmax)"));
        }
        let needs_mask = key_mask.iter().any(|&k| !k);
        let mask_add = if needs_mask {
            let mut m = Tensor::zeros(vec![n, n]);
            for q in 0..n {
                for k in 0..n {
                    if !key_mask[k] {
                        *m.at_mut(q, k) = MASK_LOGIT;
                    }
                }
            }
            Some(m)
        } else {
            None
        };

        let w_q = graph.param(&lp.w_q);
        let w_k = graph.param(&lp.w_k);
        let w_v = graph.param(&lp.w_v);
        let w_o = graph.param(&lp.w_o);
        let q = graph.matmul(w_q, x)?;
        let k = graph.matmul(w_k, x)?;
        let v = graph.matmul(w_v, x)?;
        let qt = graph.transpose(q)?;
        let kt = graph.transpose(k)?;
        let vt = graph.transpose(v)?;

        let scale = 1.0 / (d as f64).sqrt();
        let mut acc: Option<NodeId> = None;
        let mut probs_nodes = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let cols: Vec<usize> = (h * self.config.d_head..(h + 1) * self.config.d_head).collect();
            let qh = graph.slice_cols(qt, &cols)?; // n x d_h
            let kh_t = graph.slice_cols(kt, &cols)?; // n x d_h
            let kh = graph.transpose(kh_t)?; // d_h x n
            let logits = graph.matmul(qh, kh)?; // n x n
            let mut logits = graph.scale(logits, scale);
            if let Some(m) = &mask_add {
                logits = graph.add_const(logits, m)?;
            }
            let probs = graph.softmax_rows(logits)?;
            probs_nodes.push(probs);
            let vh = graph.slice_cols(vt, &cols)?; // n x d_h
            let att_t = graph.matmul(probs, vh)?; // n x d_h
            let att = graph.transpose(att_t)?; // d_h x n
            let wo_h = graph.slice_cols(w_o, &cols)?; // d x d_h
            let out_h = graph.matmul(wo_h, att)?; // d x n
            acc = Some(match acc {
                Some(a) => graph.add(a, out_h)?,
                None => out_h,
            });
        }
        let attn = acc.expect("at least one head");
        let ln1_gain = graph.param(&lp.ln1_gain);
        let ln1_bias = graph.param(&lp.ln1_bias);
        let residual = graph.add(attn, x)?;
        let out = graph.layer_norm_cols(residual, ln1_gain, ln1_bias, LN_EPS)?;
        Ok((out, probs_nodes))
    }

    /// Feed-forward block: LN(FFN(x) + x) with FFN(x) = gelu(W2(W1 x + b1)) + b2.
    pub fn ffn_forward(&self, graph: &mut Graph, x_mha: NodeId, layer: usize) -> Result<NodeId> {
        let lp = &self.layers[layer];
        let w_1 = graph.param(&lp.w_1);
        let b_1 = graph.param(&lp.b_1);
        let w_2 = graph.param(&lp.w_2);
        let b_2 = graph.param(&lp.b_2);
        let h = graph.matmul(w_1, x_mha)?;
        let h = graph.add_bias(h, b_1)?;
        let h = graph.matmul(w_2, h)?;
        let h = graph.gelu(h);
        let ffn = graph.add_bias(h, b_2)?;
        let residual = graph.add(ffn, x_mha)?;
        let ln2_gain = graph.param(&lp.ln2_gain);
        let ln2_bias = graph.param(&lp.ln2_bias);
        graph.layer_norm_cols(residual, ln2_gain, ln2_bias, LN_EPS)
    }

    /// Classifier logits from the first-position representation.
    pub fn classify(&self, graph: &mut Graph, x: NodeId, first_col: usize) -> Result<NodeId> {
        let col = graph.slice_cols(x, &[first_col])?;
        let w = graph.param(&self.cls_w);
        let b = graph.param(&self.cls_b);
        let affine = graph.matmul(w, col)?;
        graph.add(affine, b)
    }

    /// Full encoder pass under a pruning context.
    ///
    /// `pad[i]` marks positions that are masked out of attention and
    /// importance normalization from the start. Hard-family modes compact
    /// pruned (and pad) columns away; soft mode keeps full width and
    /// scales columns by the cumulative mask product.
    pub fn encode(
        &self,
        graph: &mut Graph,
        tokens: &[usize],
        pad: &[bool],
        ctx: &PruneContext,
    ) -> Result<EncodeResult> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::invalid("encode: empty sequence"));
        }
        if n > self.config.n_max {
            return Err(Error::invalid(format!(
                "encode: sequence length {} exceeds n_max {}",
                n, self.config.n_max
            )));
        }
        if pad.len() != n {
            return Err(Error::shape("encode", format!("pad len {} vs n {}", pad.len(), n)));
        }
        ctx.validate(self.config.layers)?;
        if pad.iter().all(|&p| p) {
            return Err(Error::invalid("encode: all positions are padding"));
        }

        let token_emb = graph.param(&self.token_emb);
        let pos_emb = graph.param(&self.pos_emb);
        let x0 = graph.embed(token_emb, pos_emb, tokens)?;

        match ctx.mode {
            PruneMode::None | PruneMode::Soft => self.encode_full_width(graph, x0, pad, ctx),
            PruneMode::Hard | PruneMode::Manual | PruneMode::TopK | PruneMode::Spatten => {
                self.encode_compacting(graph, x0, pad, ctx)
            }
        }
    }

    fn encode_full_width(
        &self,
        graph: &mut Graph,
        x0: NodeId,
        pad: &[bool],
        ctx: &PruneContext,
    ) -> Result<EncodeResult> {
        let n = pad.len();
        let active: Vec<bool> = pad.iter().map(|&p| !p).collect();
        let n_active = active.iter().filter(|&&a| a).count();
        let soft = ctx.mode == PruneMode::Soft;

        // Constant row selecting active queries for the importance sum.
        let query_sel = {
            let data: Vec<f64> = active.iter().map(|&a| a as u8 as f64).collect();
            Tensor::vector(data)
        };

        let theta_node = if soft {
            let ts = ctx.thresholds.as_ref().expect("validated");
            Some(graph.param(&ts.theta))
        } else {
            None
        };
        let temperature = ctx.thresholds.as_ref().map(|t| t.temperature).unwrap_or(1.0);

        // Mask surgery constants: zero out pads, pin protected to 1.
        let (mask_mul, mask_addc) = {
            let mut mul = Tensor::ones(vec![1, n]);
            let mut add = Tensor::zeros(vec![1, n]);
            for (i, &p) in pad.iter().enumerate() {
                if p {
                    mul.data_mut()[i] = 0.0;
                }
            }
            for &p in &ctx.protected {
                if p < n && !pad[p] {
                    mul.data_mut()[p] = 0.0;
                    add.data_mut()[p] = 1.0;
                }
            }
            (mul, add)
        };

        let mut x = x0;
        let mut running = graph.constant({
            let data: Vec<f64> = active.iter().map(|&a| a as u8 as f64).collect();
            Tensor::vector(data)
        });
        let mut trace = PruneTrace::default();
        let mut soft_masks = Vec::new();
        let mut attn_records = Vec::new();

        for layer in 0..self.config.layers {
            let (x_mha, probs) = self.mha_forward(graph, x, layer, &active)?;
            let mut x_out = self.ffn_forward(graph, x_mha, layer)?;

            // Importance: column means of the attention probs over active queries.
            let sel = graph.constant(query_sel.clone());
            let mut score_acc: Option<NodeId> = None;
            for &p in &probs {
                let col_sums = graph.matmul(sel, p)?; // 1 x n
                score_acc = Some(match score_acc {
                    Some(a) => graph.add(a, col_sums)?,
                    None => col_sums,
                });
            }
            let scores =
                graph.scale(score_acc.expect("heads"), 1.0 / (self.config.heads as f64 * n_active as f64));
            let score_values = graph.value(scores).data().to_vec();

            if soft {
                let ts = ctx.thresholds.as_ref().expect("validated");
                let theta_all = theta_node.expect("soft mode");
                let theta_l = graph.slice_cols(theta_all, &[layer])?;
                let raw = pruning::soft_mask(graph, scores, theta_l, temperature)?;
                let clamped = graph.mul_const(raw, &mask_mul)?;
                let mask_eff = graph.add_const(clamped, &mask_addc)?;
                soft_masks.push(mask_eff);
                let (masked, new_running) = pruning::apply_soft_mask(graph, x_out, mask_eff, running)?;
                x_out = masked;
                running = new_running;
                let run_vals = graph.value(running).data();
                let retained = run_vals
                    .iter()
                    .zip(&active)
                    .filter(|(&r, &a)| a && r >= 0.5)
                    .count();
                trace.layers.push(LayerTrace {
                    scores: score_values,
                    mask: run_vals.to_vec(),
                    entering_len: n_active,
                    retained,
                });
                let _ = ts;
            } else {
                trace.layers.push(LayerTrace {
                    scores: score_values,
                    mask: active.iter().map(|&a| a as u8 as f64).collect(),
                    entering_len: n_active,
                    retained: n_active,
                });
            }
            attn_records.push(probs);
            x = x_out;
        }

        if pad[0] {
            return Err(Error::invalid("encode: first position is padding; classifier input pruned"));
        }
        let logits = self.classify(graph, x, 0)?;
        Ok(EncodeResult {
            logits,
            trace,
            soft_masks,
            attn: attn_records,
            final_active: active
                .iter()
                .enumerate()
                .filter_map(|(i, &a)| a.then_some(i))
                .collect(),
        })
    }

    fn encode_compacting(
        &self,
        graph: &mut Graph,
        x0: NodeId,
        pad: &[bool],
        ctx: &PruneContext,
    ) -> Result<EncodeResult> {
        let n = pad.len();
        // Pads are excluded from calculation entirely in hard modes.
        let mut active: Vec<usize> = (0..n).filter(|&i| !pad[i]).collect();
        if active.is_empty() {
            return Err(Error::invalid("encode: all positions are padding"));
        }
        let n_orig = active.len();
        let mut x = if active.len() == n {
            x0
        } else {
            graph.slice_cols(x0, &active)?
        };

        let theta_values: Option<Vec<f64>> = ctx.thresholds.as_ref().map(|t| t.values());
        let schedule = ctx.schedule.clone();

        let mut trace = PruneTrace::default();
        let mut attn_records = Vec::new();

        for layer in 0..self.config.layers {
            let n_cur = active.len();
            let key_mask = vec![true; n_cur];
            let (x_mha, probs) = self.mha_forward(graph, x, layer, &key_mask)?;
            let x_out = self.ffn_forward(graph, x_mha, layer)?;

            let prob_values: Vec<Tensor> = probs.iter().map(|&p| graph.value(p).clone()).collect();
            let scores = importance_scores(&prob_values, &vec![true; n_cur])?;

            let protected_cur: Vec<usize> = active
                .iter()
                .enumerate()
                .filter_map(|(cur, orig)| ctx.protected.contains(orig).then_some(cur))
                .collect();

            let keep = match ctx.mode {
                PruneMode::Hard | PruneMode::Manual => {
                    let theta = theta_values.as_ref().expect("validated")[layer];
                    hard_mask(&scores, theta, &protected_cur)
                }
                PruneMode::TopK | PruneMode::Spatten => {
                    let ratio = schedule.as_ref().expect("validated")[layer];
                    let reference = ctx.schedule_ref_len.unwrap_or(n_orig);
                    let k = ratio_to_count(ratio, reference).min(n_cur);
                    let mut keep = topk_select(&scores, k)?;
                    for &p in &protected_cur {
                        keep[p] = true;
                    }
                    keep
                }
                _ => unreachable!(),
            };

            let (compacted, kept_cur) = pruning::compact(graph, x_out, &keep)?;

            let mut scores_orig = vec![0.0; n];
            let mut mask_orig = vec![0.0; n];
            for (cur, &orig) in active.iter().enumerate() {
                scores_orig[orig] = scores[cur];
                if keep[cur] {
                    mask_orig[orig] = 1.0;
                }
            }
            let new_active: Vec<usize> = kept_cur.iter().map(|&cur| active[cur]).collect();
            trace.layers.push(LayerTrace {
                scores: scores_orig,
                mask: mask_orig,
                entering_len: n_cur,
                retained: new_active.len(),
            });
            attn_records.push(probs);
            x = compacted;
            active = new_active;
        }

        let first_col = active
            .iter()
            .position(|&orig| orig == 0)
            .ok_or_else(|| Error::invalid("encode: first position pruned; classifier has no input"))?;
        let logits = self.classify(graph, x, first_col)?;
        Ok(EncodeResult {
            logits,
            trace,
            soft_masks: Vec::new(),
            attn: attn_records,
            final_active: active,
        })
    }
}

pub struct EncodeResult {
    /// num_classes x 1 logits node.
    pub logits: NodeId,
    pub trace: PruneTrace,
    /// Per-layer effective soft-mask nodes (soft mode only); pads carry
    /// exact zeros so the L1 regularizer skips them.
    pub soft_masks: Vec<NodeId>,
    /// Per-layer, per-head attention probability nodes.
    pub attn: Vec<Vec<NodeId>>,
    /// Original indices of the columns surviving to the classifier.
    pub final_active: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &str = "LTPLAB1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    config: ModelConfig,
    params: Vec<NamedTensor>,
    thresholds: Option<ThresholdCheckpoint>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
pub struct ThresholdCheckpoint {
    pub theta: Vec<f64>,
    pub temperature: f64,
    pub learnable: bool,
}

pub fn save_checkpoint(
    path: &std::path::Path,
    model: &EncoderModel,
    thresholds: Option<&crate::pruning::ThresholdSet>,
) -> Result<()> {
    let file = CheckpointFile {
        magic: CHECKPOINT_MAGIC.to_string(),
        config: model.config.clone(),
        params: model
            .params()
            .iter()
            .map(|p| NamedTensor { name: p.name(), tensor: p.value() })
            .collect(),
        thresholds: thresholds.map(|t| ThresholdCheckpoint {
            theta: t.values(),
            temperature: t.temperature,
            learnable: t.learnable,
        }),
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(EncoderModel, Option<crate::pruning::ThresholdSet>)> {
    let json = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&json)?;
    if file.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            file.magic, CHECKPOINT_MAGIC
        )));
    }
    let model = EncoderModel::new(file.config, 0)?;
    let mut by_name: std::collections::HashMap<String, Tensor> =
        file.params.into_iter().map(|nt| (nt.name, nt.tensor)).collect();
    for p in model.params() {
        let name = p.name();
        let tensor = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {:?}", name)))?;
        if tensor.shape() != p.value().shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape {:?}, expected {:?}",
                name,
                tensor.shape(),
                p.value().shape()
            )));
        }
        p.set_value(tensor);
    }
    let thresholds = match file.thresholds {
        Some(tc) => Some(crate::pruning::ThresholdSet::new(tc.theta, tc.temperature, tc.learnable)?),
        None => None,
    };
    Ok((model, thresholds))
}
