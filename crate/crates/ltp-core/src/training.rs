//! Training loops: plain fine-tuning, the soft-pruning stage that learns
//! thresholds jointly with the model, binarization, and hard fine-tuning.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Param};
use crate::datagen::Example;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::flops::{self};
use crate::pruning::{manual_thresholds, reg_loss, PruneContext, PruneMode, PruneTrace, ThresholdSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Soft,
    Hard,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    /// Soft-mask temperature (soft stage only).
    pub temperature: Option<f64>,
    /// Regularization weight lambda (soft stage only).
    pub lambda: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if self.stage == Stage::Soft {
            if self.temperature.map_or(true, |t| t <= 0.0) {
                return Err(Error::invalid("soft stage requires a positive temperature"));
            }
            if self.lambda.map_or(true, |l| l < 0.0) {
                return Err(Error::invalid("soft stage requires lambda >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_task_loss: f64,
    pub mean_reg_loss: f64,
    /// Training accuracy over the epoch.
    pub metric: f64,
    /// Mean retained tokens entering each layer.
    pub mean_retained: Vec<f64>,
    pub relative_flops: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub diverged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub relative_flops: f64,
    /// Mean tokens entering each layer, averaged over the dataset.
    pub mean_entering: Vec<f64>,
    /// Mean tokens retained after each layer's pruning hook.
    pub mean_retained: Vec<f64>,
}

/// Linearly rising learnable thresholds: theta_final * l / L.
pub fn init_thresholds(theta_final: f64, layers: usize, temperature: f64) -> Result<ThresholdSet> {
    if theta_final < 0.0 {
        return Err(Error::invalid("init_thresholds: theta_final must be non-negative"));
    }
    let mut ts = manual_thresholds(theta_final, layers, temperature)?;
    ts.learnable = true;
    Ok(ts)
}

/// Freeze thresholds and switch to hard pruning (Step 2 of the procedure).
pub fn binarize_and_fix(thresholds: &mut ThresholdSet) -> PruneContext {
    thresholds.freeze();
    PruneContext::hard(thresholds.clone())
}

/// Per-layer entering lengths implied by a prune trace: the first layer
/// sees the full active length, each later layer what survived before it.
pub fn effective_lengths(trace: &PruneTrace) -> Vec<usize> {
    let mut lengths = Vec::with_capacity(trace.layers.len());
    for (i, lt) in trace.layers.iter().enumerate() {
        if i == 0 {
            lengths.push(lt.entering_len);
        } else {
            lengths.push(trace.layers[i - 1].retained.max(1));
        }
    }
    lengths
}

/// Plain fine-tuning with no pruning (the pretraining stage before the
/// three-step procedure).
pub fn train_none(model: &EncoderModel, data: &[Example], cfg: &StageConfig) -> Result<TrainReport> {
    let ctx = PruneContext::none();
    run_stage(model, &ctx, &[], data, cfg, 0.0, Stage::Pretrain)
}

/// Step 1: soft pruning. Trains model parameters and thresholds jointly
/// on L + lambda * L_reg.
pub fn train_soft(
    model: &EncoderModel,
    thresholds: &ThresholdSet,
    data: &[Example],
    cfg: &StageConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != Stage::Soft {
        return Err(Error::invalid("train_soft requires a soft StageConfig"));
    }
    if !thresholds.learnable {
        return Err(Error::invalid("train_soft requires learnable thresholds"));
    }
    let mut ts = thresholds.clone();
    if let Some(t) = cfg.temperature {
        ts.temperature = t;
    }
    let ctx = PruneContext::soft(ts);
    let lambda = cfg.lambda.unwrap_or(0.0);
    run_stage(model, &ctx, &[thresholds.theta.clone()], data, cfg, lambda, Stage::Soft)
}

/// Step 3: hard fine-tuning of the model parameters with frozen thresholds.
pub fn train_hard(
    model: &EncoderModel,
    ctx: &PruneContext,
    data: &[Example],
    cfg: &StageConfig,
) -> Result<TrainReport> {
    if ctx.mode != PruneMode::Hard {
        return Err(Error::invalid("train_hard requires a hard-mode context"));
    }
    run_stage(model, ctx, &[], data, cfg, 0.0, Stage::Hard)
}

/// Fine-tune under an arbitrary inference-style pruning context (hard,
/// top-k, schedule, or manual). Used for the fixed-schedule baselines.
pub fn train_with_context(
    model: &EncoderModel,
    ctx: &PruneContext,
    data: &[Example],
    cfg: &StageConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ctx.mode == PruneMode::Soft {
        return Err(Error::invalid("train_with_context does not handle the soft stage"));
    }
    ctx.validate(model.config.layers)?;
    run_stage(model, ctx, &[], data, cfg, 0.0, cfg.stage)
}

fn run_stage(
    model: &EncoderModel,
    ctx: &PruneContext,
    extra_params: &[Param],
    data: &[Example],
    cfg: &StageConfig,
    lambda: f64,
    stage: Stage,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let layers = model.config.layers;
    let opt = Adam::new(cfg.lr);
    let mut params = model.params();
    params.extend_from_slice(extra_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { stage, epochs: Vec::new(), diverged: false };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut sum_loss = 0.0;
        let mut sum_task = 0.0;
        let mut sum_reg = 0.0;
        let mut correct = 0usize;
        let mut retained_acc = vec![0.0f64; layers];
        let mut flops_rows: Vec<(Vec<usize>, usize)> = Vec::with_capacity(data.len());

        for batch in order.chunks(cfg.batch_size) {
            for p in &params {
                p.zero_grad();
            }
            let inv = 1.0 / batch.len() as f64;
            let mut batch_ok = true;
            for &idx in batch {
                let ex = &data[idx];
                let pad = vec![false; ex.tokens.len()];
                let mut graph = Graph::new();
                let out = model.encode(&mut graph, &ex.tokens, &pad, ctx)?;
                let task = graph.ce_loss(out.logits, ex.label)?;
                let total = if lambda > 0.0 && !out.soft_masks.is_empty() {
                    let reg = reg_loss(&mut graph, &out.soft_masks)?;
                    sum_reg += graph.value(reg).item()?;
                    let weighted = graph.scale(reg, lambda);
                    graph.add(task, weighted)?
                } else {
                    if !out.soft_masks.is_empty() {
                        let reg = reg_loss(&mut graph, &out.soft_masks)?;
                        sum_reg += graph.value(reg).item()?;
                    }
                    task
                };
                let loss_val = graph.value(total).item()?;
                if !loss_val.is_finite() {
                    report.diverged = true;
                    batch_ok = false;
                    break;
                }
                sum_loss += loss_val;
                sum_task += graph.value(task).item()?;
                let scaled = graph.scale(total, inv);
                graph.backward(scaled)?;

                let logits = graph.value(out.logits);
                let pred = argmax(logits.data());
                if pred == ex.label {
                    correct += 1;
                }
                let lengths = effective_lengths(&out.trace);
                for (l, &len) in lengths.iter().enumerate() {
                    retained_acc[l] += len as f64;
                }
                flops_rows.push((lengths, ex.tokens.len()));
            }
            if !batch_ok {
                return Ok(report);
            }
            opt.step(&params)?;
        }

        let n = data.len() as f64;
        let relative_flops = flops::dataset_relative_flops(&flops_rows, &model.config)?;
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss: sum_loss / n,
            mean_task_loss: sum_task / n,
            mean_reg_loss: sum_reg / n,
            metric: correct as f64 / n,
            mean_retained: retained_acc.iter().map(|&r| r / n).collect(),
            relative_flops,
        });
    }
    Ok(report)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, averaged relative FLOPs, and retained-length summary of a
/// model under a pruning context.
pub fn evaluate(model: &EncoderModel, ctx: &PruneContext, data: &[Example]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation data is empty"));
    }
    let layers = model.config.layers;
    let mut correct = 0usize;
    let mut entering_acc = vec![0.0f64; layers];
    let mut retained_acc = vec![0.0f64; layers];
    let mut flops_rows = Vec::with_capacity(data.len());
    for ex in data {
        let pad = vec![false; ex.tokens.len()];
        let mut graph = Graph::new();
        let out = model.encode(&mut graph, &ex.tokens, &pad, ctx)?;
        let pred = argmax(graph.value(out.logits).data());
        if pred == ex.label {
            correct += 1;
        }
        let lengths = effective_lengths(&out.trace);
        for (l, lt) in out.trace.layers.iter().enumerate() {
            entering_acc[l] += lengths[l] as f64;
            retained_acc[l] += lt.retained as f64;
        }
        flops_rows.push((lengths, ex.tokens.len()));
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        relative_flops: flops::dataset_relative_flops(&flops_rows, &model.config)?,
        mean_entering: entering_acc.iter().map(|&v| v / n).collect(),
        mean_retained: retained_acc.iter().map(|&v| v / n).collect(),
    })
}

/// Reports produced by the full pipeline: pretrain, soft, hard, and the
/// final hard-mode evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub pretrain: TrainReport,
    pub soft: TrainReport,
    pub hard: TrainReport,
    pub final_eval: EvalReport,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pretrain: StageConfig,
    pub soft: StageConfig,
    pub hard: StageConfig,
    pub theta_final: f64,
}

/// The three-step procedure (with a plain pretraining stage in front so
/// thresholds see meaningful attention distributions).
pub fn run_pipeline(
    model: &EncoderModel,
    cfg: &PipelineConfig,
    train_data: &[Example],
    eval_data: &[Example],
) -> Result<(PipelineOutcome, PruneContext)> {
    let pretrain = train_none(model, train_data, &cfg.pretrain)?;
    let temperature = cfg.soft.temperature.unwrap_or(1e-3);
    let mut thresholds = init_thresholds(cfg.theta_final, model.config.layers, temperature)?;
    let soft = train_soft(model, &thresholds, train_data, &cfg.soft)?;
    let ctx = binarize_and_fix(&mut thresholds);
    let hard = train_hard(model, &ctx, train_data, &cfg.hard)?;
    let final_eval = evaluate(model, &ctx, eval_data)?;
    Ok((
        PipelineOutcome {
            pretrain,
            soft,
            hard,
            final_eval,
            thresholds: thresholds.values(),
        },
        ctx,
    ))
}
