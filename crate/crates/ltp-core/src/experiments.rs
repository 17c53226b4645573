//! Higher-level experiment drivers shared by the command-line tool and
//! the acceptance suite: the lambda/temperature sweep and the
//! robustness-to-length protocol.

use serde::{Deserialize, Serialize};

use crate::datagen::{nearest_rank_quantile, quantile_split, Example};
use crate::encoder::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::pruning::{spatten_schedule, PruneContext, PruneMode};
use crate::training::{
    evaluate, run_pipeline, train_none, train_with_context, PipelineConfig, PipelineOutcome,
    Stage, StageConfig,
};

/// One pipeline run of the sweep, summarized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub temperature: f64,
    pub accuracy: f64,
    pub relative_flops: f64,
    /// Mean retained tokens per layer, averaged over layers.
    pub mean_retained: f64,
    pub thresholds: Vec<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    /// Accuracy of an unpruned model fine-tuned for the same total number
    /// of epochs, evaluated without pruning.
    pub baseline_accuracy: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out =
            String::from("lambda,temperature,accuracy,relative_flops,mean_retained,diverged\n");
        out.push_str(&format!(
            "baseline,,{:.4},1.0000,,false\n",
            self.baseline_accuracy
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.2},{}\n",
                r.lambda, r.temperature, r.accuracy, r.relative_flops, r.mean_retained, r.diverged
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Train the unpruned reference: plain fine-tuning for as many epochs as
/// the full three-stage pipeline spends, evaluated with pruning off.
pub fn train_unpruned_baseline(
    model_cfg: &ModelConfig,
    model_seed: u64,
    pipeline: &PipelineConfig,
    train: &[Example],
    eval: &[Example],
) -> Result<f64> {
    let model = EncoderModel::new(model_cfg.clone(), model_seed)?;
    let cfg = StageConfig {
        stage: Stage::Pretrain,
        epochs: pipeline.pretrain.epochs + pipeline.soft.epochs + pipeline.hard.epochs,
        ..pipeline.pretrain.clone()
    };
    train_none(&model, train, &cfg)?;
    Ok(evaluate(&model, &PruneContext::none(), eval)?.accuracy)
}

/// Run the full pipeline once per (lambda, temperature) pair, each from a
/// fresh model at the same seed, and summarize the final evaluations.
pub fn run_sweep(
    model_cfg: &ModelConfig,
    model_seed: u64,
    pipeline: &PipelineConfig,
    lambdas: &[f64],
    temperatures: &[f64],
    train: &[Example],
    eval: &[Example],
) -> Result<SweepReport> {
    if lambdas.is_empty() || temperatures.is_empty() {
        return Err(Error::invalid("sweep lists must be non-empty"));
    }
    let baseline_accuracy =
        train_unpruned_baseline(model_cfg, model_seed, pipeline, train, eval)?;
    let mut rows = Vec::new();
    for &temperature in temperatures {
        for &lambda in lambdas {
            let (outcome, _) =
                run_sweep_point(model_cfg, model_seed, pipeline, lambda, temperature, train, eval)?;
            rows.push(summarize(&outcome, lambda, temperature));
        }
    }
    Ok(SweepReport { baseline_accuracy, rows })
}

/// One pipeline run at a given lambda and temperature.
pub fn run_sweep_point(
    model_cfg: &ModelConfig,
    model_seed: u64,
    pipeline: &PipelineConfig,
    lambda: f64,
    temperature: f64,
    train: &[Example],
    eval: &[Example],
) -> Result<(PipelineOutcome, PruneContext)> {
    let model = EncoderModel::new(model_cfg.clone(), model_seed)?;
    let mut cfg = pipeline.clone();
    cfg.soft.lambda = Some(lambda);
    cfg.soft.temperature = Some(temperature);
    run_pipeline(&model, &cfg, train, eval)
}

fn summarize(outcome: &PipelineOutcome, lambda: f64, temperature: f64) -> SweepRow {
    SweepRow {
        lambda,
        temperature,
        accuracy: outcome.final_eval.accuracy,
        relative_flops: outcome.final_eval.relative_flops,
        mean_retained: mean(&outcome.final_eval.mean_retained),
        thresholds: outcome.thresholds.clone(),
        diverged: outcome.pretrain.diverged || outcome.soft.diverged || outcome.hard.diverged,
    }
}

/// One cell of the robustness table. `None` metrics mark an empty split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustCell {
    pub split: String,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub relative_flops: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustReport {
    /// Median training length; the fixed schedule counts tokens against it.
    pub reference_len: usize,
    pub baseline_final_ratio: f64,
    pub thresholds: Vec<f64>,
    pub ltp: Vec<RobustCell>,
    pub baseline: Vec<RobustCell>,
}

impl RobustReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("method,split,count,accuracy,relative_flops\n");
        for (name, cells) in [("ltp", &self.ltp), ("topk_schedule", &self.baseline)] {
            for c in cells {
                let acc = c.accuracy.map_or("n/a".into(), |a| format!("{:.4}", a));
                let fl = c.relative_flops.map_or("n/a".into(), |f| format!("{:.4}", f));
                out.push_str(&format!("{},{},{},{},{}\n", name, c.split, c.count, acc, fl));
            }
        }
        out
    }
}

/// Per-layer retain-ratio schedule for the fixed baselines: the staged
/// decay shape when the model is deep enough for it, otherwise a plain
/// linear ramp from keep-all down to the final ratio.
pub fn fixed_schedule(layers: usize, final_ratio: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&final_ratio) {
        return Err(Error::invalid("final_ratio must lie in [0, 1]"));
    }
    if layers >= 4 {
        return spatten_schedule(final_ratio, layers);
    }
    if layers == 0 {
        return Err(Error::invalid("schedule needs at least one layer"));
    }
    Ok((1..=layers)
        .map(|l| {
            if layers == 1 {
                final_ratio
            } else {
                1.0 + (final_ratio - 1.0) * (l - 1) as f64 / (layers - 1) as f64
            }
        })
        .collect())
}

fn eval_cells(
    model: &EncoderModel,
    ctx: &PruneContext,
    splits: &[(&str, &[Example])],
) -> Result<Vec<RobustCell>> {
    let mut cells = Vec::new();
    for &(name, data) in splits {
        if data.is_empty() {
            cells.push(RobustCell {
                split: name.to_string(),
                count: 0,
                accuracy: None,
                relative_flops: None,
            });
            continue;
        }
        let report = evaluate(model, ctx, data)?;
        cells.push(RobustCell {
            split: name.to_string(),
            count: data.len(),
            accuracy: Some(report.accuracy),
            relative_flops: Some(report.relative_flops),
        });
    }
    Ok(cells)
}

/// Robustness-to-length protocol: train on the at-or-below-median-length
/// subset only, then evaluate on the evaluation set split at its own
/// length quantiles. The learned-threshold model is compared against a
/// fixed top-k schedule whose per-layer keep counts are anchored to the
/// training median, so its pruning does not adapt to longer inputs.
pub fn run_robustness(
    model_cfg: &ModelConfig,
    model_seed: u64,
    pipeline: &PipelineConfig,
    baseline_final_ratio: f64,
    train: &[Example],
    eval: &[Example],
) -> Result<RobustReport> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("robustness protocol needs non-empty datasets"));
    }
    let mut lengths: Vec<usize> = train.iter().map(|e| e.len()).collect();
    lengths.sort_unstable();
    let median = nearest_rank_quantile(&lengths, 0.5);
    let short: Vec<Example> = train.iter().filter(|e| e.len() <= median).cloned().collect();
    if short.is_empty() {
        return Err(Error::invalid("no training sequences at or below the median length"));
    }

    let (s, m, l) = quantile_split(eval)?;
    let splits: Vec<(&str, &[Example])> =
        vec![("short", &s[..]), ("mid", &m[..]), ("long", &l[..])];

    // learned thresholds, trained on the short subset
    let ltp_model = EncoderModel::new(model_cfg.clone(), model_seed)?;
    let (outcome, ltp_ctx) = run_pipeline(&ltp_model, pipeline, &short, &s)?;
    let ltp_cells = eval_cells(&ltp_model, &ltp_ctx, &splits)?;

    // fixed top-k schedule with absolute keep counts, same budget
    let base_model = EncoderModel::new(model_cfg.clone(), model_seed)?;
    train_none(&base_model, &short, &pipeline.pretrain)?;
    let mut base_ctx = PruneContext::topk(fixed_schedule(model_cfg.layers, baseline_final_ratio)?);
    base_ctx.schedule_ref_len = Some(median);
    let mut hard_cfg = pipeline.hard.clone();
    hard_cfg.stage = Stage::Hard;
    train_with_context(&base_model, &base_ctx, &short, &hard_cfg)?;
    debug_assert_eq!(base_ctx.mode, PruneMode::TopK);
    let base_cells = eval_cells(&base_model, &base_ctx, &splits)?;

    Ok(RobustReport {
        reference_len: median,
        baseline_final_ratio,
        thresholds: outcome.thresholds,
        ltp: ltp_cells,
        baseline: base_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, TaskSpec};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_head: 4,
            d_ffn: 16,
            vocab: 24,
            n_max: 32,
            num_classes: 2,
        }
    }

    fn tiny_data(seed: u64, count: usize) -> Vec<Example> {
        generate(
            &TaskSpec {
                vocab: 24,
                num_classes: 2,
                n_signal: 1,
                signal_ids_per_class: 2,
                length_mu: 2.2,
                length_sigma: 0.4,
                n_max: 32,
                seed,
            },
            count,
        )
        .unwrap()
    }

    fn tiny_pipeline() -> PipelineConfig {
        let stage = |s, t, l| StageConfig {
            stage: s,
            epochs: 1,
            lr: 1e-3,
            temperature: t,
            lambda: l,
            batch_size: 8,
            seed: 7,
        };
        PipelineConfig {
            pretrain: stage(Stage::Pretrain, None, None),
            soft: stage(Stage::Soft, Some(1e-3), Some(0.01)),
            hard: stage(Stage::Hard, None, None),
            theta_final: 0.01,
        }
    }

    #[test]
    fn sweep_produces_one_row_per_pair() {
        let train = tiny_data(1, 24);
        let eval = tiny_data(2, 16);
        let report = run_sweep(
            &tiny_cfg(),
            0,
            &tiny_pipeline(),
            &[0.001, 0.2],
            &[1e-3],
            &train,
            &eval,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.baseline_accuracy >= 0.0 && report.baseline_accuracy <= 1.0);
        for r in &report.rows {
            assert_eq!(r.thresholds.len(), 2);
            assert!(r.relative_flops > 0.0 && r.relative_flops <= 1.0 + 1e-12);
        }
        let csv = report.csv();
        // header + baseline row + two sweep rows
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn sweep_rejects_empty_lists() {
        let train = tiny_data(1, 8);
        assert!(run_sweep(&tiny_cfg(), 0, &tiny_pipeline(), &[], &[1e-3], &train, &train).is_err());
    }

    #[test]
    fn robustness_table_shape() {
        let train = tiny_data(3, 32);
        let eval = tiny_data(4, 24);
        let report =
            run_robustness(&tiny_cfg(), 0, &tiny_pipeline(), 0.5, &train, &eval).unwrap();
        assert_eq!(report.ltp.len(), 3);
        assert_eq!(report.baseline.len(), 3);
        assert_eq!(report.ltp[0].split, "short");
        assert_eq!(report.baseline[2].split, "long");
        let total: usize = report.ltp.iter().map(|c| c.count).sum();
        assert_eq!(total, eval.len());
        assert!(report.reference_len > 0);
        // csv: header + 6 cells
        assert_eq!(report.csv().lines().count(), 7);
    }
}
