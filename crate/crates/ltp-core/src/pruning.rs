//! Token importance scoring, threshold masks, and baseline pruning schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-layer learnable thresholds with the soft-mask temperature.
#[derive(Clone)]
pub struct ThresholdSet {
    /// 1 x L parameter holding one threshold per layer.
    pub theta: Param,
    pub temperature: f64,
    pub learnable: bool,
}

impl ThresholdSet {
    pub fn new(values: Vec<f64>, temperature: f64, learnable: bool) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if values.is_empty() {
            return Err(Error::invalid("thresholds must cover at least one layer"));
        }
        Ok(ThresholdSet {
            theta: Param::new("thresholds", Tensor::vector(values)),
            temperature,
            learnable,
        })
    }

    pub fn layers(&self) -> usize {
        self.theta.state().value.numel()
    }

    pub fn values(&self) -> Vec<f64> {
        self.theta.state().value.data().to_vec()
    }

    pub fn freeze(&mut self) {
        self.learnable = false;
    }
}

/// Linearly rising manual thresholds: layer l gets `theta_final * l / L`.
pub fn manual_thresholds(theta_final: f64, layers: usize, temperature: f64) -> Result<ThresholdSet> {
    if theta_final < 0.0 {
        return Err(Error::invalid("final threshold must be non-negative"));
    }
    if layers == 0 {
        return Err(Error::invalid("layer count must be positive"));
    }
    let values = (1..=layers)
        .map(|l| theta_final * l as f64 / layers as f64)
        .collect();
    ThresholdSet::new_allow_zero(values, temperature, false)
}

impl ThresholdSet {
    // manual_thresholds may legitimately produce all-zero thresholds
    fn new_allow_zero(values: Vec<f64>, temperature: f64, learnable: bool) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(ThresholdSet {
            theta: Param::new("thresholds", Tensor::vector(values)),
            temperature,
            learnable,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    None,
    Soft,
    Hard,
    TopK,
    Spatten,
    Manual,
}

/// Everything `encode` needs to know about pruning for one run.
#[derive(Clone)]
pub struct PruneContext {
    pub mode: PruneMode,
    pub thresholds: Option<ThresholdSet>,
    /// Per-layer retain ratios for topk/spatten.
    pub schedule: Option<Vec<f64>>,
    /// When set, topk counts are `ceil(ratio * reference_len)` instead of
    /// `ceil(ratio * n)` — an absolute-count schedule anchored to the
    /// training length distribution.
    pub schedule_ref_len: Option<usize>,
    /// Positions never pruned (the classification token lives at 0).
    pub protected: Vec<usize>,
}

impl PruneContext {
    pub fn none() -> Self {
        PruneContext {
            mode: PruneMode::None,
            thresholds: None,
            schedule: None,
            schedule_ref_len: None,
            protected: vec![0],
        }
    }

    pub fn soft(thresholds: ThresholdSet) -> Self {
        PruneContext {
            mode: PruneMode::Soft,
            thresholds: Some(thresholds),
            schedule: None,
            schedule_ref_len: None,
            protected: vec![0],
        }
    }

    pub fn hard(thresholds: ThresholdSet) -> Self {
        PruneContext {
            mode: PruneMode::Hard,
            thresholds: Some(thresholds),
            schedule: None,
            schedule_ref_len: None,
            protected: vec![0],
        }
    }

    pub fn topk(schedule: Vec<f64>) -> Self {
        PruneContext {
            mode: PruneMode::TopK,
            thresholds: None,
            schedule: Some(schedule),
            schedule_ref_len: None,
            protected: vec![0],
        }
    }

    pub fn spatten(final_ratio: f64, layers: usize) -> Result<Self> {
        Ok(PruneContext {
            mode: PruneMode::Spatten,
            thresholds: None,
            schedule: Some(spatten_schedule(final_ratio, layers)?),
            schedule_ref_len: None,
            protected: vec![0],
        })
    }

    pub fn manual(theta_final: f64, layers: usize, temperature: f64) -> Result<Self> {
        Ok(PruneContext {
            mode: PruneMode::Manual,
            thresholds: Some(manual_thresholds(theta_final, layers, temperature)?),
            schedule: None,
            schedule_ref_len: None,
            protected: vec![0],
        })
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.mode {
            PruneMode::None => Ok(()),
            PruneMode::Soft | PruneMode::Hard | PruneMode::Manual => {
                let t = self
                    .thresholds
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("{:?} mode requires thresholds", self.mode)))?;
                if t.layers() != layers {
                    return Err(Error::invalid(format!(
                        "thresholds cover {} layers, model has {}",
                        t.layers(),
                        layers
                    )));
                }
                Ok(())
            }
            PruneMode::TopK | PruneMode::Spatten => {
                let s = self
                    .schedule
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("{:?} mode requires a schedule", self.mode)))?;
                if s.len() != layers {
                    return Err(Error::invalid(format!(
                        "schedule covers {} layers, model has {}",
                        s.len(),
                        layers
                    )));
                }
                if s.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
                    return Err(Error::invalid("retain ratios must lie in [0, 1]"));
                }
                Ok(())
            }
        }
    }
}

/// Per-layer record of what pruning did to one sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Importance score per original position (0 for inactive positions).
    pub scores: Vec<f64>,
    /// Mask per original position: binary for hard modes, the cumulative
    /// running product for soft mode.
    pub mask: Vec<f64>,
    /// Tokens active while computing this layer.
    pub entering_len: usize,
    /// Tokens still active after this layer's pruning hook.
    pub retained: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PruneTrace {
    pub layers: Vec<LayerTrace>,
}

impl PruneTrace {
    /// Retained length entering each layer (what the FLOPs model consumes).
    pub fn entering_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.entering_len).collect()
    }

    pub fn retained_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.retained).collect()
    }
}

/// Mean attention each token receives, averaged over heads and active
/// queries. `head_probs` are row-stochastic n x n matrices; `active`
/// marks which positions participate in the normalization.
pub fn importance_scores(head_probs: &[Tensor], active: &[bool]) -> Result<Vec<f64>> {
    let n = active.len();
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Err(Error::invalid("importance_scores: no active tokens"));
    }
    if head_probs.is_empty() {
        return Err(Error::invalid("importance_scores: no attention heads"));
    }
    let n_h = head_probs.len();
    let mut scores = vec![0.0; n];
    for probs in head_probs {
        if probs.shape() != [n, n] {
            return Err(Error::shape(
                "importance_scores",
                format!("head probs {:?}, expected [{}, {}]", probs.shape(), n, n),
            ));
        }
        for (q, &is_active) in active.iter().enumerate() {
            if !is_active {
                continue;
            }
            for i in 0..n {
                scores[i] += probs.at(q, i);
            }
        }
    }
    let norm = 1.0 / (n_h as f64 * n_active as f64);
    for (i, s) in scores.iter_mut().enumerate() {
        *s = if active[i] { *s * norm } else { 0.0 };
    }
    Ok(scores)
}

/// Binary keep mask: keep iff score strictly exceeds the threshold or the
/// position is protected.
pub fn hard_mask(scores: &[f64], theta: f64, protected: &[usize]) -> Vec<bool> {
    let mut keep: Vec<bool> = scores.iter().map(|&s| s > theta).collect();
    for &p in protected {
        if p < keep.len() {
            keep[p] = true;
        }
    }
    keep
}

/// Differentiable mask node sigma((s - theta_l) / T) on the graph.
/// `theta_layer` must be a scalar node sliced from the threshold set.
pub fn soft_mask(graph: &mut Graph, scores: NodeId, theta_layer: NodeId, temperature: f64) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::invalid("soft_mask: temperature must be positive"));
    }
    let diff = graph.broadcast_sub(scores, theta_layer)?;
    let scaled = graph.scale(diff, 1.0 / temperature);
    Ok(graph.sigmoid(scaled))
}

/// Multiply layer output columns by the running mask product. Returns the
/// masked output and the updated running product (running * mask), which
/// keeps soft pruning monotone per token.
pub fn apply_soft_mask(
    graph: &mut Graph,
    layer_out: NodeId,
    mask: NodeId,
    running: NodeId,
) -> Result<(NodeId, NodeId)> {
    let updated = graph.mul(running, mask)?;
    let masked = graph.scale_cols(layer_out, updated)?;
    Ok((masked, updated))
}

/// Drop pruned columns, preserving original order. Returns the compacted
/// activation node and the original indices of the surviving columns.
pub fn compact(graph: &mut Graph, x: NodeId, keep: &[bool]) -> Result<(NodeId, Vec<usize>)> {
    let indices: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect();
    if indices.is_empty() {
        return Err(Error::invalid("compact: empty keep set"));
    }
    let out = graph.slice_cols(x, &indices)?;
    Ok((out, indices))
}

/// Mean-over-layers L1 norm of the per-layer soft masks (Eq. 12 shape).
/// Pad positions must already carry exact-zero mask entries.
pub fn reg_loss(graph: &mut Graph, masks: &[NodeId]) -> Result<NodeId> {
    if masks.is_empty() {
        return Err(Error::invalid("reg_loss: need at least one layer mask"));
    }
    let mut total: Option<NodeId> = None;
    for &m in masks {
        let norm = graph.l1(m);
        total = Some(match total {
            Some(t) => graph.add(t, norm)?,
            None => norm,
        });
    }
    Ok(graph.scale(total.unwrap(), 1.0 / masks.len() as f64))
}

/// SpAtten-style schedule: the first three layers keep everything, then
/// ratios decay linearly to `final_ratio` at the last layer. Non-positive
/// final ratios clamp to the minimum-keep floor at application time.
pub fn spatten_schedule(final_ratio: f64, layers: usize) -> Result<Vec<f64>> {
    if final_ratio > 1.0 || final_ratio < -1.0 {
        return Err(Error::invalid("final retain ratio must lie in [-1, 1]"));
    }
    if layers < 4 {
        return Err(Error::invalid(format!(
            "spatten schedule needs at least 4 layers, got {}",
            layers
        )));
    }
    let mut ratios = Vec::with_capacity(layers);
    for l in 1..=layers {
        let r = if l <= 3 {
            1.0
        } else {
            // line through (3, 1.0) and (layers, final_ratio)
            1.0 + (final_ratio - 1.0) * (l as f64 - 3.0) / (layers as f64 - 3.0)
        };
        ratios.push(r.clamp(0.0, 1.0));
    }
    Ok(ratios)
}

/// Retained token count for a ratio applied to `n` tokens, clamped so at
/// least one token survives.
pub fn ratio_to_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

/// Keep flags for the k largest scores; ties keep the lower index.
pub fn topk_select(scores: &[f64], k: usize) -> Result<Vec<bool>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("topk_select: k={} out of range 1..={}", k, n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // descending by score, ascending by index on ties
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; n];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for j in 0..n {
                *t.at_mut(i, j) = row[j] / sum;
            }
        }
        t
    }

    #[test]
    fn importance_single_token() {
        let probs = vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
        let s = importance_scores(&probs, &[true]).unwrap();
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn importance_uniform_attention() {
        let probs = vec![Tensor::full(vec![4, 4], 0.25)];
        let s = importance_scores(&probs, &[true; 4]).unwrap();
        for v in s {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn importance_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3;
        let heads = vec![row_stochastic(&mut rng, n), row_stochastic(&mut rng, n)];
        let s = importance_scores(&heads, &[true; 3]).unwrap();
        // brute-force Eq. 7 loop
        for i in 0..n {
            let mut acc = 0.0;
            for h in &heads {
                for q in 0..n {
                    acc += h.at(q, i);
                }
            }
            let expect = acc / (2.0 * n as f64);
            assert!((s[i] - expect).abs() < 1e-12);
        }
        // normalization: sums to 1 over active tokens
        let total: f64 = s.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn importance_rejects_all_inactive() {
        let probs = vec![Tensor::full(vec![2, 2], 0.5)];
        assert!(importance_scores(&probs, &[false, false]).is_err());
    }

    #[test]
    fn hard_mask_strict_comparison() {
        let scores = [0.4, 0.3, 0.2, 0.1];
        let keep = hard_mask(&scores, 0.25, &[]);
        assert_eq!(keep, vec![true, true, false, false]);
        // theta == score prunes that token (strict inequality)
        let keep = hard_mask(&scores, 0.3, &[]);
        assert_eq!(keep, vec![true, false, false, false]);
        // -inf keeps everything
        let keep = hard_mask(&scores, f64::NEG_INFINITY, &[]);
        assert!(keep.iter().all(|&k| k));
        // protected overrides
        let keep = hard_mask(&scores, 1.0, &[0]);
        assert_eq!(keep, vec![true, false, false, false]);
    }

    #[test]
    fn soft_mask_values() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::vector(vec![0.5, 0.5 + 20.0 * 0.01, 0.5 - 20.0 * 0.01]), false);
        let theta = g.leaf(Tensor::scalar(0.5), false);
        let m = soft_mask(&mut g, s, theta, 0.01).unwrap();
        let v = g.value(m).data();
        assert_eq!(v[0], 0.5); // s == theta
        assert!((v[1] - 1.0).abs() < 1e-8); // +20 temperature units
        assert!(v[2] < 1e-8);
    }

    #[test]
    fn soft_mask_theta_grad_at_boundary() {
        // d(mask)/d(theta) at s == theta is -1/(4T)
        for t in [1e-2, 1e-3] {
            let err = crate::autodiff::grad_check(
                move |g, theta| {
                    let s = g.leaf(Tensor::scalar(0.5), false);
                    let m = soft_mask(g, s, theta, t)?;
                    Ok(g.sum(m))
                },
                &Tensor::scalar(0.5),
                1e-8,
            )
            .unwrap();
            assert!(err < 1e-4, "T={}: err {}", t, err);
            // and the analytic value itself
            let mut g = Graph::new();
            let theta = g.leaf(Tensor::scalar(0.5), true);
            let s = g.leaf(Tensor::scalar(0.5), false);
            let m = soft_mask(&mut g, s, theta, t).unwrap();
            let loss = g.sum(m);
            g.backward(loss).unwrap();
            let grad = g.grad(theta).unwrap().item().unwrap();
            assert!((grad + 1.0 / (4.0 * t)).abs() / (1.0 / (4.0 * t)) < 1e-12);
        }
    }

    #[test]
    fn soft_mask_converges_to_hard_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let theta = rng.gen_range(0.0..0.1);
            let scores: Vec<f64> = (0..8)
                .map(|_| {
                    let s: f64 = rng.gen_range(0.0..0.1);
                    if (s - theta).abs() < 1e-6 {
                        s + 1e-3
                    } else {
                        s
                    }
                })
                .collect();
            let hard = hard_mask(&scores, theta, &[]);
            let mut g = Graph::new();
            let sn = g.leaf(Tensor::vector(scores.clone()), false);
            let tn = g.leaf(Tensor::scalar(theta), false);
            let m = soft_mask(&mut g, sn, tn, 1e-8).unwrap();
            for (i, &mv) in g.value(m).data().iter().enumerate() {
                assert_eq!(mv >= 0.5, hard[i], "score {} theta {}", scores[i], theta);
            }
        }
    }

    #[test]
    fn apply_soft_mask_identity_and_kill() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), false);
        let ones = g.leaf(Tensor::ones(vec![1, 3]), false);
        let running = g.leaf(Tensor::ones(vec![1, 3]), false);
        let (out, run) = apply_soft_mask(&mut g, x, ones, running).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
        assert_eq!(g.value(run).data(), &[1.0, 1.0, 1.0]);

        let kill = g.leaf(Tensor::vector(vec![1.0, 0.0, 1.0]), false);
        let (out2, run2) = apply_soft_mask(&mut g, x, kill, run).unwrap();
        assert_eq!(g.value(out2).at(0, 1), 0.0);
        assert_eq!(g.value(out2).at(1, 1), 0.0);
        assert_eq!(g.value(run2).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn apply_soft_mask_composes_multiplicatively() {
        // two layers of 0.5 scale a column by 0.25 relative to unmasked
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![8.0, 8.0]).unwrap(), false);
        let half = g.leaf(Tensor::vector(vec![0.5, 1.0]), false);
        let running = g.leaf(Tensor::ones(vec![1, 2]), false);
        let (out1, run1) = apply_soft_mask(&mut g, x, half, running).unwrap();
        let (out2, run2) = apply_soft_mask(&mut g, out1, half, run1).unwrap();
        // second application multiplies by running (0.25), so the column
        // sits at 8 * 0.5 * 0.25 relative to... check running itself:
        assert_eq!(g.value(run2).data(), &[0.25, 1.0]);
        assert!(g.value(out2).at(0, 0) < g.value(out1).at(0, 0));
    }

    #[test]
    fn compact_basics() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap(), false);
        let (all, map) = compact(&mut g, x, &[true; 4]).unwrap();
        assert_eq!(g.value(all).data(), g.value(x).data());
        assert_eq!(map, vec![0, 1, 2, 3]);

        let (one, map) = compact(&mut g, x, &[true, false, false, false]).unwrap();
        assert_eq!(g.value(one).shape(), &[2, 1]);
        assert_eq!(map, vec![0]);

        assert!(compact(&mut g, x, &[false; 4]).is_err());
    }

    #[test]
    fn reg_loss_literal_values() {
        let mut g = Graph::new();
        let n = 5;
        let layers = 3;
        let masks: Vec<_> = (0..layers)
            .map(|_| g.leaf(Tensor::ones(vec![1, n]), false))
            .collect();
        let loss = reg_loss(&mut g, &masks).unwrap();
        assert!((g.value(loss).item().unwrap() - n as f64).abs() < 1e-12);

        let zeros: Vec<_> = (0..layers)
            .map(|_| g.leaf(Tensor::zeros(vec![1, n]), false))
            .collect();
        let loss = reg_loss(&mut g, &zeros).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn reg_loss_theta_grad_matches_closed_form() {
        // d L_reg / d theta = -(1/L) sum_i sigma'((s_i - theta)/T) / T  (single layer: L=1)
        let scores = vec![0.02, 0.035, 0.05, 0.01];
        let t = 0.01;
        let build = {
            let scores = scores.clone();
            move |g: &mut Graph, theta: NodeId| -> crate::error::Result<NodeId> {
                let s = g.leaf(Tensor::vector(scores.clone()), false);
                let m = soft_mask(g, s, theta, t)?;
                reg_loss(g, &[m])
            }
        };
        let err = crate::autodiff::grad_check(build, &Tensor::scalar(0.03), 1e-7).unwrap();
        assert!(err < 1e-5, "err {}", err);

        // sign: pushing theta up always prunes more, so the gradient is <= 0
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::scalar(0.03), true);
        let s = g.leaf(Tensor::vector(scores), false);
        let m = soft_mask(&mut g, s, theta, t).unwrap();
        let loss = reg_loss(&mut g, &[m]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(theta).unwrap().item().unwrap() <= 0.0);
    }

    #[test]
    fn manual_thresholds_formula() {
        let t = manual_thresholds(0.01, 12, 1e-3).unwrap();
        let v = t.values();
        assert!((v[5] - 0.005).abs() < 1e-15); // layer 6 of 12
        assert_eq!(v[11], 0.01); // layer L exactly
        let zero = manual_thresholds(0.0, 4, 1e-3).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spatten_schedule_shape() {
        let all = spatten_schedule(1.0, 12).unwrap();
        assert!(all.iter().all(|&r| r == 1.0));

        let s = spatten_schedule(0.4, 12).unwrap();
        assert_eq!(s[2], 1.0); // layer 3
        assert!((s[11] - 0.4).abs() < 1e-12); // layer 12
        // interior points on the line through (3, 1.0)-(12, 0.4)
        for l in 4..=11 {
            let expect = 1.0 + (0.4 - 1.0) * (l as f64 - 3.0) / 9.0;
            assert!((s[l - 1] - expect).abs() < 1e-12, "layer {}", l);
        }

        assert!(spatten_schedule(0.5, 3).is_err());
        // non-positive ratios clamp at schedule build time
        let neg = spatten_schedule(-0.5, 8).unwrap();
        assert_eq!(neg[7], 0.0);
        assert_eq!(ratio_to_count(neg[7], 10), 1); // minimum-keep floor
    }

    #[test]
    fn ratio_to_count_is_ceil_and_clamped() {
        assert_eq!(ratio_to_count(0.4, 10), 4);
        assert_eq!(ratio_to_count(0.41, 10), 5);
        assert_eq!(ratio_to_count(1.0, 7), 7);
        assert_eq!(ratio_to_count(0.0, 7), 1);
    }

    #[test]
    fn topk_basics() {
        let scores = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(topk_select(&scores, 4).unwrap(), vec![true; 4]);
        assert_eq!(topk_select(&scores, 2).unwrap(), vec![true, true, false, false]);
        assert!(topk_select(&scores, 0).is_err());
        assert!(topk_select(&scores, 5).is_err());
        // ties keep the lower index
        let tied = [0.5, 0.3, 0.3, 0.1];
        assert_eq!(topk_select(&tied, 2).unwrap(), vec![true, true, false, false]);
    }

    proptest! {
        #[test]
        fn topk_equals_threshold_between_order_statistics(
            seed in 0u64..500,
            n in 2usize..24,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // distinct scores
            let mut scores: Vec<f64> = (0..n).map(|i| rng.gen::<f64>() + i as f64 * 1e-9).collect();
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            scores.dedup();
            let n = scores.len();
            // shuffle
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                scores.swap(i, j);
            }
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for k in 1..n {
                let theta = 0.5 * (sorted[k - 1] + sorted[k]);
                let by_theta = hard_mask(&scores, theta, &[]);
                let by_topk = topk_select(&scores, k).unwrap();
                prop_assert_eq!(&by_theta, &by_topk, "k={}", k);
                // and the reverse direction: k = |{s > theta}|
                let count = scores.iter().filter(|&&s| s > theta).count();
                prop_assert_eq!(count, k);
            }
        }

        #[test]
        fn compact_composes_as_conjunction(
            keep1 in proptest::collection::vec(any::<bool>(), 6),
            keep2 in proptest::collection::vec(any::<bool>(), 6),
        ) {
            prop_assume!(keep1.iter().any(|&k| k));
            let x = Tensor::new(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap();
            let mut g = Graph::new();
            let xn = g.leaf(x.clone(), false);
            let (c1, map1) = compact(&mut g, xn, &keep1).unwrap();
            // restrict keep2 to the surviving columns
            let keep2_restricted: Vec<bool> = map1.iter().map(|&i| keep2[i]).collect();
            prop_assume!(keep2_restricted.iter().any(|&k| k));
            let (c2, map2) = compact(&mut g, c1, &keep2_restricted).unwrap();
            let final_orig: Vec<usize> = map2.iter().map(|&j| map1[j]).collect();

            // conjunction in one step
            let conj: Vec<bool> = (0..6).map(|i| keep1[i] && keep2[i]).collect();
            let mut g2 = Graph::new();
            let xn2 = g2.leaf(x, false);
            let (c_conj, map_conj) = compact(&mut g2, xn2, &conj).unwrap();
            prop_assert_eq!(final_orig, map_conj);
            prop_assert_eq!(g.value(c2).data(), g2.value(c_conj).data());
        }
    }
}
