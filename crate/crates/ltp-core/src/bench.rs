//! Wall-clock micro-benchmark: threshold selection vs top-k selection over
//! importance-score arrays.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::ratio_to_count;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub ratios: Vec<f64>,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        // sweep shape follows the reference protocol: lengths 128..1024,
        // five retain ratios from 10% to 50%, batches of 32
        BenchConfig {
            lengths: vec![128, 256, 512, 1024],
            ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            batch: 32,
            reps: 1000,
            warmup: 50,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::invalid("reps must be >= 1"));
        }
        if self.ratios.iter().any(|&r| r <= 0.0 || r > 1.0) {
            return Err(Error::invalid("retain ratios must lie in (0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ns: f64,
    pub std_ns: f64,
    pub min_ns: f64,
    pub median_ns: f64,
}

fn stats(samples_ns: &[f64]) -> LatencyStats {
    let n = samples_ns.len() as f64;
    let mean = samples_ns.iter().sum::<f64>() / n;
    let var = samples_ns.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = samples_ns.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    LatencyStats {
        mean_ns: mean,
        std_ns: var.sqrt(),
        min_ns: sorted[0],
        median_ns: sorted[sorted.len() / 2],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchCell {
    pub length: usize,
    pub ratio: f64,
    pub threshold: LatencyStats,
    /// The faster of the two top-k implementations (full sort vs
    /// partition selection).
    pub topk: LatencyStats,
    pub topk_sort: LatencyStats,
    pub topk_partition: LatencyStats,
    /// topk mean / threshold mean.
    pub slowdown: f64,
    /// True when the timer's granularity is coarser than the median
    /// measured latency.
    pub timer_warning: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchResult {
    pub cells: Vec<BenchCell>,
}

/// Keep flags from a single comparison pass. Also returns the number of
/// comparisons performed, which is structurally `n`.
pub fn threshold_select(scores: &[f64], theta: f64) -> (Vec<bool>, usize) {
    let mut keep = Vec::with_capacity(scores.len());
    let mut comparisons = 0;
    for &s in scores {
        comparisons += 1;
        keep.push(s > theta);
    }
    (keep, comparisons)
}

/// Top-k via full descending sort of indices.
pub fn topk_by_sort(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Top-k via partition selection (select_nth_unstable on the scores).
pub fn topk_by_partition(scores: &[f64], k: usize) -> Vec<bool> {
    let n = scores.len();
    if k == n {
        return vec![true; n];
    }
    let mut work: Vec<(f64, usize)> = scores.iter().cloned().zip(0..n).collect();
    work.select_nth_unstable_by(k - 1, |a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
    });
    let mut keep = vec![false; n];
    for &(_, i) in work.iter().take(k) {
        keep[i] = true;
    }
    keep
}

struct Cell {
    scores: Vec<Vec<f64>>,
    thetas: Vec<f64>,
    k: usize,
}

fn build_cell(rng: &mut ChaCha8Rng, length: usize, ratio: f64, batch: usize) -> Cell {
    let k = ratio_to_count(ratio, length);
    let mut scores = Vec::with_capacity(batch);
    let mut thetas = Vec::with_capacity(batch);
    for _ in 0..batch {
        // tiny index-dependent jitter keeps scores distinct
        let s: Vec<f64> = (0..length)
            .map(|i| rng.gen::<f64>() + i as f64 * 1e-12)
            .collect();
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let theta = if k == length {
            sorted[length - 1] - 1.0
        } else {
            0.5 * (sorted[k - 1] + sorted[k])
        };
        scores.push(s);
        thetas.push(theta);
    }
    Cell { scores, thetas, k }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cells = Vec::new();
    for &length in &cfg.lengths {
        for &ratio in &cfg.ratios {
            let cell = build_cell(&mut rng, length, ratio, cfg.batch);

            // correctness first: both kernels must select the same sets
            for (s, &theta) in cell.scores.iter().zip(&cell.thetas) {
                let (by_theta, comparisons) = threshold_select(s, theta);
                assert_eq!(comparisons, s.len());
                let by_sort = topk_by_sort(s, cell.k);
                let by_part = topk_by_partition(s, cell.k);
                if by_theta != by_sort || by_theta != by_part {
                    return Err(Error::invalid(format!(
                        "selection mismatch at length {} ratio {}",
                        length, ratio
                    )));
                }
                let kept = by_theta.iter().filter(|&&b| b).count();
                if kept != cell.k {
                    return Err(Error::invalid("threshold keep-count does not match ratio"));
                }
            }

            let time_method = |f: &dyn Fn(&Cell)| -> Vec<f64> {
                for _ in 0..cfg.warmup {
                    f(&cell);
                }
                let mut samples = Vec::with_capacity(cfg.reps);
                for _ in 0..cfg.reps {
                    let t0 = Instant::now();
                    f(&cell);
                    samples.push(t0.elapsed().as_nanos() as f64);
                }
                samples
            };

            let thr = stats(&time_method(&|c: &Cell| {
                for (s, &theta) in c.scores.iter().zip(&c.thetas) {
                    let (keep, _) = threshold_select(s, theta);
                    std::hint::black_box(keep);
                }
            }));
            let sort = stats(&time_method(&|c: &Cell| {
                for s in &c.scores {
                    std::hint::black_box(topk_by_sort(s, c.k));
                }
            }));
            let part = stats(&time_method(&|c: &Cell| {
                for s in &c.scores {
                    std::hint::black_box(topk_by_partition(s, c.k));
                }
            }));
            let topk = if sort.mean_ns <= part.mean_ns { sort } else { part };

            cells.push(BenchCell {
                length,
                ratio,
                threshold: thr,
                topk,
                topk_sort: sort,
                topk_partition: part,
                slowdown: topk.mean_ns / thr.mean_ns,
                timer_warning: thr.median_ns <= 0.0,
            });
        }
    }
    Ok(BenchResult { cells })
}

/// CSV rendering: one threshold row and one topk row per cell.
pub fn report_csv(result: &BenchResult) -> String {
    let mut out = String::from("length,ratio,method,mean_ns,std_ns,median_ns,slowdown\n");
    for c in &result.cells {
        out.push_str(&format!(
            "{},{},threshold,{:.1},{:.1},{:.1},1.0\n",
            c.length, c.ratio, c.threshold.mean_ns, c.threshold.std_ns, c.threshold.median_ns
        ));
        out.push_str(&format!(
            "{},{},topk,{:.1},{:.1},{:.1},{:.4}\n",
            c.length, c.ratio, c.topk.mean_ns, c.topk.std_ns, c.topk.median_ns, c.slowdown
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_on_distinct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(4..64);
            let scores: Vec<f64> = (0..n).map(|i| rng.gen::<f64>() + i as f64 * 1e-12).collect();
            let k = rng.gen_range(1..=n);
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let theta = if k == n { sorted[n - 1] - 1.0 } else { 0.5 * (sorted[k - 1] + sorted[k]) };
            let (by_theta, comparisons) = threshold_select(&scores, theta);
            assert_eq!(comparisons, n);
            assert_eq!(by_theta, topk_by_sort(&scores, k));
            assert_eq!(by_theta, topk_by_partition(&scores, k));
            assert_eq!(by_theta.iter().filter(|&&b| b).count(), k);
        }
    }

    #[test]
    fn small_sweep_produces_expected_cells() {
        let cfg = BenchConfig {
            lengths: vec![32, 64],
            ratios: vec![0.25, 0.5],
            batch: 4,
            reps: 20,
            warmup: 2,
            seed: 3,
        };
        let result = run_bench(&cfg).unwrap();
        assert_eq!(result.cells.len(), 4);
        for c in &result.cells {
            assert!(c.threshold.mean_ns > 0.0);
            assert!(c.topk.mean_ns > 0.0);
            assert!(c.threshold.std_ns >= 0.0);
            let expect = c.topk.mean_ns / c.threshold.mean_ns;
            assert!((c.slowdown - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_shape() {
        let empty = BenchResult { cells: vec![] };
        assert_eq!(report_csv(&empty).lines().count(), 1);

        let cfg = BenchConfig {
            lengths: vec![16],
            ratios: vec![0.5],
            batch: 2,
            reps: 5,
            warmup: 1,
            seed: 4,
        };
        let result = run_bench(&cfg).unwrap();
        let csv = report_csv(&result);
        // one cell: header + threshold row + topk row
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().contains("threshold"));
        assert!(csv.lines().nth(2).unwrap().contains("topk"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BenchConfig::default();
        cfg.reps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = BenchConfig::default();
        cfg.ratios = vec![1.5];
        assert!(cfg.validate().is_err());
    }
}
