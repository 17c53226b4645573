//! Synthetic variable-length classification tasks plus sequence-length
//! statistics (quantiles, histograms, KL divergence) and quantile splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS_TOKEN: usize = 0;
const KL_SMOOTHING: f64 = 1e-10;

/// Synthetic task description. Token id 0 is the protected classification
/// token; ids `1..=num_classes * signal_ids_per_class` are signal tokens
/// (class = (id - 1) % num_classes); everything above is noise vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab: usize,
    pub num_classes: usize,
    /// Label-bearing tokens per sequence; the label is the majority class
    /// among them.
    pub n_signal: usize,
    /// Distinct signal token ids per class.
    pub signal_ids_per_class: usize,
    /// Log-normal length distribution (of content tokens, before clamping).
    pub length_mu: f64,
    pub length_sigma: f64,
    pub n_max: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn signal_vocab_size(&self) -> usize {
        self.num_classes * self.signal_ids_per_class
    }

    pub fn noise_start(&self) -> usize {
        1 + self.signal_vocab_size()
    }

    pub fn signal_class(&self, token: usize) -> Option<usize> {
        if token >= 1 && token < self.noise_start() {
            Some((token - 1) % self.num_classes)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.n_signal == 0 {
            return Err(Error::invalid("n_signal must be >= 1"));
        }
        if self.signal_ids_per_class == 0 {
            return Err(Error::invalid("signal_ids_per_class must be >= 1"));
        }
        if self.vocab <= self.noise_start() {
            return Err(Error::invalid(format!(
                "vocab {} leaves no noise tokens (needs > {})",
                self.vocab,
                self.noise_start()
            )));
        }
        if self.n_max < self.n_signal + 2 {
            return Err(Error::invalid(format!(
                "n_max {} cannot fit CLS + {} signal tokens + 1 noise token",
                self.n_max, self.n_signal
            )));
        }
        if self.length_sigma < 0.0 {
            return Err(Error::invalid("length_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Generate `count` labeled sequences. Each sequence is CLS followed by a
/// mix of noise tokens and exactly `n_signal` signal tokens at uniformly
/// random positions; the label class holds a strict majority among the
/// signal tokens, so signal identity determines the label.
pub fn generate(spec: &TaskSpec, count: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lognormal = LogNormal::new(spec.length_mu, spec.length_sigma)
        .map_err(|e| Error::invalid(format!("bad length distribution: {}", e)))?;
    let min_len = spec.n_signal + 2; // CLS + signals + at least one noise token
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = lognormal.sample(&mut rng).round() as i64;
        let n = (raw.max(0) as usize + 1).clamp(min_len, spec.n_max);
        let label = rng.gen_range(0..spec.num_classes);

        // strict majority of signal tokens from the label class
        let majority = spec.n_signal / 2 + 1;
        let mut classes = Vec::with_capacity(spec.n_signal);
        for _ in 0..majority {
            classes.push(label);
        }
        for _ in majority..spec.n_signal {
            classes.push(rng.gen_range(0..spec.num_classes));
        }
        // shuffle class assignments
        for i in (1..classes.len()).rev() {
            let j = rng.gen_range(0..=i);
            classes.swap(i, j);
        }

        // signal positions: uniform among content positions 1..n
        let mut positions: Vec<usize> = (1..n).collect();
        for i in (1..positions.len()).rev() {
            let j = rng.gen_range(0..=i);
            positions.swap(i, j);
        }
        let signal_positions = &positions[..spec.n_signal];

        let mut tokens = vec![0usize; n];
        tokens[0] = CLS_TOKEN;
        for i in 1..n {
            tokens[i] = rng.gen_range(spec.noise_start()..spec.vocab);
        }
        for (slot, &pos) in signal_positions.iter().enumerate() {
            let class = classes[slot];
            let which = rng.gen_range(0..spec.signal_ids_per_class);
            tokens[pos] = 1 + which * spec.num_classes + class;
        }
        out.push(Example { tokens, label });
    }
    Ok(out)
}

/// Label by majority vote over the signal-class tokens in a sequence; the
/// independent oracle a perfect pruner could feed.
pub fn signal_majority_label(spec: &TaskSpec, tokens: &[usize]) -> Option<usize> {
    let mut counts = vec![0usize; spec.num_classes];
    for &t in tokens {
        if let Some(c) = spec.signal_class(t) {
            counts[c] += 1;
        }
    }
    let max = *counts.iter().max()?;
    if max == 0 {
        return None;
    }
    let winners: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter_map(|(c, &k)| (k == max).then_some(c))
        .collect();
    if winners.len() == 1 {
        Some(winners[0])
    } else {
        None // tie: generation guarantees this cannot happen
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthStats {
    pub q1: usize,
    pub q2: usize,
    pub q3: usize,
    pub bin_min: f64,
    pub bin_width: f64,
    pub histogram: Vec<f64>,
    /// KL(these lengths || reference lengths), when a reference was given.
    pub kl_vs_reference: Option<f64>,
}

/// Nearest-rank quantile: the ceil(q * N)-th smallest value.
pub fn nearest_rank_quantile(sorted: &[usize], q: f64) -> usize {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn histogram_mass(lengths: &[usize], bin_min: f64, bin_width: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &l in lengths {
        let mut idx = ((l as f64 - bin_min) / bin_width) as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / lengths.len() as f64)
        .collect()
}

/// Quantiles and a shared-equal-width-bin histogram; with a reference
/// sample, also KL(self || reference) with 1e-10 smoothing of empty bins.
pub fn length_stats(lengths: &[usize], bins: usize, reference: Option<&[usize]>) -> Result<LengthStats> {
    if lengths.is_empty() {
        return Err(Error::invalid("length_stats: empty sample"));
    }
    if bins < 2 {
        return Err(Error::invalid("length_stats: need at least 2 bins"));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();

    // bins anchored on the union range of self and reference
    let mut lo = *sorted.first().unwrap() as f64;
    let mut hi = *sorted.last().unwrap() as f64;
    if let Some(r) = reference {
        if r.is_empty() {
            return Err(Error::invalid("length_stats: empty reference sample"));
        }
        lo = lo.min(*r.iter().min().unwrap() as f64);
        hi = hi.max(*r.iter().max().unwrap() as f64);
    }
    let width = ((hi - lo) / bins as f64).max(1e-12);

    let histogram = histogram_mass(lengths, lo, width, bins);
    let kl = reference.map(|r| {
        let q = histogram_mass(r, lo, width, bins);
        kl_divergence(&histogram, &q)
    });

    Ok(LengthStats {
        q1: nearest_rank_quantile(&sorted, 0.25),
        q2: nearest_rank_quantile(&sorted, 0.50),
        q3: nearest_rank_quantile(&sorted, 0.75),
        bin_min: lo,
        bin_width: width,
        histogram,
        kl_vs_reference: kl,
    })
}

/// KL(p || q) over matched histogram bins with additive smoothing of
/// empty bins.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(KL_SMOOTHING);
            let qi = qi.max(KL_SMOOTHING);
            pi * (pi / qi).ln()
        })
        .sum()
}

/// Partition a dataset by its own length quantiles: lengths <= Q2, in
/// (Q2, Q3], and > Q3.
pub fn quantile_split(dataset: &[Example]) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("quantile_split: empty dataset"));
    }
    let mut lengths: Vec<usize> = dataset.iter().map(|e| e.len()).collect();
    lengths.sort_unstable();
    let q2 = nearest_rank_quantile(&lengths, 0.50);
    let q3 = nearest_rank_quantile(&lengths, 0.75);
    let mut short = Vec::new();
    let mut mid = Vec::new();
    let mut long = Vec::new();
    for e in dataset {
        if e.len() <= q2 {
            short.push(e.clone());
        } else if e.len() <= q3 {
            mid.push(e.clone());
        } else {
            long.push(e.clone());
        }
    }
    Ok((short, mid, long))
}

pub fn write_jsonl(path: &std::path::Path, dataset: &[Example]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in dataset {
        serde_json::to_writer(&mut f, e)?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<Example>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
