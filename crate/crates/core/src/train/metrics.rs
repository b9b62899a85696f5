use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Epochs on each side of the minimum that enter the averaged C.
pub const C_WINDOW: usize = 25;

/// Sum of absolute differences between predicted probabilities and soft
/// labels.
pub fn metric_c(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metric C",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CSummary {
    pub min_c: f64,
    /// Index of the first minimum in the trace.
    pub min_index: usize,
    /// Mean over the window around the minimum, clipped to the trace.
    pub avg_c: f64,
}

/// Minimum of a per-epoch C trace and the mean of the `±C_WINDOW` epochs
/// around it.
pub fn summarize_c_trace(trace: &[f64]) -> Result<CSummary> {
    summarize_c_window(trace, C_WINDOW)
}

pub fn summarize_c_window(trace: &[f64], half: usize) -> Result<CSummary> {
    if trace.is_empty() {
        return Err(Error::invalid("cannot summarize an empty C trace"));
    }
    let mut min_index = 0;
    for (i, &c) in trace.iter().enumerate() {
        if c < trace[min_index] {
            min_index = i;
        }
    }
    let lo = min_index.saturating_sub(half);
    let hi = (min_index + half).min(trace.len() - 1);
    let window = &trace[lo..=hi];
    Ok(CSummary {
        min_c: trace[min_index],
        min_index,
        avg_c: window.iter().sum::<f64>() / window.len() as f64,
    })
}

/// Table-style `mean (S±std)` for repeated discriminator-only runs.
pub fn format_runs(mean: f64, std: f64) -> String {
    format!("{mean:.3} (S±{std:.3})")
}

/// Table-style `avg (Mmin)` for a single adversarial run.
pub fn format_window(avg: f64, min: f64) -> String {
    format!("{avg:.3} (M{min:.3})")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Spread {
            min: v[0],
            median,
            mean: v.iter().sum::<f64>() / n as f64,
            max: v[n - 1],
        }
    }
}

/// Population-level comparison of generated against real sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub real_count: usize,
    pub generated_count: usize,
    /// RMS over timesteps and dimensions of the gap between mean curves.
    pub mean_gap: f64,
    /// Same for the standard-deviation curves.
    pub std_gap: f64,
    /// Mean squared second difference of each population.
    pub smoothness_real: f64,
    pub smoothness_generated: f64,
    /// Generated over real smoothness; above 1 means rougher. Unset when
    /// the real population has no curvature at all.
    pub smoothness_ratio: Option<f64>,
    /// RMS distance from each generated sample to its closest real one.
    pub nearest_real: Spread,
    /// Same for each real sample against the other real ones.
    pub nearest_real_baseline: Option<Spread>,
    pub mode_collapse_score: Option<f64>,
}

fn seq_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, m, d] if n > 0 => Ok((n, m, d)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0, 0],
        }),
    }
}

fn same_layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (na, m, d) = seq_dims(op, a)?;
    let (_, mb, db) = seq_dims(op, b)?;
    if (m, d) != (mb, db) {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok((na, m, d))
}

fn samples(t: &Tensor) -> std::slice::ChunksExact<'_, f64> {
    let per = t.shape()[1] * t.shape()[2];
    t.data().chunks_exact(per)
}

/// Per-position mean and population standard deviation.
fn moment_curves(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let per = t.shape()[1] * t.shape()[2];
    let n = t.shape()[0] as f64;
    let mut mean = vec![0.0; per];
    for s in samples(t) {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; per];
    for s in samples(t) {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
}

fn rms_gap(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn smoothness(t: &Tensor) -> f64 {
    let (n, m, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if m < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for s in samples(t) {
        for i in 1..m - 1 {
            for j in 0..d {
                let dd = s[(i + 1) * d + j] - 2.0 * s[i * d + j] + s[(i - 1) * d + j];
                total += dd * dd;
            }
        }
    }
    total / (n * (m - 2) * d) as f64
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn nearest(from: &Tensor, to: &Tensor, skip_self: bool) -> Vec<f64> {
    let per = (from.shape()[1] * from.shape()[2]) as f64;
    samples(from)
        .enumerate()
        .map(|(i, a)| {
            samples(to)
                .enumerate()
                .filter(|&(j, _)| !(skip_self && i == j))
                .map(|(_, b)| euclid(a, b) / per.sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn mean_pairwise(t: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = samples(t).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += euclid(rows[i], rows[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Mean pairwise Euclidean distance among generated samples over the same
/// quantity among real ones; values near 0 mean the generator collapsed.
pub fn mode_collapse_score(generated: &Tensor, real: &Tensor) -> Result<f64> {
    let (ng, _, _) = same_layout("mode collapse score", generated, real)?;
    if ng < 2 || real.shape()[0] < 2 {
        return Err(Error::InsufficientSamples(
            "mode collapse score needs at least two generated and two real samples".into(),
        ));
    }
    let spread = mean_pairwise(real);
    if spread == 0.0 {
        return Err(Error::invalid("real samples are all identical"));
    }
    Ok(mean_pairwise(generated) / spread)
}

/// Mean and spread gaps, roughness and memorization probe for `generated`
/// against `real`, both `[batch, seq_len, dims]`.
pub fn fidelity_metrics(real: &Tensor, generated: &Tensor) -> Result<FidelityReport> {
    let (nr, _, _) = same_layout("fidelity metrics", real, generated)?;
    let ng = generated.shape()[0];
    let (mr, sr) = moment_curves(real);
    let (mg, sg) = moment_curves(generated);
    let smooth_r = smoothness(real);
    let smooth_g = smoothness(generated);
    let ratio = (smooth_r > 0.0).then(|| smooth_g / smooth_r);
    Ok(FidelityReport {
        real_count: nr,
        generated_count: ng,
        mean_gap: rms_gap(&mr, &mg),
        std_gap: rms_gap(&sr, &sg),
        smoothness_real: smooth_r,
        smoothness_generated: smooth_g,
        smoothness_ratio: ratio,
        nearest_real: Spread::of(&nearest(generated, real, false)),
        nearest_real_baseline: (nr >= 2).then(|| Spread::of(&nearest(real, real, true))),
        mode_collapse_score: mode_collapse_score(generated, real).ok(),
    })
}
