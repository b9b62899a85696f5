use rand::seq::SliceRandom;

use super::Sequence;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Linear interpolation along time to exactly `target` rows.
pub fn resample_to_common_length(seqs: &[Sequence], target: usize) -> Result<Vec<Sequence>> {
    if target < 2 {
        return Err(Error::invalid(format!(
            "target length must be at least 2, got {target}"
        )));
    }
    seqs.iter().map(|s| resample(s, target)).collect()
}

fn resample(s: &Sequence, target: usize) -> Result<Sequence> {
    let len = s.len();
    if len < 2 {
        return Err(Error::InsufficientSamples(format!(
            "repetition has {len} samples, need at least 2"
        )));
    }
    if len == target {
        return Ok(s.clone());
    }
    let dims = s.dims();
    let step = (len - 1) as f64 / (target - 1) as f64;
    let mut data = Vec::with_capacity(target * dims);
    for m in 0..target {
        let pos = m as f64 * step;
        let lo = (pos.floor() as usize).min(len - 2);
        let frac = pos - lo as f64;
        let (a, b) = (s.row(lo), s.row(lo + 1));
        data.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
    }
    Sequence::new(target, dims, data)
}

/// Median of the sequence lengths (lower median for even counts).
pub fn median_length(seqs: &[Sequence]) -> Option<usize> {
    let mut lens: Vec<usize> = seqs.iter().map(Sequence::len).collect();
    lens.sort_unstable();
    lens.get(lens.len().saturating_sub(1) / 2).copied()
}

/// Indices of the `count` dimensions with the largest variance pooled over
/// every timestep of every sequence, ties to the lower index, ascending.
pub fn select_top_variance_dims(seqs: &[Sequence], count: usize) -> Result<Vec<usize>> {
    let dims = seqs.first().map_or(0, Sequence::dims);
    if count == 0 || count > dims {
        return Err(Error::invalid(format!(
            "cannot select {count} of {dims} dimensions"
        )));
    }
    let mut sum = vec![0.0; dims];
    let mut n = 0usize;
    for s in seqs {
        if s.dims() != dims {
            return Err(Error::invalid("sequences differ in dimension"));
        }
        for row in s.rows() {
            sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        n += s.len();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut var = vec![0.0; dims];
    for s in seqs {
        for row in s.rows() {
            for d in 0..dims {
                var[d] += (row[d] - mean[d]).powi(2);
            }
        }
    }
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Output of [`scale_and_center`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub correct: Vec<Sequence>,
    pub incorrect: Vec<Sequence>,
    /// Divisor applied to every value: the max absolute correct entry.
    pub scale: f64,
}

/// Divides everything by the largest absolute value in the correct set,
/// then removes each sequence's per-dimension temporal mean.
pub fn scale_and_center(correct: &[Sequence], incorrect: &[Sequence]) -> Result<Scaled> {
    if correct.is_empty() {
        return Err(Error::InsufficientSamples("correct set is empty".into()));
    }
    let scale = correct
        .iter()
        .flat_map(|s| s.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::invalid(
            "correct set is identically zero, cannot scale",
        ));
    }
    let prep = |s: &Sequence| center(&s.map(|v| v / scale));
    Ok(Scaled {
        correct: correct.iter().map(prep).collect(),
        incorrect: incorrect.iter().map(prep).collect(),
        scale,
    })
}

fn center(s: &Sequence) -> Sequence {
    let (len, dims) = (s.len(), s.dims());
    let mut mean = vec![0.0; dims];
    for row in s.rows() {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    let mut out = s.clone();
    for row in out.data_mut().chunks_mut(dims) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    out
}

/// Repeats the first and last rows `pad` times at either end.
pub fn pad_endpoints(s: &Sequence, pad: usize) -> Sequence {
    let (len, dims) = (s.len(), s.dims());
    let mut data = Vec::with_capacity((len + 2 * pad) * dims);
    for _ in 0..pad {
        data.extend_from_slice(s.row(0));
    }
    data.extend_from_slice(s.data());
    for _ in 0..pad {
        data.extend_from_slice(s.row(len - 1));
    }
    Sequence::new(len + 2 * pad, dims, data).expect("padding preserves shape")
}

/// Root mean square of the entrywise difference over all timesteps and
/// dimensions.
pub fn rms_distance(a: &Sequence, b: &Sequence) -> Result<f64> {
    if a.len() != b.len() || a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op: "rms distance",
            left: vec![a.len(), a.dims()],
            right: vec![b.len(), b.dims()],
        });
    }
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok((ss / a.data().len() as f64).sqrt())
}

fn mean_distance_to(x: &Sequence, set: &[Sequence]) -> Result<f64> {
    let mut acc = 0.0;
    for u in set {
        acc += rms_distance(x, u)?;
    }
    Ok(acc / set.len() as f64)
}

/// Consistency of each correct repetition: its mean RMS distance to every
/// member of the correct set, itself included.
pub fn rms_deviation_correct(correct: &[Sequence]) -> Result<Vec<f64>> {
    if correct.is_empty() {
        return Err(Error::InsufficientSamples("correct set is empty".into()));
    }
    correct
        .iter()
        .map(|u| mean_distance_to(u, correct))
        .collect()
}

/// Mean RMS distance of each incorrect repetition to the correct set.
pub fn rms_deviation_incorrect(incorrect: &[Sequence], correct: &[Sequence]) -> Result<Vec<f64>> {
    if correct.is_empty() {
        return Err(Error::InsufficientSamples("correct set is empty".into()));
    }
    incorrect
        .iter()
        .map(|w| mean_distance_to(w, correct))
        .collect()
}

/// Soft labels `1 - (deviation - mean(xi)) / tau` clamped to `[0, 1]`,
/// returned as (correct, incorrect).
pub fn assign_soft_labels(xi: &[f64], zeta: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if xi.is_empty() {
        return Err(Error::InsufficientSamples("no correct deviations".into()));
    }
    let base = xi.iter().sum::<f64>() / xi.len() as f64;
    let label = |dev: &f64| (1.0 - (dev - base) / tau).clamp(0.0, 1.0);
    Ok((
        xi.iter().map(label).collect(),
        zeta.iter().map(label).collect(),
    ))
}

/// Seeded shuffle of `0..n` returning (first `take`, rest).
pub fn split_indices(n: usize, take: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if take > n {
        return Err(Error::InsufficientSamples(format!(
            "asked for {take} training samples, only {n} available"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let rest = idx.split_off(take);
    Ok((idx, rest))
}
