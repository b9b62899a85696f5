//! Damped-sinusoid stand-in for recorded repetitions.
//!
//! Correct repetitions share one damped oscillation per channel with small
//! amplitude and phase jitter; incorrect ones are damped harder, shrunk
//! and phase shifted. Extra columns carry low-level noise so that a
//! variance-based dimension selection recovers the signal channels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::io::{write_manifest, write_sequence_csv, ManifestEntry};
use super::{Class, RawRepetition, Sequence};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// Nominal raw length; individual repetitions vary by up to `len_jitter`.
    pub len: usize,
    pub len_jitter: usize,
    /// Channels carrying the oscillation.
    pub signal_dims: usize,
    /// Total columns per file.
    pub columns: usize,
    /// Peak amplitude of the first channel, in raw units.
    pub amplitude: f64,
    pub movement: String,
}

impl SyntheticConfig {
    /// Three-channel files of the first movement's raw length.
    pub fn small(n: usize) -> Self {
        SyntheticConfig {
            n_correct: n,
            n_incorrect: n,
            len: 240,
            len_jitter: 8,
            signal_dims: 3,
            columns: 3,
            amplitude: 45.0,
            movement: "m01".into(),
        }
    }
}

/// Column holding signal channel `d`.
pub fn signal_column(d: usize, signal_dims: usize, columns: usize) -> usize {
    d * (columns / signal_dims)
}

fn repetition(cfg: &SyntheticConfig, class: Class, rng: &mut Rng) -> Result<Sequence> {
    let len = if cfg.len_jitter == 0 {
        cfg.len
    } else {
        rng.random_range(cfg.len - cfg.len_jitter..=cfg.len + cfg.len_jitter)
    };
    let normal = |rng: &mut Rng| -> f64 { StandardNormal.sample(rng) };
    let (shrink, shift, damping) = match class {
        Class::Correct => (1.0, 0.0, 1.5),
        Class::Incorrect => (rng.random_range(0.55..0.8), rng.random_range(0.3..0.7), 2.5),
    };
    let params: Vec<(f64, f64)> = (0..cfg.signal_dims)
        .map(|d| {
            let amp = cfg.amplitude
                * (1.0 - 0.2 * d as f64 / cfg.signal_dims as f64)
                * (1.0 + 0.04 * normal(rng))
                * shrink;
            let phase = 0.6 * d as f64 + 0.04 * normal(rng) + shift;
            (amp, phase)
        })
        .collect();
    let noise = 0.01 * cfg.amplitude;
    let mut data = vec![0.0; len * cfg.columns];
    for m in 0..len {
        let t = m as f64 / (len - 1) as f64;
        let row = &mut data[m * cfg.columns..(m + 1) * cfg.columns];
        for v in row.iter_mut() {
            *v = noise * normal(rng);
        }
        for (d, &(amp, phase)) in params.iter().enumerate() {
            let col = signal_column(d, cfg.signal_dims, cfg.columns);
            row[col] += amp * (-damping * t).exp() * (3.0 * PI * t + phase).sin();
        }
    }
    Sequence::new(len, cfg.columns, data)
}

pub fn damped_sinusoids(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Vec<RawRepetition>> {
    if cfg.signal_dims == 0 || cfg.signal_dims > cfg.columns || cfg.len < 2 + cfg.len_jitter {
        return Err(Error::invalid("inconsistent synthetic configuration"));
    }
    let mut reps = Vec::with_capacity(cfg.n_correct + cfg.n_incorrect);
    for (class, n, tag) in [
        (Class::Correct, cfg.n_correct, 'c'),
        (Class::Incorrect, cfg.n_incorrect, 'i'),
    ] {
        for k in 0..n {
            reps.push(RawRepetition {
                id: format!("{tag}{k:03}"),
                subject: format!("s{:02}", k % 10 + 1),
                movement: cfg.movement.clone(),
                class,
                samples: repetition(cfg, class, rng)?,
            });
        }
    }
    Ok(reps)
}

/// Writes one CSV per repetition plus `manifest.csv` into `dir` and returns
/// the manifest path.
pub fn write_repetitions(dir: &Path, reps: &[RawRepetition]) -> Result<PathBuf> {
    let data_dir = dir.join("raw");
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut entries = Vec::with_capacity(reps.len());
    for r in reps {
        let file = format!("raw/{}.csv", r.id);
        write_sequence_csv(&dir.join(&file), &r.samples)?;
        entries.push(ManifestEntry {
            file_path: file,
            subject: r.subject.clone(),
            movement: r.movement.clone(),
            correctness: r.class.to_string(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
