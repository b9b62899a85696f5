//! Movement repetitions from raw joint-angle files to labeled, split
//! training data.
//!
//! The stages run in a fixed order: load, resample to a common length,
//! select the highest-variance dimensions, scale and center, pad the
//! endpoints, label, split. [`build_sequence_set`] covers everything up to
//! labeling and [`label_and_split`] the rest.

mod dataset;
mod io;
mod preprocess;
mod sequence;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use dataset::{ensure_writable_dir, DatasetMeta, Item, LabeledDataset, Split};
pub use io::{
    load_repetitions, read_sequence_csv, write_manifest, write_sequence_csv, ManifestEntry,
};
pub use preprocess::{
    assign_soft_labels, median_length, pad_endpoints, resample_to_common_length,
    rms_deviation_correct, rms_deviation_incorrect, rms_distance, scale_and_center,
    select_top_variance_dims, split_indices, Scaled,
};
pub use sequence::{stack, unstack, Sequence};

/// Column count of a raw UI-PRMD joint-angle file.
pub const RAW_COLUMNS: usize = 117;
/// Capture rate of the raw recordings, samples per second.
pub const CAPTURE_RATE_HZ: f64 = 100.0;
/// Rows replicated at each end of every sequence.
pub const DEFAULT_PAD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Correct,
    Incorrect,
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Correct => "correct",
            Class::Incorrect => "incorrect",
        })
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "correct" => Ok(Class::Correct),
            "incorrect" => Ok(Class::Incorrect),
            other => Err(Error::invalid(format!(
                "correctness must be correct or incorrect, got {other:?}"
            ))),
        }
    }
}

/// One recorded repetition as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRepetition {
    pub id: String,
    pub subject: String,
    pub movement: String,
    pub class: Class,
    pub samples: Sequence,
}

/// Knobs for the preprocessing stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Common length before padding; the median raw length when unset.
    pub target_len: Option<usize>,
    pub dims: usize,
    pub pad: usize,
    pub tau: f64,
    pub train_correct: usize,
    pub train_incorrect: usize,
}

/// Correct and incorrect repetitions after scaling, centering and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    pub correct: Vec<Sequence>,
    pub incorrect: Vec<Sequence>,
    pub correct_ids: Vec<String>,
    pub incorrect_ids: Vec<String>,
    pub subjects: Vec<String>,
    /// Length after padding.
    pub seq_len: usize,
    pub dims: usize,
    pub scale: f64,
    pub selected_dims: Vec<usize>,
    pub pad: usize,
}

/// Runs every stage before labeling.
pub fn build_sequence_set(reps: &[RawRepetition], cfg: &PipelineConfig) -> Result<SequenceSet> {
    let (mut correct, mut incorrect): (Vec<&RawRepetition>, Vec<&RawRepetition>) =
        reps.iter().partition(|r| r.class == Class::Correct);
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "need both classes, got {} correct and {} incorrect",
            correct.len(),
            incorrect.len()
        )));
    }
    if correct.len() != incorrect.len() {
        let n = correct.len().min(incorrect.len());
        log::warn!(
            "balancing classes: keeping the first {n} of {} correct and {} incorrect repetitions",
            correct.len(),
            incorrect.len()
        );
        correct.truncate(n);
        incorrect.truncate(n);
    }
    let raw: Vec<Sequence> = correct
        .iter()
        .chain(&incorrect)
        .map(|r| r.samples.clone())
        .collect();
    let target = match cfg.target_len {
        Some(t) => t,
        None => median_length(&raw).expect("non-empty"),
    };
    let resampled = resample_to_common_length(&raw, target)?;
    let (rc, ri) = resampled.split_at(correct.len());
    let selected_dims = select_top_variance_dims(rc, cfg.dims)?;
    let project = |s: &[Sequence]| {
        s.iter()
            .map(|q| q.select_columns(&selected_dims))
            .collect::<Result<Vec<_>>>()
    };
    let scaled = scale_and_center(&project(rc)?, &project(ri)?)?;
    let pad = |s: Vec<Sequence>| {
        s.iter()
            .map(|q| pad_endpoints(q, cfg.pad))
            .collect::<Vec<_>>()
    };
    Ok(SequenceSet {
        correct: pad(scaled.correct),
        incorrect: pad(scaled.incorrect),
        correct_ids: correct.iter().map(|r| r.id.clone()).collect(),
        incorrect_ids: incorrect.iter().map(|r| r.id.clone()).collect(),
        subjects: correct
            .iter()
            .chain(&incorrect)
            .map(|r| r.subject.clone())
            .collect(),
        seq_len: target + 2 * cfg.pad,
        dims: cfg.dims,
        scale: scaled.scale,
        selected_dims,
        pad: cfg.pad,
    })
}

/// Soft labels from RMS deviations, then a seeded per-class split.
///
/// Deviations are computed on the preprocessed sequences and multiplied by
/// the scaling constant, so `tau` is expressed in the units of the raw
/// recordings.
pub fn label_and_split(
    set: &SequenceSet,
    cfg: &PipelineConfig,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    let xi: Vec<f64> = rms_deviation_correct(&set.correct)?
        .iter()
        .map(|v| v * set.scale)
        .collect();
    let zeta: Vec<f64> = rms_deviation_incorrect(&set.incorrect, &set.correct)?
        .iter()
        .map(|v| v * set.scale)
        .collect();
    let (lc, li) = assign_soft_labels(&xi, &zeta, cfg.tau)?;
    let (tc, _) = split_indices(set.correct.len(), cfg.train_correct, rng)?;
    let (ti, _) = split_indices(set.incorrect.len(), cfg.train_incorrect, rng)?;

    let mut items = Vec::with_capacity(set.correct.len() + set.incorrect.len());
    let groups = [
        (
            Class::Correct,
            &set.correct,
            &set.correct_ids,
            &lc,
            &xi,
            &tc,
            0,
        ),
        (
            Class::Incorrect,
            &set.incorrect,
            &set.incorrect_ids,
            &li,
            &zeta,
            &ti,
            set.correct.len(),
        ),
    ];
    for (class, seqs, ids, labels, devs, train, offset) in groups {
        for i in 0..seqs.len() {
            items.push(Item {
                id: ids[i].clone(),
                subject: set.subjects[offset + i].clone(),
                class,
                label: labels[i],
                deviation: devs[i],
                split: if train.contains(&i) {
                    Split::Train
                } else {
                    Split::Validation
                },
                seq: seqs[i].clone(),
            });
        }
    }
    Ok(LabeledDataset {
        meta: DatasetMeta {
            seq_len: set.seq_len,
            dims: set.dims,
            selected_dims: set.selected_dims.clone(),
            scale: set.scale,
            pad: set.pad,
            tau: cfg.tau,
            baseline: xi.iter().sum::<f64>() / xi.len() as f64,
        },
        items,
    })
}

/// The whole pipeline on already loaded repetitions.
pub fn prepare(
    reps: &[RawRepetition],
    cfg: &PipelineConfig,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    let set = build_sequence_set(reps, cfg)?;
    label_and_split(&set, cfg, rng)
}
