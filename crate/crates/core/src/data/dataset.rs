use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_sequence_csv, write_sequence_csv};
use super::{stack, Class, Sequence};
use crate::engine::Tensor;
use crate::error::{Error, Result};

const METADATA_FILE: &str = "metadata.json";
const SEQUENCE_DIR: &str = "sequences";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Timesteps per sequence, padding included.
    pub seq_len: usize,
    pub dims: usize,
    pub selected_dims: Vec<usize>,
    /// Divisor that mapped raw values into the network range.
    pub scale: f64,
    pub pad: usize,
    pub tau: f64,
    /// Mean correct-set deviation the labels are measured from.
    pub baseline: f64,
}

/// A preprocessed repetition with its soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub subject: String,
    pub class: Class,
    pub label: f64,
    /// RMS deviation from the correct set, in raw units.
    pub deviation: f64,
    pub split: Split,
    pub seq: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub meta: DatasetMeta,
    pub items: Vec<Item>,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    subject: String,
    class: Class,
    label: f64,
    deviation: f64,
    split: Split,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    #[serde(flatten)]
    meta: DatasetMeta,
    items: Vec<ItemRecord>,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Item> {
        self.split(Split::Train)
    }

    pub fn validation(&self) -> Vec<&Item> {
        self.split(Split::Validation)
    }

    pub fn count(&self, split: Split, class: Class) -> usize {
        self.items
            .iter()
            .filter(|i| i.split == split && i.class == class)
            .count()
    }

    /// `[n, seq_len, dims]` batch of the given items.
    pub fn batch(items: &[&Item]) -> Result<Tensor> {
        let seqs: Vec<&Sequence> = items.iter().map(|i| &i.seq).collect();
        stack(&seqs)
    }

    pub fn labels(items: &[&Item]) -> Vec<f64> {
        items.iter().map(|i| i.label).collect()
    }

    /// Writes `metadata.json` and one CSV per sequence. Refuses to touch a
    /// non-empty directory unless `force` is set.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        ensure_writable_dir(dir, force)?;
        let seq_dir = dir.join(SEQUENCE_DIR);
        fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
        let mut records = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let file = format!("{SEQUENCE_DIR}/{}.csv", item.id);
            write_sequence_csv(&dir.join(&file), &item.seq)?;
            records.push(ItemRecord {
                id: item.id.clone(),
                subject: item.subject.clone(),
                class: item.class,
                label: item.label,
                deviation: item.deviation,
                split: item.split,
                file,
            });
        }
        let meta = Metadata {
            meta: self.meta.clone(),
            items: records,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join(METADATA_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Metadata = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut items = Vec::with_capacity(meta.items.len());
        for r in meta.items {
            let seq = read_sequence_csv(&dir.join(&r.file), Some(meta.meta.dims))?;
            if seq.len() != meta.meta.seq_len {
                return Err(Error::Format(format!(
                    "{}: {} rows, metadata says {}",
                    r.file,
                    seq.len(),
                    meta.meta.seq_len
                )));
            }
            items.push(Item {
                id: r.id,
                subject: r.subject,
                class: r.class,
                label: r.label,
                deviation: r.deviation,
                split: r.split,
                seq,
            });
        }
        Ok(LabeledDataset {
            meta: meta.meta,
            items,
        })
    }
}

/// Creates `dir` or checks that it is empty, unless `force`.
pub fn ensure_writable_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::invalid(format!(
                "{} already exists and is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
