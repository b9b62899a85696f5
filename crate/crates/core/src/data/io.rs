use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Class, RawRepetition, Sequence};
use crate::error::{Error, Result};

/// One manifest row. Relative paths resolve against the manifest's folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file_path: String,
    pub subject: String,
    pub movement: String,
    pub correctness: String,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Reads every repetition listed in the manifest. With `expected_columns`
/// each file must have exactly that many columns.
pub fn load_repetitions(
    manifest: &Path,
    expected_columns: Option<usize>,
) -> Result<Vec<RawRepetition>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        log::warn!("manifest {} lists no repetitions", manifest.display());
        return Ok(Vec::new());
    }
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded: Vec<Result<RawRepetition>> = entries
        .par_iter()
        .map(|e| {
            let class: Class = e.correctness.parse()?;
            let path = resolve(&base, &e.file_path);
            let samples = read_sequence_csv(&path, expected_columns)?;
            if samples.len() < 2 {
                return Err(Error::InsufficientSamples(format!(
                    "{}: fewer than 2 rows",
                    path.display()
                )));
            }
            let stem = path
                .file_stem()
                .map_or_else(|| e.file_path.clone(), |s| s.to_string_lossy().into_owned());
            Ok(RawRepetition {
                id: stem,
                subject: e.subject.clone(),
                movement: e.movement.clone(),
                class,
                samples,
            })
        })
        .collect();
    let mut reps = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    for r in &mut reps {
        let n = seen.entry(r.id.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.id = format!("{}-{}", r.id, n);
        }
    }
    Ok(reps)
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses one comma-separated numeric file. A first row that does not parse
/// as numbers is taken as a header.
pub fn read_sequence_csv(path: &Path, expected_columns: Option<usize>) -> Result<Sequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = expected_columns;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if k == 0 => continue,
            Err(_) => {
                let (col, cell) = rec
                    .iter()
                    .enumerate()
                    .find(|(_, c)| c.parse::<f64>().is_err())
                    .expect("a cell failed");
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column {}: {cell:?} is not a number", col + 1),
                });
            }
        };
        if let Some(col) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {}: non-finite value", col + 1),
            });
        }
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected {
            return Err(Error::ColumnCount {
                path: path.to_path_buf(),
                line,
                expected,
                found: row.len(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Sequence::from_rows(&rows)
}

/// Writes rows as comma-separated values with round-trip precision.
pub fn write_sequence_csv(path: &Path, seq: &Sequence) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in seq.rows() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if entries.is_empty() {
        w.write_record(["file_path", "subject", "movement", "correctness"])
            .map_err(|e| csv_error(path, e))?;
    }
    for e in entries {
        w.serialize(e).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
