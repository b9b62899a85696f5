use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// One repetition as a `len × dims` row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    len: usize,
    dims: usize,
    data: Vec<f64>,
}

impl Sequence {
    pub fn new(len: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 || dims == 0 || data.len() != len * dims {
            return Err(Error::invalid(format!(
                "sequence of {len} x {dims} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Sequence { len, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), dims, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, m: usize, d: usize) -> f64 {
        self.data[m * self.dims + d]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.dims..(m + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dims)
    }

    /// Keeps the listed columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Sequence> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.dims) {
            return Err(Error::invalid(format!(
                "column {c} out of range for {} dims",
                self.dims
            )));
        }
        let data = self
            .rows()
            .flat_map(|r| cols.iter().map(move |&c| r[c]))
            .collect();
        Sequence::new(self.len, cols.len(), data)
    }

    /// Drops `pad` rows from each end.
    pub fn trim(&self, pad: usize) -> Result<Sequence> {
        if 2 * pad >= self.len {
            return Err(Error::invalid(format!(
                "cannot trim {pad} rows from each end of {}",
                self.len
            )));
        }
        let data = self.data[pad * self.dims..(self.len - pad) * self.dims].to_vec();
        Sequence::new(self.len - 2 * pad, self.dims, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sequence {
        Sequence {
            len: self.len,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Stacks equally shaped sequences into a `[n, len, dims]` tensor.
pub fn stack(seqs: &[&Sequence]) -> Result<Tensor> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::invalid("cannot stack zero sequences"))?;
    let (len, dims) = (first.len, first.dims);
    let mut data = Vec::with_capacity(seqs.len() * len * dims);
    for s in seqs {
        if s.len != len || s.dims != dims {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: vec![len, dims],
                right: vec![s.len, s.dims],
            });
        }
        data.extend_from_slice(&s.data);
    }
    Tensor::new(vec![seqs.len(), len, dims], data)
}

/// Splits a `[n, len, dims]` tensor into sequences.
pub fn unstack(t: &Tensor) -> Result<Vec<Sequence>> {
    let &[n, len, dims] = t.shape() else {
        return Err(Error::invalid(format!(
            "expected a [n, len, dims] batch, got {:?}",
            t.shape()
        )));
    };
    (0..n)
        .map(|i| {
            Sequence::new(
                len,
                dims,
                t.data()[i * len * dims..(i + 1) * len * dims].to_vec(),
            )
        })
        .collect()
}
