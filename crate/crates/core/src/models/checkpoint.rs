//! Checkpoint layout: one line of JSON header, a newline, then every
//! parameter as little-endian `f64`, generator first, each network in
//! declaration order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::Rng;

const MAGIC: &str = "rehabgan-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkHeader {
    pub layers: Vec<String>,
    pub params: Vec<ParamHeader>,
}

/// Preprocessing constants needed to map generated sequences back to raw
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub scale: f64,
    pub pad: usize,
    pub selected_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub epoch: usize,
    pub generator: Option<NetworkHeader>,
    pub discriminator: NetworkHeader,
    pub data: Option<DataInfo>,
}

fn describe(net: &Network) -> NetworkHeader {
    NetworkHeader {
        layers: net.specs().map(|s| s.label()).collect(),
        params: net
            .params()
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    epoch: usize,
    data: Option<DataInfo>,
) -> Result<()> {
    let header = CheckpointHeader {
        format: MAGIC.into(),
        version: VERSION,
        spec: model.spec.clone(),
        epoch,
        generator: model.generator.as_ref().map(describe),
        discriminator: describe(&model.discriminator),
        data,
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    let nets = model
        .generator
        .iter()
        .chain(std::iter::once(&model.discriminator));
    for net in nets {
        for v in net.params().flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_layout(expected: &NetworkHeader, found: &NetworkHeader, which: &str) -> Result<()> {
    if expected.params != found.params {
        return Err(Error::Format(format!(
            "{which} parameters in the checkpoint do not match its own spec"
        )));
    }
    Ok(())
}

fn take_params(net: &mut Network, blob: &[f64], offset: &mut usize) -> Result<()> {
    let n: usize = net.params().iter().map(|p| p.tensor.numel()).sum();
    let end = *offset + n;
    if end > blob.len() {
        return Err(Error::Format(
            "checkpoint parameter blob is truncated".into(),
        ));
    }
    net.params_mut().load_flat(&blob[*offset..end])?;
    *offset = end;
    Ok(())
}

/// Rebuilds the model from the header's spec and loads the stored values.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing checkpoint header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.format != MAGIC || header.version != VERSION {
        return Err(Error::Format(format!(
            "{}: not a version {VERSION} checkpoint",
            path.display()
        )));
    }
    let body = &bytes[newline + 1..];
    if body.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{}: parameter blob is not a whole number of f64",
            path.display()
        )));
    }
    let blob: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    // Initial values are overwritten, so any seed will do.
    let mut model = Model::build(&header.spec, &mut Rng::seed_from_u64(0))?;
    match (&model.generator, &header.generator) {
        (Some(g), Some(h)) => check_layout(&describe(g), h, "generator")?,
        (None, None) => {}
        _ => {
            return Err(Error::Format(
                "generator presence disagrees with the spec".into(),
            ))
        }
    }
    check_layout(
        &describe(&model.discriminator),
        &header.discriminator,
        "discriminator",
    )?;
    let mut offset = 0;
    if let Some(g) = model.generator.as_mut() {
        take_params(g, &blob, &mut offset)?;
    }
    take_params(&mut model.discriminator, &blob, &mut offset)?;
    if offset != blob.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing values after the parameters",
            path.display(),
            blob.len() - offset
        )));
    }
    Ok((model, header))
}
