//! Model checkpoints: one line of JSON header, a newline, then the flat
//! parameter vector as a `params x 1 x 1` QPT1 blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bypass::ToyAe;
use crate::error::{Error, Result};
use crate::image::{decode_qpt, encode_qpt, write_atomic, Image};
use crate::scalar::Scalar;
use crate::toymodel::ConvNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"toy-convnet"` or `"toy-ae"`.
    pub kind: String,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub param_count: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const KIND_CONVNET: &str = "toy-convnet";
pub const KIND_AE: &str = "toy-ae";

pub fn encode_checkpoint<T: Scalar>(header: &CheckpointHeader, params: &[T]) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(header).map_err(|e| Error::invalid(e.to_string()))?;
    bytes.push(b'\n');
    let blob = Image::new(params.len(), 1, 1, params.to_vec())?;
    bytes.extend(encode_qpt(&blob));
    Ok(bytes)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, header: &CheckpointHeader, params: &[T]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(header, params)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<T>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "checkpoint header is not newline-terminated"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let blob: Image<T> = decode_qpt(&bytes[nl + 1..], path)?;
    if blob.data().len() != header.param_count {
        return Err(Error::format(
            path,
            format!(
                "header declares {} parameters, blob holds {}",
                header.param_count,
                blob.data().len()
            ),
        ));
    }
    Ok((header, blob.into_data()))
}

fn expect_kind(path: &Path, header: &CheckpointHeader, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} checkpoint, found {}", header.kind),
        ));
    }
    Ok(())
}

pub fn save_convnet<T: Scalar>(
    path: impl AsRef<Path>,
    net: &ConvNet<T>,
    seed: u64,
    config: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: KIND_CONVNET.into(),
        widths: net.widths().to_vec(),
        seed,
        param_count: net.param_count(),
        config,
    };
    save_checkpoint(path, &header, net.params())
}

pub fn load_convnet<T: Scalar>(path: impl AsRef<Path>) -> Result<(ConvNet<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let (header, params) = load_checkpoint(path)?;
    expect_kind(path, &header, KIND_CONVNET)?;
    let mut net = ConvNet::new(&header.widths, header.seed).map_err(|e| Error::format(path, e.to_string()))?;
    net.set_params(params).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((net, header))
}

pub fn save_ae<T: Scalar>(path: impl AsRef<Path>, ae: &ToyAe<T>, seed: u64, config: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        kind: KIND_AE.into(),
        widths: ae.widths().to_vec(),
        seed,
        param_count: ae.param_count(),
        config,
    };
    save_checkpoint(path, &header, ae.params())
}

pub fn load_ae<T: Scalar>(path: impl AsRef<Path>) -> Result<(ToyAe<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let (header, params) = load_checkpoint(path)?;
    expect_kind(path, &header, KIND_AE)?;
    let widths: [usize; 3] = header
        .widths
        .as_slice()
        .try_into()
        .map_err(|_| Error::format(path, "autoencoder checkpoint needs three widths"))?;
    let mut ae = ToyAe::new(widths, header.seed).map_err(|e| Error::format(path, e.to_string()))?;
    ae.set_params(params).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((ae, header))
}
