//! VNET checkpoints: `b"VNET1"`, a little-endian `u32` header length, a
//! JSON header (architecture, L2 coefficients, history summary, seed), then
//! each parameterized layer's weights followed by its biases as raw
//! little-endian `f32`, in layer order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, Params};
use super::train::TrainHistory;
use super::LayerSpec;
use crate::error::{Error, Result};
use crate::volume::Dims;

const MAGIC: &[u8; 5] = b"VNET1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub best_val_balanced_accuracy: Option<f64>,
}

impl From<&TrainHistory> for HistorySummary {
    fn from(h: &TrainHistory) -> Self {
        HistorySummary {
            epochs: h.epochs.len(),
            best_epoch: h.best_epoch,
            best_val_loss: h.best().map(|r| r.val_loss),
            best_val_balanced_accuracy: h.best().and_then(|r| r.val_balanced_accuracy),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Vec<LayerSpec>,
    input_dims: Dims,
    l2: Vec<f64>,
    history: HistorySummary,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub history: HistorySummary,
    pub seed: u64,
}

pub fn model_bytes(net: &Network, history: &HistorySummary, seed: u64) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        architecture: net.layers().to_vec(),
        input_dims: net.input_dims(),
        l2: net.l2().to_vec(),
        history: history.clone(),
        seed,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in net.params() {
        for v in p.weights.iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(net: &Network, history: &HistorySummary, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_bytes(net, history, seed)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(Error::format(path, "not a VNET file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    if body.len() < header_len {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let net = Network::zeroed(header.input_dims, header.architecture, header.l2)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let blob = &body[header_len..];
    let expected = net.count_params() * 4;
    if blob.len() != expected {
        return Err(Error::format(
            path,
            format!("architecture needs {expected} parameter bytes, found {}", blob.len()),
        ));
    }
    let mut floats = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let params = net
        .layers()
        .iter()
        .map(|l| Params {
            weights: floats.by_ref().take(l.weight_len()).collect(),
            bias: floats.by_ref().take(l.bias_len()).collect(),
        })
        .collect();
    Ok(Checkpoint {
        network: net.with_params(params)?,
        history: header.history,
        seed: header.seed,
    })
}
