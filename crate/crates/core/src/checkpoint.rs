//! Network checkpoints.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "xdepict-checkpoint",
//!   "version": 1,
//!   "spec": { input_channels, backbone: [LayerSpec], pool: RoiPoolConfig, head: [LayerSpec] },
//!   "seed": u64,
//!   "rng": <ChaCha8 state used by dropout>,
//!   "layers": [ { "name", "weight_len", "bias_len", "weight", "bias" } ]
//! }
//! ```
//!
//! `layers` follows backbone order, then head, then `cls_score`, then
//! `bbox_pred`; parameter-free layers have both lengths 0. `weight` and
//! `bias` are standard base64 of little-endian IEEE-754 `f32` values.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Params;
use crate::network::{Network, NetworkSpec};
use crate::tensor::Real;

pub const FORMAT: &str = "xdepict-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    spec: NetworkSpec,
    seed: u64,
    rng: ChaCha8Rng,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    weight_len: usize,
    bias_len: usize,
    weight: String,
    bias: String,
}

fn encode(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        v.write_le(&mut bytes);
    }
    STANDARD.encode(bytes)
}

fn decode(text: &str, len: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Data(format!("checkpoint {what}: bad base64: {e}")))?;
    if bytes.len() != len * 4 {
        return Err(Error::Data(format!(
            "checkpoint {what}: {} bytes for {len} floats",
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(f32::read_le).collect())
}

pub fn to_json(net: &Network<f32>) -> Result<String> {
    let layers = net
        .layers()
        .map(|l| match l.params() {
            Some(p) => LayerRecord {
                name: l.name().to_string(),
                weight_len: p.weight.len(),
                bias_len: p.bias.len(),
                weight: encode(&p.weight),
                bias: encode(&p.bias),
            },
            None => LayerRecord {
                name: l.name().to_string(),
                weight_len: 0,
                bias_len: 0,
                weight: String::new(),
                bias: String::new(),
            },
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        spec: net.spec().clone(),
        seed: net.seed(),
        rng: net.rng().clone(),
        layers,
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Data(format!("checkpoint encode: {e}")))
}

pub fn from_json(text: &str) -> Result<Network<f32>> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint parse: {e}")))?;
    if file.format != FORMAT {
        return Err(Error::Data(format!("not a checkpoint (format {:?})", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let params = file
        .layers
        .iter()
        .map(|rec| {
            if rec.weight_len == 0 && rec.bias_len == 0 {
                Ok(None)
            } else {
                Ok(Some(Params {
                    weight: decode(&rec.weight, rec.weight_len, &rec.name)?,
                    bias: decode(&rec.bias, rec.bias_len, &rec.name)?,
                }))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_parts(file.spec, file.seed, file.rng, params)
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, to_json(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
