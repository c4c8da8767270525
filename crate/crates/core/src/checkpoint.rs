//! Binary model checkpoints.
//!
//! Layout: `LEGO1`, a little-endian u32 header length, a JSON header, then
//! every tensor as little-endian f32 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Architecture, InputShape, LossMode, ModelConfig};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"LEGO1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub final_train_loss: Option<f64>,
    pub final_test_f1: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    input: InputShape,
    class_names: Vec<String>,
    normalization: Option<ChannelStats>,
    training: TrainingRecord,
    tensors: Vec<TensorEntry>,
    mask_sha256: String,
    payload_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub normalization: Option<ChannelStats>,
    pub training: TrainingRecord,
    pub network: Network<f32>,
}

/// SHA-256 over the binary masks of every Lego layer, in block order.
pub fn mask_digest(net: &Network<f32>) -> String {
    let mut h = Sha256::new();
    for block in &net.blocks {
        if let Some(l) = block.lego() {
            h.update(block.name.as_bytes());
            let bits: Vec<u8> = l.mask().data().iter().map(|&v| u8::from(v != 0.0)).collect();
            h.update(&bits);
        }
    }
    hex::encode(h.finalize())
}

/// Every tensor that a checkpoint stores: parameters, then batch-norm running statistics.
fn named_tensors(net: &Network<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for block in &net.blocks {
        for (name, p) in block.named_params() {
            out.push((name, &p.value));
        }
        if let Some(bn) = &block.bn {
            out.push((format!("{}.bn.running_mean", block.name), &bn.running_mean));
            out.push((format!("{}.bn.running_var", block.name), &bn.running_var));
        }
    }
    out
}

/// Copies `entry`'s values out of `payload` into `slot` after checking name and shape.
fn fill(slot: &mut Tensor<f32>, name: &str, entry: &TensorEntry, payload: &[u8]) -> Result<()> {
    if name != entry.name || slot.shape() != entry.shape.as_slice() {
        return Err(err(format!(
            "tensor {} {:?} does not match {} {:?}",
            entry.name,
            entry.shape,
            name,
            slot.shape()
        )));
    }
    let start = entry.offset * 4;
    let raw = payload
        .get(start..start + entry.len() * 4)
        .ok_or_else(|| err(format!("tensor {} lies outside the payload", entry.name)))?;
    for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
        *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn architecture(&self) -> &Architecture {
        &self.network.arch
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in named_tensors(&self.network) {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            input: self.network.input(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
            training: self.training.clone(),
            tensors,
            mask_sha256: mask_digest(&self.network),
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < hlen {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("bad header: {e}")))?;
        if header.version != VERSION {
            return Err(err(format!("unsupported version {}", header.version)));
        }
        let payload = &body[hlen..];
        let expected: usize = header.tensors.iter().map(TensorEntry::len).sum::<usize>() * 4;
        if payload.len() != expected {
            return Err(err(format!(
                "payload is {} bytes, header describes {expected}; the file is truncated or corrupt",
                payload.len()
            )));
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(err("payload checksum mismatch"));
        }

        let classes = header.class_names.len();
        let arch = Architecture::resolve(&header.config.layers, header.input, classes)?;
        let mut network = Network::<f32>::new(arch, header.config.seed, header.config.lego_path.into())?;
        let needed = named_tensors(&network).len();
        if needed != header.tensors.len() {
            return Err(err(format!(
                "checkpoint holds {} tensors, the architecture needs {needed}",
                header.tensors.len()
            )));
        }
        let mut entries = header.tensors.iter();
        for block in &mut network.blocks {
            let names: Vec<String> = block.named_params().into_iter().map(|(n, _)| n).collect();
            for (name, p) in names.iter().zip(block.params_mut()) {
                fill(&mut p.value, name, entries.next().expect("counted"), payload)?;
            }
            if let Some(bn) = &mut block.bn {
                let mean = format!("{}.bn.running_mean", block.name);
                fill(&mut bn.running_mean, &mean, entries.next().expect("counted"), payload)?;
                let var = format!("{}.bn.running_var", block.name);
                fill(&mut bn.running_var, &var, entries.next().expect("counted"), payload)?;
            }
        }
        network.rebinarize();
        if mask_digest(&network) != header.mask_sha256 {
            return Err(err("mask digest mismatch after rebinarizing the proxies"));
        }
        Ok(Checkpoint {
            config: header.config,
            class_names: header.class_names,
            normalization: header.normalization,
            training: header.training,
            network,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
