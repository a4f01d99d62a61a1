//! Model checkpoint format.
//!
//! Layout: magic bytes `AANM`, format version as little-endian u32, a
//! length-prefixed (u32, little-endian) UTF-8 JSON header naming the model
//! configuration and the ordered tensor list, then each tensor's elements
//! as little-endian 64-bit reals in header order. Round-trips are bit
//! exact. The parser never trusts the header: lengths, shapes, and payload
//! sizes are validated against the embedded configuration before any tensor
//! is materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AANM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

/// Serialize parameters and configuration to checkpoint bytes.
pub fn write_checkpoint_bytes(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    let named = params.named_tensors();
    let header = Header {
        config: config.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let payload_len: usize = named.iter().map(|(_, t)| t.data().len() * 8).sum();
    let mut out = Vec::with_capacity(12 + header_json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header_len = u32::try_from(header_json.len())
        .map_err(|_| Error::Format("header too large".to_string()))?;
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in &named {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Expected tensor names and shapes for a configuration, in payload order.
fn expected_layout(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut dims = vec![config.input_dim];
    dims.extend_from_slice(&config.hidden_widths);
    dims.push(config.num_classes);
    let k = config.feature_width();
    let mut out = Vec::new();
    let mut push_layer = |group: &str, idx: usize, rows: usize, cols: usize| {
        out.push((format!("{group}.{idx}.weight"), rows, cols));
        out.push((format!("{group}.{idx}.bias"), 1, cols));
    };
    for i in 0..dims.len() - 1 {
        if i < config.split_index {
            push_layer("encoder", i, dims[i], dims[i + 1]);
        } else {
            push_layer("residual", i - config.split_index, dims[i], dims[i + 1]);
        }
    }
    push_layer("discriminator", 0, k, config.disc_hidden);
    push_layer("discriminator", 1, config.disc_hidden, 1);
    out
}

/// Parse checkpoint bytes back into parameters and configuration.
pub fn parse_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Format(format!(
                "checkpoint truncated: need {n} bytes, have {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, not a checkpoint file",
            &bytes[..4]
        )));
    }
    need(8)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    need(12)?;
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    need(12 + header_len)?;
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    header.config.validate()?;

    let layout = expected_layout(&header.config);
    if header.tensors.len() != layout.len() {
        return Err(Error::Format(format!(
            "header lists {} tensors, configuration implies {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    for (meta, (name, rows, cols)) in header.tensors.iter().zip(&layout) {
        if &meta.name != name || meta.rows != *rows || meta.cols != *cols {
            return Err(Error::Format(format!(
                "tensor '{}' ({}x{}) does not match expected '{}' ({}x{})",
                meta.name, meta.rows, meta.cols, name, rows, cols
            )));
        }
    }

    let elements: usize = layout.iter().map(|(_, r, c)| r * c).sum();
    let payload = &bytes[12 + header_len..];
    if payload.len() != elements * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            elements * 8
        )));
    }

    let mut offset = 0;
    let mut read_tensor = |rows: usize, cols: usize| -> Result<Tensor> {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = (offset + i) * 8;
            let raw: [u8; 8] = payload[start..start + 8].try_into().expect("8 bytes");
            data.push(f64::from_le_bytes(raw));
        }
        offset += n;
        Tensor::from_vec(rows, cols, data)
            .map_err(|_| Error::Format("checkpoint contains non-finite values".to_string()))
    };

    let config = header.config;
    let mut encoder = Vec::new();
    let mut residual = Vec::new();
    let mut discriminator = Vec::new();
    for chunk in layout.chunks(2) {
        let (name, w_rows, w_cols) = &chunk[0];
        let (_, _, b_cols) = &chunk[1];
        let layer = Layer {
            weight: read_tensor(*w_rows, *w_cols)?,
            bias: read_tensor(1, *b_cols)?,
        };
        if name.starts_with("encoder") {
            encoder.push(layer);
        } else if name.starts_with("residual") {
            residual.push(layer);
        } else {
            discriminator.push(layer);
        }
    }
    Ok((
        ModelParams {
            encoder,
            residual,
            discriminator,
        },
        config,
    ))
}

/// Write a checkpoint file.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = write_checkpoint_bytes(params, config)?;
    std::fs::write(path.as_ref(), bytes)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    parse_checkpoint_bytes(&bytes)
}
