//! Checkpoint binary format.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4   magic "GNL1"
//! bytes 4..8   u32 LE header length
//! header       TOML text: [model] config and [meta] training provenance
//! parameters   for every tensor, in visitor order
//!              (teacher stem, teacher blocks 1-3, bottleneck down1a/down1b/
//!              down2/fuse, decoder blocks 3/2/1; within each unit:
//!              conv weight, conv bias, affine gamma, affine beta):
//!              u32 LE element count, then count little-endian f32 values
//! ```
//!
//! The format is bitwise lossless for `f32` bundles: save -> load -> save
//! produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::model::{zero_params, ModelBundle, ModelConfig, ParamTensors, TrainingMeta};

pub const MAGIC: &[u8; 4] = b"GNL1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainingMeta,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| GnlError::Format(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes all parameter tensors of `p` as count-prefixed f32 blobs.
pub fn param_bytes(p: &impl ParamTensors<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for s in p.slices() {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_params_into(r: &mut impl Read, p: &mut impl ParamTensors<f32>, what: &str) -> Result<()> {
    for s in p.slices_mut() {
        let n = read_u32(r, what)? as usize;
        if n != s.len() {
            return Err(GnlError::Format(format!(
                "{what}: tensor has {n} elements in file, model expects {}",
                s.len()
            )));
        }
        let mut bytes = vec![0u8; 4 * n];
        read_exact(r, &mut bytes, what)?;
        for (i, v) in s.iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        }
    }
    Ok(())
}

pub fn save_checkpoint(bundle: &ModelBundle<f32>, path: impl AsRef<Path>) -> Result<()> {
    let header = Header { model: bundle.config.clone(), meta: bundle.meta.clone() };
    let header_text = toml::to_string(&header)
        .map_err(|e| GnlError::Format(format!("cannot serialize checkpoint header: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_text.len() as u32).to_le_bytes())?;
    w.write_all(header_text.as_bytes())?;
    w.write_all(&param_bytes(&bundle.teacher))?;
    w.write_all(&param_bytes(&bundle.bottleneck))?;
    w.write_all(&param_bytes(&bundle.decoder))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(GnlError::Format(format!("bad magic bytes {magic:?}, expected {MAGIC:?}")));
    }
    let header_len = read_u32(&mut r, "header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|_| GnlError::Format("checkpoint header is not valid UTF-8".into()))?;
    let header: Header = toml::from_str(&header_text)
        .map_err(|e| GnlError::Format(format!("cannot parse checkpoint header: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| GnlError::Format(format!("checkpoint config mismatch: {e}")))?;

    let (mut teacher, mut bottleneck, mut decoder) = zero_params::<f32>(&header.model);
    read_params_into(&mut r, &mut teacher, "teacher parameters")?;
    read_params_into(&mut r, &mut bottleneck, "bottleneck parameters")?;
    read_params_into(&mut r, &mut decoder, "decoder parameters")?;

    let bundle = ModelBundle { config: header.model, teacher, bottleneck, decoder, meta: header.meta };
    if !bundle.teacher.all_finite() || !bundle.bottleneck.all_finite() || !bundle.decoder.all_finite() {
        return Err(GnlError::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok(bundle)
}

/// Replaces the bundle's frozen teacher with the teacher section of the
/// checkpoint at `path`. The architectures must match exactly.
pub fn load_teacher_weights(mut bundle: ModelBundle<f32>, path: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    let other = load_checkpoint(path)?;
    if other.config.in_channels != bundle.config.in_channels
        || other.config.block_channels != bundle.config.block_channels
    {
        return Err(GnlError::Format(format!(
            "teacher weights were built for channels {:?} (in={}), bundle expects {:?} (in={})",
            other.config.block_channels,
            other.config.in_channels,
            bundle.config.block_channels,
            bundle.config.in_channels
        )));
    }
    bundle.teacher = other.teacher;
    Ok(bundle)
}
