//! Closed-form size estimation and byte-accurate measurement of serialized
//! checkpoints.
//!
//! The estimate counts three contributions, each as a fraction of the dense
//! float32 footprint (params x 32 bits): weight payload at `bits/32` scaled
//! by sparsity density `n/m`, a 1-bit-per-weight mask (`1/32`) when a
//! sparsity pattern is present, and one float32 scale per sub-channel
//! (`sub_channels/I`) when a channel is split. Per-channel scales
//! (sub_channels = 1) are deliberately excluded from the estimate; the
//! measured report counts them, which is the usual source of the small
//! estimate-vs-actual delta.

use crate::checkpoint::{entry_serialized_len, Checkpoint, Dtype};
use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::sparse::SparsityPattern;
use serde::Serialize;

/// Estimated compressed size as a fraction of the float32 size.
///
/// `scheme` None means weights stay float32. `channel_len` is the length I
/// of a quantization channel (weight rows) and is required only when the
/// scheme splits channels into sub-channels.
pub fn estimate_ratio(
    params: u64,
    scheme: Option<&QuantScheme>,
    pattern: Option<&SparsityPattern>,
    channel_len: Option<u64>,
) -> Result<f64> {
    if params == 0 {
        return Err(Error::InvalidValue("params must be positive".into()));
    }
    let bits = scheme.map_or(32u32, |s| s.bits() as u32);
    let density = pattern.map_or(1.0, |p| p.n() as f64 / p.m() as f64);
    let mut ratio = bits as f64 / 32.0 * density;
    if pattern.is_some() {
        ratio += 1.0 / 32.0;
    }
    if let Some(s) = scheme {
        let sub = s.sub_channels() as u64;
        if sub > 1 {
            let i = channel_len.ok_or_else(|| {
                Error::InvalidConfig(
                    "channel_len is required when sub_channels > 1".into(),
                )
            })?;
            if i == 0 || i % sub != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channel_len {i} not divisible by sub_channels {sub}"
                )));
            }
            ratio += sub as f64 / i as f64;
        }
    }
    Ok(ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSize {
    pub name: String,
    pub params: u64,
    pub weight_bits: u64,
    pub mask_bits: u64,
    pub scale_bits: u64,
    pub zero_point_bits: u64,
}

/// Byte-accurate tally of a checkpoint.
///
/// `ratio_vs_f32` covers weight, mask, and scale bits over `params x 32`.
/// Zero points and container framing are tallied alongside
/// (`zero_point_bits`, `serialized_bytes`); `serialized_bytes` is exactly
/// the file size minus the fixed file header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub total_params: u64,
    pub weight_bits: u64,
    pub mask_bits: u64,
    pub sub_channel_scale_bits: u64,
    pub zero_point_bits: u64,
    pub serialized_bytes: u64,
    pub ratio_vs_f32: f64,
}

pub fn measure_actual(ckpt: &Checkpoint) -> SizeReport {
    let mut layers = Vec::new();
    let mut serialized_bytes = 0u64;
    for (name, payload) in ckpt.entries() {
        serialized_bytes += entry_serialized_len(name, payload);
        if payload.dtype == Dtype::Bitmask {
            continue;
        }
        let params: u64 = payload.shape.iter().map(|&d| d as u64).product();
        let mask_bits = payload
            .mask_ref
            .as_deref()
            .and_then(|r| ckpt.get(r))
            .map_or(0, |m| m.bytes.len() as u64 * 8);
        let (scale_bits, zero_point_bits) = payload.quant.as_ref().map_or((0, 0), |q| {
            (q.scales.len() as u64 * 32, q.zero_points.len() as u64 * 32)
        });
        layers.push(LayerSize {
            name: name.clone(),
            params,
            weight_bits: payload.bytes.len() as u64 * 8,
            mask_bits,
            scale_bits,
            zero_point_bits,
        });
    }
    let total_params: u64 = layers.iter().map(|l| l.params).sum();
    let weight_bits: u64 = layers.iter().map(|l| l.weight_bits).sum();
    let mask_bits: u64 = layers.iter().map(|l| l.mask_bits).sum();
    let sub_channel_scale_bits: u64 = layers.iter().map(|l| l.scale_bits).sum();
    let zero_point_bits: u64 = layers.iter().map(|l| l.zero_point_bits).sum();
    let denom = (total_params * 32) as f64;
    let ratio_vs_f32 = if total_params == 0 {
        0.0
    } else {
        (weight_bits + mask_bits + sub_channel_scale_bits) as f64 / denom
    };
    SizeReport {
        layers,
        total_params,
        weight_bits,
        mask_bits,
        sub_channel_scale_bits,
        zero_point_bits,
        serialized_bytes,
        ratio_vs_f32,
    }
}
