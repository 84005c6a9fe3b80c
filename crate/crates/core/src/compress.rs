//! One-shot compression of dense checkpoints: magnitude pruning followed by
//! quantization and packing, applied per eligible tensor, plus the inverse
//! decode used for evaluation and reporting.

use crate::checkpoint::{Checkpoint, Dtype, TensorPayload};
use crate::error::{Error, Result};
use crate::packed;
use crate::quant::{quantize_weight, QuantScheme, QuantizedTensor};
use crate::sparse::{make_mask, prune, SparsityMask, SparsityPattern};
use crate::tensor::Tensor;

/// Shell-style name match supporting `*` (any run of characters) only.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    // Classic two-pointer wildcard scan with backtracking to the last star.
    let (mut pi, mut ni) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ni));
            pi += 1;
        } else if let Some((spi, sni)) = star {
            pi = spi + 1;
            ni = sni + 1;
            star = Some((spi, sni + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Compression applies only to rank-2 tensors whose names match the include
/// pattern; everything else passes through dense.
pub fn is_eligible(name: &str, payload: &TensorPayload, include: &str) -> bool {
    payload.shape.len() == 2 && glob_match(include, name)
}

/// Set codes at pruned positions to 0 so the packed layout (which stores
/// kept codes only) represents them exactly. Symmetric quantization of a
/// pruned weight already yields 0 there; asymmetric yields the zero point,
/// which this rewrites.
pub fn zero_masked_codes(q: &mut QuantizedTensor, mask: &SparsityMask) {
    for (f, code) in q.codes_mut().iter_mut().enumerate() {
        if !mask.kept(f) {
            *code = 0;
        }
    }
}

fn f32_bytes_le(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

/// Compress one weight with an already-decided mask (the trainer's frozen
/// mask, or a fresh magnitude mask for one-shot use). Returns the entries to
/// store: the weight itself plus, when sparse, its companion bitmask.
pub fn compress_with_mask(
    w: &Tensor,
    scheme: Option<&QuantScheme>,
    mask: Option<&SparsityMask>,
    name: &str,
) -> Result<Vec<(String, TensorPayload)>> {
    let pruned = match mask {
        Some(m) => prune(w, m)?,
        None => w.clone(),
    };
    match (scheme, mask) {
        (None, None) => Ok(vec![(name.to_string(), TensorPayload::from_tensor(w))]),
        (None, Some(m)) => {
            let kept = pruned
                .data()
                .iter()
                .enumerate()
                .filter(|(f, _)| m.kept(*f))
                .map(|(_, &v)| v);
            let mask_name = format!("{name}.mask");
            let entry = TensorPayload {
                dtype: Dtype::F32,
                shape: w.shape().to_vec(),
                bytes: f32_bytes_le(kept),
                quant: None,
                mask_ref: Some(mask_name.clone()),
            };
            let mask_entry = TensorPayload {
                dtype: Dtype::Bitmask,
                shape: w.shape().to_vec(),
                bytes: m.to_bitmap_bytes(),
                quant: None,
                mask_ref: None,
            };
            Ok(vec![(name.to_string(), entry), (mask_name, mask_entry)])
        }
        (Some(s), _) => {
            let mut q = quantize_weight(&pruned, s)?;
            if let Some(m) = mask {
                zero_masked_codes(&mut q, m);
            }
            let p = packed::pack(&q, mask)?;
            let (entry, mask_pair) = packed::to_entries(&p, name);
            let mut out = vec![(name.to_string(), entry)];
            out.extend(mask_pair);
            Ok(out)
        }
    }
}

/// One-shot compress: magnitude mask (if a pattern is given), prune, then
/// quantize and pack (if a scheme is given).
pub fn compress_tensor(
    w: &Tensor,
    scheme: Option<&QuantScheme>,
    pattern: Option<&SparsityPattern>,
    name: &str,
) -> Result<Vec<(String, TensorPayload)>> {
    let mask = match pattern {
        Some(p) => Some(make_mask(w, *p)?),
        None => None,
    };
    compress_with_mask(w, scheme, mask.as_ref(), name)
}

/// Compress every eligible tensor of a dense checkpoint. The null transform
/// (no scheme, no pattern) returns an identical checkpoint. Inputs that are
/// already compressed are rejected.
pub fn compress_checkpoint(
    ckpt: &Checkpoint,
    scheme: Option<&QuantScheme>,
    pattern: Option<&SparsityPattern>,
    include: &str,
) -> Result<Checkpoint> {
    for (name, payload) in ckpt.entries() {
        if payload.dtype != Dtype::F32 || payload.mask_ref.is_some() {
            return Err(Error::InvalidValue(format!(
                "entry {name:?} is not dense float32; input looks already compressed"
            )));
        }
    }
    let mut out = Checkpoint::new();
    for (name, payload) in ckpt.entries() {
        if scheme.is_none() && pattern.is_none() {
            out.push(name.clone(), payload.clone())?;
        } else if is_eligible(name, payload, include) {
            let w = payload.to_tensor()?;
            for (n, p) in compress_tensor(&w, scheme, pattern, name)? {
                out.push(n, p)?;
            }
        } else {
            out.push(name.clone(), payload.clone())?;
        }
    }
    Ok(out)
}

/// Reconstruct the effective dense weight of an entry: dequantized codes for
/// packed entries, scattered kept values for sparse float entries, and exact
/// zeros at pruned positions in both cases.
pub fn decode_weight(ckpt: &Checkpoint, name: &str) -> Result<Tensor> {
    let entry = ckpt
        .get(name)
        .ok_or_else(|| Error::InvalidValue(format!("no entry named {name:?}")))?;
    match entry.dtype {
        Dtype::Bitmask => Err(Error::InvalidValue(format!(
            "entry {name:?} is a bitmask, not a weight"
        ))),
        Dtype::F32 => match &entry.mask_ref {
            None => entry.to_tensor(),
            Some(mask_name) => {
                let mask_entry = ckpt
                    .get(mask_name)
                    .ok_or_else(|| Error::Format(format!("missing mask entry {mask_name:?}")))?;
                let mask = SparsityMask::from_bitmap_infer(
                    &mask_entry.bytes,
                    &entry.shape,
                    packed::SPARSE_M,
                )?;
                if entry.bytes.len() != mask.ones() * 4 {
                    return Err(Error::Format(format!(
                        "sparse f32 entry {name:?} holds {} bytes, mask keeps {} values",
                        entry.bytes.len(),
                        mask.ones()
                    )));
                }
                let mut kept = entry
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
                let numel: usize = entry.shape.iter().product();
                let mut data = vec![0f32; numel];
                for (f, slot) in data.iter_mut().enumerate() {
                    if mask.kept(f) {
                        *slot = kept.next().expect("length checked above");
                    }
                }
                Tensor::from_vec(&entry.shape, data)
            }
        },
        Dtype::I8 | Dtype::I4Packed | Dtype::I2Packed => {
            let mask_entry = match &entry.mask_ref {
                Some(r) => Some(ckpt.get(r).ok_or_else(|| {
                    Error::Format(format!("missing mask entry {r:?}"))
                })?),
                None => None,
            };
            let p = packed::from_entries(entry, mask_entry)?;
            let (q, mask) = packed::unpack(&p)?;
            let mut t = crate::quant::dequantize(&q);
            if let Some(mask) = mask {
                // An asymmetric code 0 dequantizes to -scale*zero_point;
                // the effective pruned weight is exactly 0.
                for (f, v) in t.data_mut().iter_mut().enumerate() {
                    if !mask.kept(f) {
                        *v = 0.0;
                    }
                }
            }
            Ok(t)
        }
    }
}
