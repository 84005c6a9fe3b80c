//! Native storage and execution: bit-packed int8/int4/int2 codes, the
//! compressed N:4 sparse layout, and fused matmul kernels that are
//! bit-identical to the reference path.
//!
//! Bit layout: codes are a flat little-endian bitstream over the row-major
//! weight, LSB-first within each byte, so the field at flat index f occupies
//! bits [f*w, (f+1)*w) of the stream (int4: low nibble = lower flat index).
//! Field widths 2/4/8 never straddle a byte. Symmetric codes are stored as
//! two's complement within the field; asymmetric codes as unsigned.
//!
//! Sparse layout (m = 4 only): per group of 4 consecutive weights, the n
//! kept codes in ascending position order in `value_bytes`, plus n 2-bit
//! group-local positions in `index_bytes`. Pruned positions decode as
//! code 0.
//!
//! Bit-exactness contract: `packed_matmul` reproduces `quantized_matmul_ref`
//! on the unpacked codes (zeros at pruned positions) to the last bit. Both
//! kernels accumulate in ascending i within each sub-channel group, combine
//! groups in ascending order with the same expression, and skip only terms
//! that add a literal float zero to a non-negative-zero accumulator.

use crate::error::{Error, Result};
use crate::exec;
use crate::quant::{QuantScheme, QuantizedTensor};
use crate::sparse::{SparsityMask, SparsityPattern};
use crate::tensor::Tensor;

/// Group size the sparse layout is specialized to; 2-bit indices.
pub const SPARSE_M: usize = 4;

#[inline]
fn read_field(bytes: &[u8], idx: usize, width: usize) -> u32 {
    let bit = idx * width;
    ((bytes[bit / 8] >> (bit % 8)) as u32) & ((1u32 << width) - 1)
}

#[inline]
fn write_field(bytes: &mut [u8], idx: usize, width: usize, value: u32) {
    let bit = idx * width;
    bytes[bit / 8] |= ((value & ((1u32 << width) - 1)) as u8) << (bit % 8);
}

#[inline]
fn sign_extend(value: u32, width: usize) -> i32 {
    if (value >> (width - 1)) & 1 == 1 {
        (value | (u32::MAX << width)) as i32
    } else {
        value as i32
    }
}

#[inline]
fn decode_code(value: u32, width: usize, symmetric: bool) -> i32 {
    if symmetric {
        sign_extend(value, width)
    } else {
        value as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeight {
    scheme: QuantScheme,
    pattern: Option<SparsityPattern>,
    value_bytes: Vec<u8>,
    index_bytes: Vec<u8>,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
    shape: [usize; 2],
}

impl PackedWeight {
    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn pattern(&self) -> Option<SparsityPattern> {
        self.pattern
    }

    pub fn value_bytes(&self) -> &[u8] {
        &self.value_bytes
    }

    pub fn index_bytes(&self) -> &[u8] {
        &self.index_bytes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn group_len(&self) -> usize {
        self.shape[0] / self.scheme.sub_channels()
    }

    /// Kept codes per sparse group (pattern n), or None when dense.
    fn kept_per_group(&self) -> Option<usize> {
        self.pattern.map(|p| p.n())
    }
}

fn expected_value_bytes(shape: [usize; 2], bits: usize, pattern: Option<SparsityPattern>) -> usize {
    let numel = shape[0] * shape[1];
    let stored = match pattern {
        None => numel,
        Some(p) => numel / p.m() * p.n(),
    };
    (stored * bits).div_ceil(8)
}

fn expected_index_bytes(shape: [usize; 2], pattern: Option<SparsityPattern>) -> usize {
    match pattern {
        None => 0,
        Some(p) => {
            let numel = shape[0] * shape[1];
            (numel / p.m() * p.n() * 2).div_ceil(8)
        }
    }
}

/// Pack quantized codes, optionally in the compressed sparse layout.
///
/// With a mask, codes at pruned positions must already be exactly 0 (the
/// prune-before-quantize order guarantees this for symmetric schemes;
/// asymmetric pipelines zero them explicitly before packing).
pub fn pack(q: &QuantizedTensor, mask: Option<&SparsityMask>) -> Result<PackedWeight> {
    let shape = q.shape();
    let bits = q.scheme().bits() as usize;
    match mask {
        None => {
            let mut value_bytes = vec![0u8; expected_value_bytes(shape, bits, None)];
            for (f, &code) in q.codes().iter().enumerate() {
                write_field(&mut value_bytes, f, bits, code as u32);
            }
            Ok(PackedWeight {
                scheme: *q.scheme(),
                pattern: None,
                value_bytes,
                index_bytes: Vec::new(),
                scales: q.scales().to_vec(),
                zero_points: q.zero_points().to_vec(),
                shape,
            })
        }
        Some(mask) => {
            let pattern = mask.pattern();
            if pattern.m() != SPARSE_M {
                return Err(Error::Unsupported(format!(
                    "sparse packing supports m={SPARSE_M} only, got m={}",
                    pattern.m()
                )));
            }
            if mask.shape() != shape.as_slice() {
                return Err(Error::InvalidShape(format!(
                    "mask shape {:?} != weight shape {:?}",
                    mask.shape(),
                    shape
                )));
            }
            let codes = q.codes();
            for (f, &code) in codes.iter().enumerate() {
                if !mask.kept(f) && code != 0 {
                    return Err(Error::InvalidState(format!(
                        "nonzero code {code} at pruned flat index {f}"
                    )));
                }
            }
            let some = Some(pattern);
            let mut value_bytes = vec![0u8; expected_value_bytes(shape, bits, some)];
            let mut index_bytes = vec![0u8; expected_index_bytes(shape, some)];
            let mut field = 0usize;
            for k in 0..codes.len() / SPARSE_M {
                for pos in 0..SPARSE_M {
                    let flat = k * SPARSE_M + pos;
                    if mask.kept(flat) {
                        write_field(&mut value_bytes, field, bits, codes[flat] as u32);
                        write_field(&mut index_bytes, field, 2, pos as u32);
                        field += 1;
                    }
                }
            }
            Ok(PackedWeight {
                scheme: *q.scheme(),
                pattern: some,
                value_bytes,
                index_bytes,
                scales: q.scales().to_vec(),
                zero_points: q.zero_points().to_vec(),
                shape,
            })
        }
    }
}

fn check_padding(bytes: &[u8], used_bits: usize, what: &str) -> Result<()> {
    for bit in used_bits..bytes.len() * 8 {
        if (bytes[bit / 8] >> (bit % 8)) & 1 != 0 {
            return Err(Error::Format(format!("nonzero padding bit in {what}")));
        }
    }
    Ok(())
}

/// Exact inverse of [`pack`]: codes with zeros at pruned positions, plus the
/// mask for sparse layouts.
pub fn unpack(p: &PackedWeight) -> Result<(QuantizedTensor, Option<SparsityMask>)> {
    let [i_dim, j_dim] = p.shape;
    let numel = i_dim * j_dim;
    let bits = p.scheme.bits() as usize;
    let symmetric = p.scheme.is_symmetric();
    let to_quant = |codes: Vec<i32>| {
        QuantizedTensor::from_parts(
            codes,
            p.scales.clone(),
            p.zero_points.clone(),
            p.scheme,
            p.shape,
        )
        .map_err(|e| Error::Format(format!("packed data decodes to invalid tensor: {e}")))
    };
    match p.pattern {
        None => {
            if p.value_bytes.len() != expected_value_bytes(p.shape, bits, None) {
                return Err(Error::Format("dense payload length mismatch".into()));
            }
            check_padding(&p.value_bytes, numel * bits, "value bytes")?;
            let codes: Vec<i32> = (0..numel)
                .map(|f| decode_code(read_field(&p.value_bytes, f, bits), bits, symmetric))
                .collect();
            Ok((to_quant(codes)?, None))
        }
        Some(pattern) => {
            let n = pattern.n();
            let groups = numel / SPARSE_M;
            if p.value_bytes.len() != expected_value_bytes(p.shape, bits, Some(pattern))
                || p.index_bytes.len() != expected_index_bytes(p.shape, Some(pattern))
            {
                return Err(Error::Format("sparse payload length mismatch".into()));
            }
            check_padding(&p.value_bytes, groups * n * bits, "value bytes")?;
            check_padding(&p.index_bytes, groups * n * 2, "index bytes")?;
            let mut codes = vec![0i32; numel];
            let mut mask_bits = vec![0u8; numel];
            let mut field = 0usize;
            for k in 0..groups {
                let mut prev: Option<usize> = None;
                for _ in 0..n {
                    let pos = read_field(&p.index_bytes, field, 2) as usize;
                    if let Some(prev) = prev {
                        if pos == prev {
                            return Err(Error::Format(format!(
                                "duplicate position {pos} in group {k}"
                            )));
                        }
                        if pos < prev {
                            return Err(Error::Format(format!(
                                "positions not ascending in group {k}"
                            )));
                        }
                    }
                    prev = Some(pos);
                    let flat = k * SPARSE_M + pos;
                    codes[flat] =
                        decode_code(read_field(&p.value_bytes, field, bits), bits, symmetric);
                    mask_bits[flat] = 1;
                    field += 1;
                }
            }
            let mask = SparsityMask::from_parts(mask_bits, &[i_dim, j_dim], pattern)
                .map_err(|e| Error::Format(format!("packed mask invalid: {e}")))?;
            Ok((to_quant(codes)?, Some(mask)))
        }
    }
}

fn check_shapes(x: &Tensor, p: &PackedWeight) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "input must be rank 2, got rank {}",
            x.rank()
        )));
    }
    if x.cols() != p.rows() {
        return Err(Error::InvalidShape(format!(
            "input cols {} != weight rows {}",
            x.cols(),
            p.rows()
        )));
    }
    Ok((x.rows(), p.rows(), p.cols()))
}

fn packed_row(xrow: &[f32], p: &PackedWeight, out: &mut [f32]) {
    let j_dim = p.cols();
    let group_len = p.group_len();
    let groups = p.scheme.sub_channels();
    let bits = p.scheme.bits() as usize;
    let symmetric = p.scheme.is_symmetric();
    let sx = crate::quant::row_group_sums(xrow, group_len);
    match p.kept_per_group() {
        None => {
            for (j, slot) in out.iter_mut().enumerate() {
                let mut y = 0.0f32;
                for g in 0..groups {
                    let mut acc = 0.0f32;
                    let base = g * group_len;
                    for (di, &x) in xrow[base..base + group_len].iter().enumerate() {
                        let code =
                            decode_code(read_field(&p.value_bytes, (base + di) * j_dim + j, bits), bits, symmetric);
                        acc += x * code as f32;
                    }
                    let s = p.scales[g * j_dim + j];
                    let z = p.zero_points[g * j_dim + j];
                    y += s * (acc - z as f32 * sx[g]);
                }
                *slot = y;
            }
        }
        Some(n) => {
            // Stream the kept codes once, scattering into per-(group, column)
            // partial sums. Flat order ascends, so each partial sum sees its
            // terms in ascending i, matching the reference order.
            let mut acc = vec![0.0f32; groups * j_dim];
            let total = p.rows() * j_dim / SPARSE_M;
            let mut field = 0usize;
            for k in 0..total {
                for _ in 0..n {
                    let pos = read_field(&p.index_bytes, field, 2) as usize;
                    let code = decode_code(read_field(&p.value_bytes, field, bits), bits, symmetric);
                    let flat = k * SPARSE_M + pos;
                    let i = flat / j_dim;
                    let j = flat % j_dim;
                    acc[(i / group_len) * j_dim + j] += xrow[i] * code as f32;
                    field += 1;
                }
            }
            for (j, slot) in out.iter_mut().enumerate() {
                let mut y = 0.0f32;
                for g in 0..groups {
                    let s = p.scales[g * j_dim + j];
                    let z = p.zero_points[g * j_dim + j];
                    y += s * (acc[g * j_dim + j] - z as f32 * sx[g]);
                }
                *slot = y;
            }
        }
    }
}

/// Fused quantized (and, for sparse layouts, pruned) matmul on the packed
/// representation. Bit-identical to `quantized_matmul_ref` on the unpacked
/// codes.
pub fn packed_matmul(x: &Tensor, p: &PackedWeight) -> Result<Tensor> {
    let (b_dim, i_dim, j_dim) = check_shapes(x, p)?;
    let xdata = x.data();
    let mut out = vec![0f32; b_dim * j_dim];
    exec::for_each_chunk_mut(&mut out, j_dim, |b, row| {
        packed_row(&xdata[b * i_dim..(b + 1) * i_dim], p, row);
    });
    Tensor::from_vec(&[b_dim, j_dim], out)
}

/// Sequential twin of [`packed_matmul`] for baseline benchmarking;
/// bit-identical output.
pub fn packed_matmul_serial(x: &Tensor, p: &PackedWeight) -> Result<Tensor> {
    let (b_dim, i_dim, j_dim) = check_shapes(x, p)?;
    let xdata = x.data();
    let mut out = vec![0f32; b_dim * j_dim];
    for (b, row) in out.chunks_mut(j_dim).enumerate() {
        packed_row(&xdata[b * i_dim..(b + 1) * i_dim], p, row);
    }
    Tensor::from_vec(&[b_dim, j_dim], out)
}

/// Checkpoint dtype for a packed bit width.
pub fn dtype_for_bits(bits: u8) -> crate::checkpoint::Dtype {
    match bits {
        8 => crate::checkpoint::Dtype::I8,
        4 => crate::checkpoint::Dtype::I4Packed,
        _ => crate::checkpoint::Dtype::I2Packed,
    }
}

/// Serialize to checkpoint entries: the weight entry plus, for sparse
/// layouts, a companion bitmask entry named `{name}.mask` that the weight
/// references. Indices are not stored; they are rebuilt from the mask.
pub fn to_entries(
    p: &PackedWeight,
    name: &str,
) -> (
    crate::checkpoint::TensorPayload,
    Option<(String, crate::checkpoint::TensorPayload)>,
) {
    use crate::checkpoint::{Dtype, QuantMeta, TensorPayload};
    let mask_pair = p.pattern.map(|_| {
        let (_, mask) = unpack(p).expect("a constructed PackedWeight round-trips");
        let mask = mask.expect("sparse layout carries a mask");
        let mask_name = format!("{name}.mask");
        (
            mask_name,
            TensorPayload {
                dtype: Dtype::Bitmask,
                shape: vec![p.shape[0], p.shape[1]],
                bytes: mask.to_bitmap_bytes(),
                quant: None,
                mask_ref: None,
            },
        )
    });
    let entry = TensorPayload {
        dtype: dtype_for_bits(p.scheme.bits()),
        shape: vec![p.shape[0], p.shape[1]],
        bytes: p.value_bytes.clone(),
        quant: Some(QuantMeta {
            scheme: p.scheme,
            scales: p.scales.clone(),
            zero_points: p.zero_points.clone(),
        }),
        mask_ref: mask_pair.as_ref().map(|(n, _)| n.clone()),
    };
    (entry, mask_pair)
}

/// Rebuild a PackedWeight from checkpoint entries. The mask entry must be
/// provided iff the weight entry references one.
pub fn from_entries(
    entry: &crate::checkpoint::TensorPayload,
    mask_entry: Option<&crate::checkpoint::TensorPayload>,
) -> Result<PackedWeight> {
    use crate::checkpoint::Dtype;
    let quant = entry
        .quant
        .as_ref()
        .ok_or_else(|| Error::Format("packed entry is missing quant metadata".into()))?;
    if !matches!(entry.dtype, Dtype::I8 | Dtype::I4Packed | Dtype::I2Packed) {
        return Err(Error::Format(format!(
            "entry dtype {:?} is not a packed integer type",
            entry.dtype
        )));
    }
    if entry.shape.len() != 2 {
        return Err(Error::Format("packed entry must be rank 2".into()));
    }
    let shape = [entry.shape[0], entry.shape[1]];
    let candidate = match (&entry.mask_ref, mask_entry) {
        (None, None) => PackedWeight {
            scheme: quant.scheme,
            pattern: None,
            value_bytes: entry.bytes.clone(),
            index_bytes: Vec::new(),
            scales: quant.scales.clone(),
            zero_points: quant.zero_points.clone(),
            shape,
        },
        (Some(_), Some(mask_payload)) => {
            if mask_payload.dtype != Dtype::Bitmask {
                return Err(Error::Format("mask entry is not a bitmask".into()));
            }
            if mask_payload.shape != entry.shape {
                return Err(Error::Format("mask shape differs from weight shape".into()));
            }
            let mask =
                SparsityMask::from_bitmap_infer(&mask_payload.bytes, &entry.shape, SPARSE_M)?;
            let pattern = mask.pattern();
            let n = pattern.n();
            let mut index_bytes = vec![0u8; expected_index_bytes(shape, Some(pattern))];
            let mut field = 0usize;
            for k in 0..mask.bits().len() / SPARSE_M {
                for pos in 0..SPARSE_M {
                    if mask.kept(k * SPARSE_M + pos) {
                        write_field(&mut index_bytes, field, 2, pos as u32);
                        field += 1;
                    }
                }
            }
            debug_assert_eq!(field, mask.bits().len() / SPARSE_M * n);
            PackedWeight {
                scheme: quant.scheme,
                pattern: Some(pattern),
                value_bytes: entry.bytes.clone(),
                index_bytes,
                scales: quant.scales.clone(),
                zero_points: quant.zero_points.clone(),
                shape,
            }
        }
        (Some(_), None) => {
            return Err(Error::Format(
                "weight references a mask but none was provided".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Format(
                "mask provided but weight has no mask reference".into(),
            ))
        }
    };
    // Full decode validates lengths, padding, index order, and code ranges.
    unpack(&candidate)?;
    Ok(candidate)
}
