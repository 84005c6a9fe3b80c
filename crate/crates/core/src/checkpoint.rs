//! Binary checkpoint container: named tensor payloads with optional
//! quantization metadata and mask references, bit-exact on disk.
//!
//! Layout (all integers little-endian):
//! bytes 0-3 magic "NMQC"; 4-5 version u16 (=1); 6-9 entry count u32.
//! Each entry: name (u16 length + UTF-8); dtype u8 (0=f32, 1=i8, 2=i4p,
//! 3=i2p, 4=bitmask); rank u8; dims u32 each; quant flag u8 (0/1); if 1:
//! bits u8, symmetric u8, sub_channels u32, rounding u8 (0=half away from
//! zero), scales count u32 + f32 scales, zero-point count u32 + i32 values;
//! mask-name (u16 length, 0 = none, + UTF-8); payload length u64 + bytes.
//!
//! Serialization is deterministic (entries keep insertion order), so
//! save -> load -> save reproduces a file byte-for-byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{QuantScheme, Rounding};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NMQC";
pub const VERSION: u16 = 1;
/// Fixed prefix before the first entry: magic + version + count.
pub const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I8,
    I4Packed,
    I2Packed,
    Bitmask,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::I8 => 1,
            Dtype::I4Packed => 2,
            Dtype::I2Packed => 3,
            Dtype::Bitmask => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Dtype> {
        Ok(match code {
            0 => Dtype::F32,
            1 => Dtype::I8,
            2 => Dtype::I4Packed,
            3 => Dtype::I2Packed,
            4 => Dtype::Bitmask,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    pub fn bits_per_element(self) -> usize {
        match self {
            Dtype::F32 => 32,
            Dtype::I8 => 8,
            Dtype::I4Packed => 4,
            Dtype::I2Packed => 2,
            Dtype::Bitmask => 1,
        }
    }
}

/// Quantization parameters attached to a packed entry. `scales` and
/// `zero_points` are group-major, shape (sub_channels x J), exactly as in
/// `QuantizedTensor`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMeta {
    pub scheme: QuantScheme,
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorPayload {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
    pub quant: Option<QuantMeta>,
    pub mask_ref: Option<String>,
}

impl TensorPayload {
    pub fn from_tensor(t: &Tensor) -> TensorPayload {
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorPayload {
            dtype: Dtype::F32,
            shape: t.shape().to_vec(),
            bytes,
            quant: None,
            mask_ref: None,
        }
    }

    /// Decode an f32 entry back into a tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dtype != Dtype::F32 {
            return Err(Error::InvalidState(format!(
                "entry dtype {:?} is not f32",
                self.dtype
            )));
        }
        if self.mask_ref.is_some() {
            return Err(Error::InvalidState(
                "sparse f32 entry needs its mask to decode; use compress::decode_entry".into(),
            ));
        }
        let vals: Vec<f32> = self
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(&self.shape, vals)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    version: u16,
    entries: Vec<(String, TensorPayload)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint::new()
    }
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint {
            version: VERSION,
            entries: Vec::new(),
        }
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, TensorPayload)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorPayload> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn push(&mut self, name: impl Into<String>, payload: TensorPayload) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidValue(format!("duplicate entry name {name:?}")));
        }
        validate_entry(&name, &payload).map_err(Error::InvalidValue)?;
        self.entries.push((name, payload));
        Ok(())
    }
}

/// Self-contained checks: shape sanity, metadata consistency, and the
/// dense byte-count rule. Mask-dependent byte counts are checked at
/// serialization boundaries where the referenced entry is visible.
fn validate_entry(name: &str, p: &TensorPayload) -> std::result::Result<(), String> {
    if p.shape.is_empty() || p.shape.iter().any(|&d| d == 0) {
        return Err(format!("entry {name:?}: shape must be nonempty with nonzero dims"));
    }
    let numel = p.numel();
    match p.dtype {
        Dtype::Bitmask => {
            if p.quant.is_some() {
                return Err(format!("entry {name:?}: bitmask cannot carry quant metadata"));
            }
            if p.mask_ref.is_some() {
                return Err(format!("entry {name:?}: bitmask cannot reference a mask"));
            }
        }
        Dtype::F32 => {
            if p.quant.is_some() {
                return Err(format!(
                    "entry {name:?}: quant metadata requires a packed integer dtype"
                ));
            }
        }
        _ => {}
    }
    if let Some(q) = &p.quant {
        if p.shape.len() != 2 {
            return Err(format!("entry {name:?}: quantized entries must be rank 2"));
        }
        let want = q.scheme.sub_channels() * p.shape[1];
        if p.shape[0] % q.scheme.sub_channels() != 0 {
            return Err(format!(
                "entry {name:?}: rows {} not divisible by sub_channels {}",
                p.shape[0],
                q.scheme.sub_channels()
            ));
        }
        if q.scales.len() != want || q.zero_points.len() != want {
            return Err(format!(
                "entry {name:?}: scales/zero_points must have length {want}"
            ));
        }
        if q.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(format!("entry {name:?}: scales must be finite and positive"));
        }
        let (lo, hi) = q.scheme.code_range();
        if q.scheme.is_symmetric() {
            if q.zero_points.iter().any(|&z| z != 0) {
                return Err(format!("entry {name:?}: symmetric zero_points must be 0"));
            }
        } else if q.zero_points.iter().any(|&z| z < lo || z > hi) {
            return Err(format!("entry {name:?}: zero_point outside [{lo}, {hi}]"));
        }
        let expect_bits = match p.dtype {
            Dtype::I8 => 8,
            Dtype::I4Packed => 4,
            Dtype::I2Packed => 2,
            _ => unreachable!("checked above"),
        };
        if q.scheme.bits() != expect_bits {
            return Err(format!(
                "entry {name:?}: dtype {:?} does not match scheme bits {}",
                p.dtype,
                q.scheme.bits()
            ));
        }
    }
    if p.mask_ref.is_none() {
        let want = (numel * p.dtype.bits_per_element()).div_ceil(8);
        if p.bytes.len() != want {
            return Err(format!(
                "entry {name:?}: payload is {} bytes, dtype/shape need {}",
                p.bytes.len(),
                want
            ));
        }
    }
    Ok(())
}

/// Cross-entry checks: every mask reference resolves to a bitmask entry of
/// the same shape, with zero padding bits, and the referencing payload holds
/// exactly the kept elements.
fn validate_refs(entries: &[(String, TensorPayload)]) -> std::result::Result<(), String> {
    for (name, p) in entries {
        if p.dtype == Dtype::Bitmask {
            let numel = p.numel();
            for i in numel..p.bytes.len() * 8 {
                if (p.bytes[i / 8] >> (i % 8)) & 1 != 0 {
                    return Err(format!("entry {name:?}: nonzero padding bit in bitmask"));
                }
            }
        }
        let Some(mref) = &p.mask_ref else { continue };
        let Some(mask) = entries
            .iter()
            .find(|(n, _)| n == mref)
            .map(|(_, mp)| mp)
        else {
            return Err(format!("entry {name:?}: dangling mask reference {mref:?}"));
        };
        if mask.dtype != Dtype::Bitmask {
            return Err(format!(
                "entry {name:?}: mask reference {mref:?} is not a bitmask"
            ));
        }
        if mask.shape != p.shape {
            return Err(format!(
                "entry {name:?}: mask shape {:?} != entry shape {:?}",
                mask.shape, p.shape
            ));
        }
        let kept: usize = mask.bytes.iter().map(|b| b.count_ones() as usize).sum();
        let want = (kept * p.dtype.bits_per_element()).div_ceil(8);
        if p.bytes.len() != want {
            return Err(format!(
                "entry {name:?}: sparse payload is {} bytes, {} kept elements need {}",
                p.bytes.len(),
                kept,
                want
            ));
        }
    }
    Ok(())
}

/// Serialized size of one entry (everything after the 10-byte file header
/// attributable to it).
pub fn entry_serialized_len(name: &str, p: &TensorPayload) -> u64 {
    let quant_len = match &p.quant {
        None => 0,
        Some(q) => 1 + 1 + 4 + 1 + 4 + 4 * q.scales.len() as u64 + 4 + 4 * q.zero_points.len() as u64,
    };
    2 + name.len() as u64
        + 1
        + 1
        + 4 * p.shape.len() as u64
        + 1
        + quant_len
        + 2
        + p.mask_ref.as_ref().map_or(0, |m| m.len() as u64)
        + 8
        + p.bytes.len() as u64
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    validate_refs(ckpt.entries()).map_err(Error::InvalidState)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    let count: u32 = ckpt
        .entries
        .len()
        .try_into()
        .map_err(|_| Error::InvalidValue("too many entries for u32 count".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in &ckpt.entries {
        write_str(&mut out, name)?;
        out.push(p.dtype.code());
        let rank: u8 = p
            .shape
            .len()
            .try_into()
            .map_err(|_| Error::InvalidShape("rank exceeds u8".into()))?;
        out.push(rank);
        for &d in &p.shape {
            let d: u32 = d
                .try_into()
                .map_err(|_| Error::InvalidShape("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &p.quant {
            None => out.push(0),
            Some(q) => {
                out.push(1);
                out.push(q.scheme.bits());
                out.push(q.scheme.is_symmetric() as u8);
                let sc: u32 = q
                    .scheme
                    .sub_channels()
                    .try_into()
                    .map_err(|_| Error::InvalidValue("sub_channels exceeds u32".into()))?;
                out.extend_from_slice(&sc.to_le_bytes());
                out.push(match q.scheme.rounding() {
                    Rounding::HalfAwayFromZero => 0,
                });
                out.extend_from_slice(&(q.scales.len() as u32).to_le_bytes());
                for s in &q.scales {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out.extend_from_slice(&(q.zero_points.len() as u32).to_le_bytes());
                for z in &q.zero_points {
                    out.extend_from_slice(&z.to_le_bytes());
                }
            }
        }
        match &p.mask_ref {
            None => out.extend_from_slice(&0u16.to_le_bytes()),
            Some(m) => write_str(&mut out, m)?,
        }
        out.extend_from_slice(&(p.bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&p.bytes);
    }
    Ok(out)
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| Error::InvalidValue(format!("name too long: {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self) -> Result<i32> {
        let b = self.take(4)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("name is not valid UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected \"NMQC\"".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = Dtype::from_code(r.u8()?)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let quant = match r.u8()? {
            0 => None,
            1 => {
                let bits = r.u8()?;
                let symmetric = match r.u8()? {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(Error::Format(format!("bad symmetric flag {other}")))
                    }
                };
                let sub_channels = r.u32()? as usize;
                let rounding = r.u8()?;
                if rounding != 0 {
                    return Err(Error::Format(format!("unknown rounding code {rounding}")));
                }
                let scheme = QuantScheme::new(bits, symmetric, sub_channels)
                    .map_err(|e| Error::Format(format!("bad scheme: {e}")))?;
                let n_scales = r.u32()? as usize;
                let mut scales = Vec::with_capacity(n_scales.min(1 << 20));
                for _ in 0..n_scales {
                    scales.push(r.f32()?);
                }
                let n_zps = r.u32()? as usize;
                let mut zero_points = Vec::with_capacity(n_zps.min(1 << 20));
                for _ in 0..n_zps {
                    zero_points.push(r.i32()?);
                }
                Some(QuantMeta {
                    scheme,
                    scales,
                    zero_points,
                })
            }
            other => return Err(Error::Format(format!("bad quant flag {other}"))),
        };
        let mask_ref = {
            let s = r.string()?;
            if s.is_empty() {
                None
            } else {
                Some(s)
            }
        };
        let payload_len = r.u64()?;
        let payload_len: usize = payload_len
            .try_into()
            .map_err(|_| Error::Format("payload length exceeds address space".into()))?;
        let bytes = r.take(payload_len)?.to_vec();
        let payload = TensorPayload {
            dtype,
            shape,
            bytes,
            quant,
            mask_ref,
        };
        validate_entry(&name, &payload).map_err(Error::Format)?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        entries.push((name, payload));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last entry",
            buf.len() - r.pos
        )));
    }
    validate_refs(&entries).map_err(Error::Format)?;
    Ok(Checkpoint {
        version,
        entries,
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, SplitMix64};
    use proptest::prelude::*;

    #[test]
    fn empty_checkpoint_is_ten_bytes() {
        let bytes = to_bytes(&Checkpoint::new()).unwrap();
        assert_eq!(bytes, b"NMQC\x01\x00\x00\x00\x00\x00");
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = from_bytes(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn single_scalar_file_layout_is_frozen() {
        let mut ckpt = Checkpoint::new();
        let t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        ckpt.push("w", TensorPayload::from_tensor(&t)).unwrap();
        let bytes = to_bytes(&ckpt).unwrap();
        let expect: Vec<u8> = [
            b"NMQC".as_slice(),
            &[0x01, 0x00],             // version
            &[0x01, 0x00, 0x00, 0x00], // count
            &[0x01, 0x00],             // name len
            b"w",
            &[0x00],                   // dtype f32
            &[0x01],                   // rank
            &[0x01, 0x00, 0x00, 0x00], // dim 1
            &[0x00],                   // no quant
            &[0x00, 0x00],             // no mask ref
            &[0x04, 0, 0, 0, 0, 0, 0, 0], // payload len
            &[0x00, 0x00, 0x80, 0x3F], // 1.0f32
        ]
        .concat();
        assert_eq!(bytes, expect);
        assert_eq!(
            entry_serialized_len("w", ckpt.get("w").unwrap()),
            (bytes.len() - HEADER_LEN) as u64
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let err = from_bytes(b"XXXX\x01\x00\x00\x00\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncation_anywhere_is_a_format_error() {
        let mut ckpt = Checkpoint::new();
        let t = Tensor::new(
            &[3, 2],
            Fill::SeededUniform {
                seed: 1,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap();
        ckpt.push("weight", TensorPayload::from_tensor(&t)).unwrap();
        let bytes = to_bytes(&ckpt).unwrap();
        for cut in 1..bytes.len() {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&Checkpoint::new()).unwrap();
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let mut ckpt = Checkpoint::new();
        let t = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        ckpt.push("w", TensorPayload::from_tensor(&t)).unwrap();
        let mut bytes = to_bytes(&ckpt).unwrap();
        // dtype byte sits right after the 10-byte header, name len, and name.
        let dtype_pos = HEADER_LEN + 2 + 1;
        assert_eq!(bytes[dtype_pos], 0);
        bytes[dtype_pos] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_names_rejected_on_push_and_load() {
        let mut ckpt = Checkpoint::new();
        let t = Tensor::from_vec(&[1], vec![1.5]).unwrap();
        ckpt.push("a", TensorPayload::from_tensor(&t)).unwrap();
        assert!(matches!(
            ckpt.push("a", TensorPayload::from_tensor(&t)),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn wrong_payload_length_rejected() {
        let p = TensorPayload {
            dtype: Dtype::F32,
            shape: vec![2],
            bytes: vec![0; 7],
            quant: None,
            mask_ref: None,
        };
        let mut ckpt = Checkpoint::new();
        assert!(matches!(ckpt.push("w", p), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn dangling_mask_reference_rejected_at_save() {
        let mut ckpt = Checkpoint::new();
        let p = TensorPayload {
            dtype: Dtype::I8,
            shape: vec![2, 4],
            bytes: vec![0; 4],
            quant: None,
            mask_ref: Some("missing".into()),
        };
        ckpt.push("w", p).unwrap();
        assert!(matches!(to_bytes(&ckpt), Err(Error::InvalidState(_))));
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut ckpt = Checkpoint::new();
        let t = Tensor::new(
            &[4, 3],
            Fill::SeededUniform {
                seed: 7,
                lo: -2.0,
                hi: 2.0,
            },
        )
        .unwrap();
        ckpt.push("dense", TensorPayload::from_tensor(&t)).unwrap();
        let scheme = QuantScheme::asymmetric(2, 2).unwrap();
        ckpt.push(
            "packed",
            TensorPayload {
                dtype: Dtype::I2Packed,
                shape: vec![4, 3],
                bytes: vec![0xE4, 0x1B, 0x00],
                quant: Some(QuantMeta {
                    scheme,
                    scales: vec![0.5; 6],
                    zero_points: vec![1; 6],
                }),
                mask_ref: None,
            },
        )
        .unwrap();
        let bytes = to_bytes(&ckpt).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        // Deterministic writer: a second save is byte-identical.
        assert_eq!(bytes, to_bytes(&back).unwrap());
        assert_eq!(back.get("dense").unwrap().to_tensor().unwrap(), t);
    }

    #[test]
    fn sparse_pair_round_trips_and_validates_byte_count() {
        use crate::sparse::{make_mask, SparsityPattern};
        let w = Tensor::new(
            &[2, 4],
            Fill::SeededUniform {
                seed: 3,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap();
        let mask = make_mask(&w, SparsityPattern::new(1, 4).unwrap()).unwrap();
        let mut ckpt = Checkpoint::new();
        // 2 kept i8 codes -> 2 payload bytes.
        ckpt.push(
            "w",
            TensorPayload {
                dtype: Dtype::I8,
                shape: vec![2, 4],
                bytes: vec![5u8, 250u8],
                quant: None,
                mask_ref: Some("w.mask".into()),
            },
        )
        .unwrap();
        ckpt.push(
            "w.mask",
            TensorPayload {
                dtype: Dtype::Bitmask,
                shape: vec![2, 4],
                bytes: mask.to_bitmap_bytes(),
                quant: None,
                mask_ref: None,
            },
        )
        .unwrap();
        let bytes = to_bytes(&ckpt).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), ckpt);

        // Wrong kept-count payload is rejected.
        let mut bad = Checkpoint::new();
        bad.push(
            "w",
            TensorPayload {
                dtype: Dtype::I8,
                shape: vec![2, 4],
                bytes: vec![5u8, 250u8, 7u8],
                quant: None,
                mask_ref: Some("w.mask".into()),
            },
        )
        .unwrap();
        bad.push("w.mask", ckpt.get("w.mask").unwrap().clone())
            .unwrap();
        assert!(matches!(to_bytes(&bad), Err(Error::InvalidState(_))));
    }

    fn arb_payload() -> impl Strategy<Value = TensorPayload> {
        (
            prop_oneof![
                Just(Dtype::F32),
                Just(Dtype::I8),
                Just(Dtype::I4Packed),
                Just(Dtype::I2Packed),
                Just(Dtype::Bitmask),
            ],
            prop::collection::vec(1usize..5, 1..3),
            any::<u64>(),
        )
            .prop_map(|(dtype, shape, seed)| {
                let numel: usize = shape.iter().product();
                let nbytes = (numel * dtype.bits_per_element()).div_ceil(8);
                let mut rng = SplitMix64::new(seed);
                let mut bytes: Vec<u8> =
                    (0..nbytes).map(|_| (rng.next_u64() & 0xFF) as u8).collect();
                if dtype == Dtype::Bitmask {
                    // Zero the padding bits so the payload is valid.
                    for i in numel..nbytes * 8 {
                        bytes[i / 8] &= !(1 << (i % 8));
                    }
                }
                TensorPayload {
                    dtype,
                    shape,
                    bytes,
                    quant: None,
                    mask_ref: None,
                }
            })
    }

    proptest! {
        #[test]
        fn arbitrary_checkpoints_round_trip(
            payloads in prop::collection::vec(arb_payload(), 0..6)
        ) {
            let mut ckpt = Checkpoint::new();
            for (i, p) in payloads.into_iter().enumerate() {
                ckpt.push(format!("entry{i}"), p).unwrap();
            }
            let bytes = to_bytes(&ckpt).unwrap();
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(&ckpt, &back);
            prop_assert_eq!(bytes, to_bytes(&back).unwrap());
        }
    }
}
