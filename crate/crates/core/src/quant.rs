//! Quantization schemes, scale computation, quantize/dequantize, and the
//! reference (unpacked) per-channel quantized matmul.
//!
//! Quantization is weight-only: activations stay f32. A weight W[I×J] is
//! quantized per channel (column j); each channel optionally splits into
//! `sub_channels` contiguous row groups with a dedicated scale per group.
//!
//! Symmetric: codes in [-(2^{b-1}-1), 2^{b-1}-1], scale = max|group| / qmax,
//! dequant = s·q. Asymmetric: codes in [0, 2^b-1], scale = (max-min)/(2^b-1),
//! zero point z = clamp(round(-min/s), 0, 2^b-1), dequant = s·(q - z).
//! Rounding is half-away-from-zero throughout (`f32::round`).

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Rounding rule applied when mapping reals to integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    HalfAwayFromZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantScheme {
    bits: u8,
    symmetric: bool,
    sub_channels: usize,
    rounding: Rounding,
}

impl QuantScheme {
    pub fn new(bits: u8, symmetric: bool, sub_channels: usize) -> Result<QuantScheme> {
        if !matches!(bits, 2 | 4 | 8) {
            return Err(Error::InvalidConfig(format!(
                "bits must be 2, 4, or 8, got {bits}"
            )));
        }
        if sub_channels == 0 {
            return Err(Error::InvalidConfig("sub_channels must be >= 1".into()));
        }
        Ok(QuantScheme {
            bits,
            symmetric,
            sub_channels,
            rounding: Rounding::HalfAwayFromZero,
        })
    }

    pub fn symmetric(bits: u8, sub_channels: usize) -> Result<QuantScheme> {
        QuantScheme::new(bits, true, sub_channels)
    }

    pub fn asymmetric(bits: u8, sub_channels: usize) -> Result<QuantScheme> {
        QuantScheme::new(bits, false, sub_channels)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn sub_channels(&self) -> usize {
        self.sub_channels
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    /// Inclusive integer code range.
    pub fn code_range(&self) -> (i32, i32) {
        if self.symmetric {
            let qmax = (1i32 << (self.bits - 1)) - 1;
            (-qmax, qmax)
        } else {
            (0, (1i32 << self.bits) - 1)
        }
    }

    /// int2 symmetric leaves one of four buckets unused; callers may warn.
    pub fn underutilizes_buckets(&self) -> bool {
        self.bits == 2 && self.symmetric
    }
}

/// Integer codes plus per-(group, channel) scales and zero points.
///
/// `codes` is row-major I×J. `scales` and `zero_points` have shape
/// (sub_channels × J), group-major: entry (g, j) sits at `g * J + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i32>,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
    scheme: QuantScheme,
    shape: [usize; 2],
}

impl QuantizedTensor {
    /// Validates every struct invariant; the only way to build one outside
    /// [`quantize_weight`].
    pub fn from_parts(
        codes: Vec<i32>,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        scheme: QuantScheme,
        shape: [usize; 2],
    ) -> Result<QuantizedTensor> {
        let [i_dim, j_dim] = shape;
        if i_dim == 0 || j_dim == 0 {
            return Err(Error::InvalidShape("dimensions must be nonzero".into()));
        }
        if i_dim % scheme.sub_channels() != 0 {
            return Err(Error::InvalidShape(format!(
                "rows {} not divisible by sub_channels {}",
                i_dim,
                scheme.sub_channels()
            )));
        }
        if codes.len() != i_dim * j_dim {
            return Err(Error::InvalidShape(format!(
                "codes length {} != {}x{}",
                codes.len(),
                i_dim,
                j_dim
            )));
        }
        let want = scheme.sub_channels() * j_dim;
        if scales.len() != want || zero_points.len() != want {
            return Err(Error::InvalidShape(format!(
                "scales/zero_points length must be {want}"
            )));
        }
        let (lo, hi) = scheme.code_range();
        if codes.iter().any(|&c| c < lo || c > hi) {
            return Err(Error::InvalidValue(format!(
                "code outside [{lo}, {hi}]"
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidValue(
                "scales must be finite and strictly positive".into(),
            ));
        }
        if scheme.is_symmetric() {
            if zero_points.iter().any(|&z| z != 0) {
                return Err(Error::InvalidValue(
                    "symmetric scheme requires all zero_points == 0".into(),
                ));
            }
        } else if zero_points.iter().any(|&z| z < lo || z > hi) {
            return Err(Error::InvalidValue(format!(
                "zero_point outside [{lo}, {hi}]"
            )));
        }
        Ok(QuantizedTensor {
            codes,
            scales,
            zero_points,
            scheme,
            shape,
        })
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub(crate) fn codes_mut(&mut self) -> &mut [i32] {
        &mut self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
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

    /// Rows per sub-channel group.
    pub fn group_len(&self) -> usize {
        self.shape[0] / self.scheme.sub_channels()
    }

    /// Sub-channel group containing row i.
    pub fn group_of_row(&self, i: usize) -> usize {
        i / self.group_len()
    }
}

fn require_finite(values: &[f32]) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "input must be finite, got {bad}"
        )));
    }
    Ok(())
}

fn sym_qmax(bits: u8) -> Result<i32> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::InvalidValue(format!(
            "bits must be 2, 4, or 8, got {bits}"
        )));
    }
    Ok((1i32 << (bits - 1)) - 1)
}

/// Symmetric per-channel scale: max|column| / qmax, with qmax = 2^{bits-1}-1.
/// An all-zero column falls back to scale 1.0.
pub fn compute_scale_symmetric(column: &[f32], bits: u8) -> Result<f32> {
    let qmax = sym_qmax(bits)?;
    if column.is_empty() {
        return Err(Error::InvalidShape("empty column".into()));
    }
    require_finite(column)?;
    let max_abs = column.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        Ok(1.0)
    } else {
        Ok(max_abs / qmax as f32)
    }
}

/// Asymmetric range parameters for one group:
/// scale = (max - min) / (2^bits - 1) with fallback 1.0 for a constant group,
/// zero_point = clamp(round(-min/scale), 0, 2^bits - 1).
///
/// `force_zero_representable` asserts that the zero point sits inside the
/// code range so dequantize(zero_point) == 0 exactly; the clamp already
/// guarantees this, the flag makes the contract checked rather than implied.
pub fn compute_asymmetric_params(
    group: &[f32],
    bits: u8,
    force_zero_representable: bool,
) -> Result<(f32, i32)> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::InvalidValue(format!(
            "bits must be 2, 4, or 8, got {bits}"
        )));
    }
    if group.is_empty() {
        return Err(Error::InvalidShape("empty group".into()));
    }
    require_finite(group)?;
    let qmax = (1i32 << bits) - 1;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in group {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi == lo { 1.0 } else { (hi - lo) / qmax as f32 };
    let zero_point = ((-lo / scale).round() as i64).clamp(0, qmax as i64) as i32;
    if force_zero_representable && !(0..=qmax).contains(&zero_point) {
        return Err(Error::InvalidValue(format!(
            "zero_point {zero_point} not representable in {bits} bits"
        )));
    }
    Ok((scale, zero_point))
}

/// Quantize one column at a given scale: q_i = clamp(round(c_i / scale), range).
/// No zero point is applied; asymmetric weight quantization (which adds one)
/// lives in [`quantize_weight`].
pub fn quantize_column(column: &[f32], scale: f32, scheme: &QuantScheme) -> Result<Vec<i32>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidValue(format!(
            "scale must be finite and > 0, got {scale}"
        )));
    }
    require_finite(column)?;
    let (lo, hi) = scheme.code_range();
    Ok(column
        .iter()
        .map(|&c| ((c / scale).round() as i64).clamp(lo as i64, hi as i64) as i32)
        .collect())
}

struct ColumnQuant {
    codes: Vec<i32>,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
}

fn quantize_one_column(col: &[f32], scheme: &QuantScheme) -> ColumnQuant {
    let groups = scheme.sub_channels();
    let group_len = col.len() / groups;
    let (lo, hi) = scheme.code_range();
    let mut codes = Vec::with_capacity(col.len());
    let mut scales = Vec::with_capacity(groups);
    let mut zero_points = Vec::with_capacity(groups);
    for g in 0..groups {
        let slice = &col[g * group_len..(g + 1) * group_len];
        if scheme.is_symmetric() {
            let qmax = hi;
            let max_abs = slice.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = if max_abs == 0.0 {
                1.0
            } else {
                max_abs / qmax as f32
            };
            for &w in slice {
                codes.push(((w / scale).round() as i64).clamp(lo as i64, hi as i64) as i32);
            }
            scales.push(scale);
            zero_points.push(0);
        } else {
            let (mut min_v, mut max_v) = (f32::INFINITY, f32::NEG_INFINITY);
            for &w in slice {
                min_v = min_v.min(w);
                max_v = max_v.max(w);
            }
            let scale = if max_v == min_v {
                1.0
            } else {
                (max_v - min_v) / hi as f32
            };
            let z = ((-min_v / scale).round() as i64).clamp(0, hi as i64) as i32;
            for &w in slice {
                codes.push(
                    ((w / scale).round() as i64 + z as i64).clamp(lo as i64, hi as i64) as i32,
                );
            }
            scales.push(scale);
            zero_points.push(z);
        }
    }
    ColumnQuant {
        codes,
        scales,
        zero_points,
    }
}

/// Quantize a weight matrix per channel (column), each channel split into
/// `scheme.sub_channels` contiguous row groups with dedicated parameters.
pub fn quantize_weight(w: &Tensor, scheme: &QuantScheme) -> Result<QuantizedTensor> {
    if w.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "weight must be rank 2, got rank {}",
            w.rank()
        )));
    }
    let (i_dim, j_dim) = (w.rows(), w.cols());
    let groups = scheme.sub_channels();
    if i_dim % groups != 0 {
        return Err(Error::InvalidShape(format!(
            "rows {i_dim} not divisible by sub_channels {groups}"
        )));
    }
    let data = w.data();
    let per_col = exec::map_indexed(j_dim, |j| {
        let col: Vec<f32> = (0..i_dim).map(|i| data[i * j_dim + j]).collect();
        quantize_one_column(&col, scheme)
    });
    let mut codes = vec![0i32; i_dim * j_dim];
    let mut scales = vec![0f32; groups * j_dim];
    let mut zero_points = vec![0i32; groups * j_dim];
    for (j, cq) in per_col.iter().enumerate() {
        for i in 0..i_dim {
            codes[i * j_dim + j] = cq.codes[i];
        }
        for g in 0..groups {
            scales[g * j_dim + j] = cq.scales[g];
            zero_points[g * j_dim + j] = cq.zero_points[g];
        }
    }
    QuantizedTensor::from_parts(codes, scales, zero_points, *scheme, [i_dim, j_dim])
}

/// Reconstruct W'_{ij} = scale(g(i), j) · (q_{ij} - zero_point(g(i), j)).
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let [i_dim, j_dim] = q.shape();
    let group_len = q.group_len();
    let codes = q.codes();
    let scales = q.scales();
    let zps = q.zero_points();
    let mut out = vec![0f32; i_dim * j_dim];
    exec::for_each_chunk_mut(&mut out, j_dim, |i, row| {
        let g = i / group_len;
        for (j, slot) in row.iter_mut().enumerate() {
            let s = scales[g * j_dim + j];
            let z = zps[g * j_dim + j];
            *slot = s * (codes[i * j_dim + j] - z) as f32;
        }
    });
    Tensor::from_vec(&[i_dim, j_dim], out).expect("dequantized values are finite by construction")
}

fn check_matmul_shapes(x: &Tensor, q: &QuantizedTensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "input must be rank 2, got rank {}",
            x.rank()
        )));
    }
    let (b_dim, i_dim) = (x.rows(), x.cols());
    if i_dim != q.rows() {
        return Err(Error::InvalidShape(format!(
            "input cols {} != weight rows {}",
            i_dim,
            q.rows()
        )));
    }
    Ok((b_dim, i_dim, q.cols()))
}

/// Per-group sums of one input row: sx[g] = Σ_{i∈g} x_i, ascending i.
pub(crate) fn row_group_sums(xrow: &[f32], group_len: usize) -> Vec<f32> {
    xrow.chunks(group_len)
        .map(|c| {
            let mut t = 0.0f32;
            for &x in c {
                t += x;
            }
            t
        })
        .collect()
}

fn ref_matmul_row(xrow: &[f32], q: &QuantizedTensor, out: &mut [f32]) {
    let j_dim = q.cols();
    let group_len = q.group_len();
    let groups = q.scheme().sub_channels();
    let codes = q.codes();
    let scales = q.scales();
    let zps = q.zero_points();
    let sx = row_group_sums(xrow, group_len);
    for (j, slot) in out.iter_mut().enumerate() {
        let mut y = 0.0f32;
        for g in 0..groups {
            let mut acc = 0.0f32;
            let base = g * group_len;
            for (di, &x) in xrow[base..base + group_len].iter().enumerate() {
                acc += x * codes[(base + di) * j_dim + j] as f32;
            }
            let s = scales[g * j_dim + j];
            let z = zps[g * j_dim + j];
            y += s * (acc - z as f32 * sx[g]);
        }
        *slot = y;
    }
}

/// Reference quantized matmul, Y_{bj} = Σ_g s(g,j)·[Σ_{i∈g} X_{bi} q_{ij}
/// − z(g,j)·Σ_{i∈g} X_{bi}], accumulated in ascending i within each group
/// and ascending g. This summation order is the bit-exactness contract the
/// packed kernels are tested against.
pub fn quantized_matmul_ref(x: &Tensor, q: &QuantizedTensor) -> Result<Tensor> {
    let (b_dim, i_dim, j_dim) = check_matmul_shapes(x, q)?;
    let xdata = x.data();
    let mut out = vec![0f32; b_dim * j_dim];
    exec::for_each_chunk_mut(&mut out, j_dim, |b, row| {
        ref_matmul_row(&xdata[b * i_dim..(b + 1) * i_dim], q, row);
    });
    Tensor::from_vec(&[b_dim, j_dim], out)
}

/// Sequential variant of [`quantized_matmul_ref`], bit-identical to it;
/// exists so benches can compare the parallel build against a pinned
/// single-thread baseline.
pub fn quantized_matmul_ref_serial(x: &Tensor, q: &QuantizedTensor) -> Result<Tensor> {
    let (b_dim, i_dim, j_dim) = check_matmul_shapes(x, q)?;
    let xdata = x.data();
    let mut out = vec![0f32; b_dim * j_dim];
    for (b, row) in out.chunks_mut(j_dim).enumerate() {
        ref_matmul_row(&xdata[b * i_dim..(b + 1) * i_dim], q, row);
    }
    Tensor::from_vec(&[b_dim, j_dim], out)
}

/// Max |dequantize(quantize_weight(w)) − w| over all elements.
pub fn max_reconstruction_error(w: &Tensor, scheme: &QuantScheme) -> Result<f32> {
    let q = quantize_weight(w, scheme)?;
    let back = dequantize(&q);
    Ok(w
        .data()
        .iter()
        .zip(back.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
}
