//! Dense f32 tensors and the deterministic PRNG used everywhere seeds appear.
//!
//! Tensors are row-major, immutable-shape, and hold only finite values:
//! every public constructor rejects NaN and infinity so downstream kernels
//! never have to re-check.

use crate::error::{Error, Result};

/// splitmix64 (Steele, Lea, Flood 2014).
///
/// State update: `state = state + 0x9E37_79B9_7F4A_7C15 (mod 2^64)`.
/// Output mix:
/// `z = state; z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9;
///  z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB; return z ^ (z >> 31)`.
///
/// Every seed is valid, including 0. The stream for a given seed is part of
/// this crate's compatibility surface: tests freeze values drawn from it,
/// and any other implementation of the equations above reproduces it.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> SplitMix64 {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[lo, hi]`: the top 24 bits of `next_u64` scaled by
    /// 2^-24 give u in [0, 1), mapped as `lo + u * (hi - lo)`. Endpoints can
    /// be reached through rounding.
    pub fn next_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32;
        lo + u * (hi - lo)
    }

    /// Uniform draw in `0..n`. Modulo bias is negligible for the small `n`
    /// used here (n << 2^64).
    pub fn next_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_range requires n > 0");
        (self.next_u64() % n as u64) as usize
    }
}

/// Fill rule for [`Tensor::new`].
#[derive(Debug, Clone, Copy)]
pub enum Fill {
    Zeros,
    Ones,
    /// Elementwise uniform draws from a fresh `SplitMix64::new(seed)` stream
    /// in row-major order, so a (shape, seed, lo, hi) quadruple names one
    /// exact tensor on every platform.
    SeededUniform { seed: u64, lo: f32, hi: f32 },
}

/// Row-major dense f32 tensor. Shape is fixed at construction; all values
/// are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("rank must be at least 1".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape("dimensions must be nonzero".into()));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidShape("element count overflows usize".into()))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: &[usize], fill: Fill) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Ones => vec![1.0; n],
            Fill::SeededUniform { seed, lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(Error::InvalidValue(format!(
                        "uniform bounds must be finite with lo <= hi, got [{lo}, {hi}]"
                    )));
                }
                let mut rng = SplitMix64::new(seed);
                (0..n).map(|_| rng.next_f32(lo, hi)).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if data.len() != n {
            return Err(Error::InvalidShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "tensor values must be finite, got {bad}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Element (r, c) of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Consumes the tensor, returning its row-major values.
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}
