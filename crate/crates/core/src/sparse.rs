//! N:M structured sparsity: mask generation over groups of m consecutive
//! weights, pruning, and the one-shot/few-shot mask schedule.
//!
//! Groups are taken over the row-major flattening of the weight, so "m
//! consecutive weights" means m adjacent elements of the flat array. Within
//! each group the n largest-magnitude elements survive; ties keep the lower
//! flat index so masks are reproducible bit-for-bit.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    m: usize,
}

impl SparsityPattern {
    pub fn new(n: usize, m: usize) -> Result<SparsityPattern> {
        if n < 1 || m < 2 || n > m {
            return Err(Error::InvalidConfig(format!(
                "pattern requires 1 <= n <= m and m >= 2, got {n}:{m}"
            )));
        }
        Ok(SparsityPattern { n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn density(&self) -> f64 {
        self.n as f64 / self.m as f64
    }
}

/// Binary keep-mask with the same element count as the weight it masks.
/// Every group of `pattern.m` consecutive elements has exactly `pattern.n`
/// ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    bits: Vec<u8>,
    shape: Vec<usize>,
    pattern: SparsityPattern,
}

impl SparsityMask {
    pub fn from_parts(
        bits: Vec<u8>,
        shape: &[usize],
        pattern: SparsityPattern,
    ) -> Result<SparsityMask> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape("mask shape must be nonempty".into()));
        }
        if bits.len() != count {
            return Err(Error::InvalidShape(format!(
                "mask has {} bits, shape {:?} needs {}",
                bits.len(),
                shape,
                count
            )));
        }
        if count % pattern.m() != 0 {
            return Err(Error::InvalidShape(format!(
                "element count {count} not divisible by m={}",
                pattern.m()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidValue("mask bits must be 0 or 1".into()));
        }
        for (k, group) in bits.chunks(pattern.m()).enumerate() {
            let ones = group.iter().map(|&b| b as usize).sum::<usize>();
            if ones != pattern.n() {
                return Err(Error::InvalidValue(format!(
                    "group {k} has {ones} ones, pattern {}:{} requires exactly {}",
                    pattern.n(),
                    pattern.m(),
                    pattern.n()
                )));
            }
        }
        Ok(SparsityMask {
            bits,
            shape: shape.to_vec(),
            pattern,
        })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn kept(&self, flat: usize) -> bool {
        self.bits[flat] == 1
    }

    pub fn num_groups(&self) -> usize {
        self.bits.len() / self.pattern.m()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Row-major bitmap, one bit per element, LSB-first within each byte,
    /// zero-padded to a byte boundary. This is the checkpoint `bitmask`
    /// payload layout.
    pub fn to_bitmap_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= b << (i % 8);
        }
        out
    }

    /// Inverse of [`to_bitmap_bytes`] when the pattern is known.
    pub fn from_bitmap_bytes(
        bytes: &[u8],
        shape: &[usize],
        pattern: SparsityPattern,
    ) -> Result<SparsityMask> {
        let count: usize = shape.iter().product();
        if bytes.len() != count.div_ceil(8) {
            return Err(Error::Format(format!(
                "bitmap is {} bytes, shape {:?} needs {}",
                bytes.len(),
                shape,
                count.div_ceil(8)
            )));
        }
        let bits: Vec<u8> = (0..count).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        for i in count..bytes.len() * 8 {
            if (bytes[i / 8] >> (i % 8)) & 1 != 0 {
                return Err(Error::Format("nonzero padding bit in bitmap".into()));
            }
        }
        SparsityMask::from_parts(bits, shape, pattern).map_err(|e| match e {
            Error::InvalidValue(m) | Error::InvalidShape(m) => Error::Format(m),
            other => other,
        })
    }

    /// Recover the pattern from a bitmap by popcounting groups of `m`;
    /// every group must agree. Used when loading containers, which store
    /// the mask but not (n, m).
    pub fn from_bitmap_infer(bytes: &[u8], shape: &[usize], m: usize) -> Result<SparsityMask> {
        let count: usize = shape.iter().product();
        if m < 2 || count % m != 0 {
            return Err(Error::Format(format!(
                "cannot infer pattern: count {count} vs m {m}"
            )));
        }
        if bytes.len() != count.div_ceil(8) {
            return Err(Error::Format("bitmap length mismatch".into()));
        }
        let bit = |i: usize| (bytes[i / 8] >> (i % 8)) & 1;
        let n = (0..m).map(|i| bit(i) as usize).sum::<usize>();
        if n == 0 {
            return Err(Error::Format("mask group with zero survivors".into()));
        }
        let pattern = SparsityPattern::new(n, m).map_err(|_| {
            Error::Format(format!("inferred pattern {n}:{m} is not valid"))
        })?;
        SparsityMask::from_bitmap_bytes(bytes, shape, pattern)
    }
}

/// Flat view of a tensor as K groups of m consecutive elements.
pub struct GroupedView<'a> {
    data: &'a [f32],
    m: usize,
}

impl<'a> GroupedView<'a> {
    pub fn num_groups(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn group(&self, k: usize) -> &'a [f32] {
        &self.data[k * self.m..(k + 1) * self.m]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f32]> {
        self.data.chunks(self.m)
    }
}

/// View W's row-major flattening as K×m groups of consecutive weights.
pub fn reshape_groups(w: &Tensor, m: usize) -> Result<GroupedView<'_>> {
    if m == 0 {
        return Err(Error::InvalidShape("group size m must be >= 1".into()));
    }
    if w.len() % m != 0 {
        return Err(Error::InvalidShape(format!(
            "element count {} not divisible by m={}",
            w.len(),
            m
        )));
    }
    Ok(GroupedView { data: w.data(), m })
}

/// Keep the n largest-magnitude elements of every group of m consecutive
/// weights; ties keep the lower flat index. Exactly n ones per group.
pub fn make_mask(w: &Tensor, pattern: SparsityPattern) -> Result<SparsityMask> {
    if w.len() % pattern.m() != 0 {
        return Err(Error::InvalidShape(format!(
            "element count {} not divisible by m={}",
            w.len(),
            pattern.m()
        )));
    }
    let data = w.data();
    let m = pattern.m();
    let n = pattern.n();
    let mut bits = vec![0u8; w.len()];
    exec::for_each_chunk_mut(&mut bits, m, |k, mask_group| {
        let group = &data[k * m..(k + 1) * m];
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            group[b]
                .abs()
                .partial_cmp(&group[a].abs())
                .expect("tensor values are finite")
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(n) {
            mask_group[idx] = 1;
        }
    });
    SparsityMask::from_parts(bits, w.shape(), pattern)
}

/// Elementwise keep: kept positions copy W bit-for-bit, pruned positions
/// become literal +0.0 (assignment, not multiplication, so no -0.0 appears).
pub fn prune(w: &Tensor, mask: &SparsityMask) -> Result<Tensor> {
    if w.shape() != mask.shape() {
        return Err(Error::InvalidShape(format!(
            "weight shape {:?} != mask shape {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    let data: Vec<f32> = w
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
        .collect();
    Tensor::from_vec(w.shape(), data)
}

/// Mask schedule: mutable while `current_step < total_prune_steps`, frozen
/// afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneSchedule {
    total_prune_steps: usize,
    current_step: usize,
}

impl PruneSchedule {
    pub fn new(total_prune_steps: usize) -> Result<PruneSchedule> {
        if total_prune_steps == 0 {
            return Err(Error::InvalidConfig(
                "total_prune_steps must be >= 1".into(),
            ));
        }
        Ok(PruneSchedule {
            total_prune_steps,
            current_step: 0,
        })
    }

    pub fn total_prune_steps(&self) -> usize {
        self.total_prune_steps
    }

    pub fn current_step(&self) -> usize {
        self.current_step
    }

    pub fn frozen(&self) -> bool {
        self.current_step >= self.total_prune_steps
    }
}

/// One schedule tick. While unfrozen, recompute the mask from the current
/// dense-valued weights and advance; once frozen, return the existing mask
/// unchanged.
pub fn schedule_step(
    sched: &mut PruneSchedule,
    w: &Tensor,
    pattern: SparsityPattern,
    existing: Option<&SparsityMask>,
) -> Result<SparsityMask> {
    if sched.frozen() {
        let mask = existing.ok_or_else(|| {
            Error::InvalidState("schedule frozen but no existing mask supplied".into())
        })?;
        if mask.shape() != w.shape() {
            return Err(Error::InvalidState(format!(
                "frozen mask shape {:?} != weight shape {:?}",
                mask.shape(),
                w.shape()
            )));
        }
        return Ok(mask.clone());
    }
    let mask = make_mask(w, pattern)?;
    sched.current_step += 1;
    Ok(mask)
}
