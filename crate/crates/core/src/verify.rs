//! Randomized self-check: drives the mask -> prune -> quantize -> pack
//! pipeline end to end on small random instances and cross-checks every
//! stage against its reference (bitstream roundtrips, the reference matmul,
//! and brute-force CTC enumeration). Used by the CLI `verify` subcommand.

use crate::compress::zero_masked_codes;
use crate::error::Result;
use crate::exec;
use crate::packed::{from_entries, pack, packed_matmul, packed_matmul_serial, to_entries, unpack};
use crate::quant::{quantize_weight, quantized_matmul_ref, QuantScheme};
use crate::sparse::{make_mask, prune, SparsityPattern};
use crate::tensor::{Fill, SplitMix64, Tensor};
use crate::train::ctc::{ctc_loss, ctc_loss_by_enumeration};

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub cases: usize,
    /// Human-readable counterexamples, one per failed check.
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Run `cases` independent random checks. `inject_fault` corrupts one bit
/// of case 0's serialized weight payload, which the checks must catch; it
/// exists to prove the harness can fail.
pub fn run(cases: usize, seed: u64, inject_fault: bool) -> VerifyReport {
    let per_case: Vec<Vec<String>> = exec::map_indexed(cases, |i| {
        match check_case(i, seed.wrapping_add(i as u64), inject_fault && i == 0) {
            Ok(fails) => fails,
            Err(e) => vec![format!("case {i}: pipeline error: {e}")],
        }
    });
    VerifyReport {
        cases,
        failures: per_case.into_iter().flatten().collect(),
    }
}

fn check_case(i: usize, case_seed: u64, fault: bool) -> Result<Vec<String>> {
    let mut fails = Vec::new();
    let mut rng = SplitMix64::new(case_seed);

    let sc = [1usize, 2, 4][(rng.next_u64() % 3) as usize];
    let group_rows = 1 + (rng.next_u64() % 3) as usize;
    let i_dim = sc * group_rows;
    let j_dim = 4 * (1 + (rng.next_u64() % 2) as usize);
    let b_dim = 1 + (rng.next_u64() % 3) as usize;
    let scheme = match rng.next_u64() % 4 {
        0 => QuantScheme::symmetric(8, sc)?,
        1 => QuantScheme::symmetric(4, sc)?,
        2 => QuantScheme::asymmetric(2, sc)?,
        _ => QuantScheme::asymmetric(4, sc)?,
    };
    let pattern = match rng.next_u64() % 3 {
        0 => None,
        1 => Some(SparsityPattern::new(2, 4)?),
        _ => Some(SparsityPattern::new(1, 4)?),
    };

    let w = Tensor::new(
        &[i_dim, j_dim],
        Fill::SeededUniform {
            seed: rng.next_u64(),
            lo: -1.0,
            hi: 1.0,
        },
    )?;
    let mask = match pattern {
        Some(p) => Some(make_mask(&w, p)?),
        None => None,
    };
    let pruned = match &mask {
        Some(m) => prune(&w, m)?,
        None => w.clone(),
    };
    let mut q = quantize_weight(&pruned, &scheme)?;
    if let Some(m) = &mask {
        zero_masked_codes(&mut q, m);
    }
    let packed = pack(&q, mask.as_ref())?;

    // Bitstream roundtrip reproduces codes, metadata, and mask exactly.
    let (q2, mask2) = unpack(&packed)?;
    if q2.codes() != q.codes()
        || !same_f32s(q2.scales(), q.scales())
        || q2.zero_points() != q.zero_points()
        || q2.scheme() != &scheme
        || q2.shape() != q.shape()
    {
        fails.push(format!("case {i}: unpack disagrees with packed codes"));
    }
    if mask2 != mask {
        fails.push(format!("case {i}: unpack disagrees with the mask"));
    }

    // Checkpoint-entry roundtrip reproduces the packed weight byte for byte.
    let (mut payload, mask_entry) = to_entries(&packed, "w");
    if fault {
        payload.bytes[0] ^= 1;
    }
    let decoded = from_entries(&payload, mask_entry.as_ref().map(|(_, p)| p));
    let active = match decoded {
        Ok(p2) => {
            if p2.value_bytes() != packed.value_bytes()
                || p2.index_bytes() != packed.index_bytes()
                || !same_f32s(p2.scales(), packed.scales())
                || p2.zero_points() != packed.zero_points()
                || p2.scheme() != packed.scheme()
                || p2.pattern() != packed.pattern()
                || p2.shape() != packed.shape()
            {
                fails.push(format!("case {i}: entry roundtrip changed the payload"));
            }
            p2
        }
        Err(e) => {
            fails.push(format!("case {i}: entry decode failed: {e}"));
            packed
        }
    };

    // Packed kernels match the unpacked reference bitwise, both backends.
    let x = Tensor::new(
        &[b_dim, i_dim],
        Fill::SeededUniform {
            seed: rng.next_u64(),
            lo: -1.0,
            hi: 1.0,
        },
    )?;
    let y_ref = quantized_matmul_ref(&x, &q)?;
    let y_packed = packed_matmul(&x, &active)?;
    let y_serial = packed_matmul_serial(&x, &active)?;
    if !same_f32s(y_packed.data(), y_ref.data()) {
        fails.push(format!("case {i}: packed matmul differs from reference"));
    }
    if !same_f32s(y_serial.data(), y_packed.data()) {
        fails.push(format!("case {i}: serial backend differs from parallel"));
    }

    // CTC forward matches brute-force path enumeration.
    let t_len = 1 + (rng.next_u64() % 5) as usize;
    let vocab = 1 + (rng.next_u64() % 3) as usize;
    let n_labels = (rng.next_u64() % 3) as usize;
    let labels: Vec<usize> = (0..n_labels)
        .map(|_| (rng.next_u64() % vocab as u64) as usize)
        .collect();
    let lp = Tensor::new(
        &[t_len, vocab + 1],
        Fill::SeededUniform {
            seed: rng.next_u64(),
            lo: -3.0,
            hi: 0.0,
        },
    )?;
    let (loss, _) = ctc_loss(&lp, &labels)?;
    let brute = ctc_loss_by_enumeration(&lp, &labels)? as f32;
    let agree = if loss.is_finite() || brute.is_finite() {
        (loss - brute).abs() <= 1e-6 * brute.abs().max(1.0)
    } else {
        true
    };
    if !agree {
        fails.push(format!(
            "case {i}: ctc loss {loss} differs from enumeration {brute}"
        ));
    }

    Ok(fails)
}

fn same_f32s(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_has_no_failures() {
        let report = run(200, 11, false);
        assert_eq!(report.cases, 200);
        assert!(report.passed(), "failures: {:?}", report.failures);
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = run(8, 11, true);
        assert!(!report.passed());
        assert!(
            report.failures.iter().all(|f| f.starts_with("case 0:")),
            "fault must be localized to case 0: {:?}",
            report.failures
        );
    }

    #[test]
    fn reports_are_deterministic_for_a_seed() {
        let a = run(50, 7, false);
        let b = run(50, 7, false);
        assert_eq!(a.failures, b.failures);
        assert_eq!(a.cases, b.cases);
    }
}
