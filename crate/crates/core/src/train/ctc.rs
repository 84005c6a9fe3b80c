//! Connectionist temporal classification: exact loss and gradient by the
//! forward-backward recursion over the blank-augmented label sequence, plus
//! a brute-force alignment enumerator used as a test and self-check oracle.
//!
//! Convention: log_probs is T x C with class C-1 reserved for blank. All
//! internal arithmetic is f64; the loss is returned as f32. Inputs need not
//! be normalized per frame; both the recursion and the enumerator compute
//! -log sum over alignments of exp(sum of per-frame scores), which coincide
//! regardless.

use crate::error::{Error, Result};
use crate::tensor::{Fill, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_inputs(log_probs: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    if log_probs.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "log_probs must be rank 2 (frames x classes), got rank {}",
            log_probs.rank()
        )));
    }
    let t_len = log_probs.rows();
    let c = log_probs.cols();
    if c < 2 {
        return Err(Error::InvalidShape(
            "need at least one real class plus blank".into(),
        ));
    }
    let blank = c - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::InvalidValue(format!(
            "label {bad} is not a real class (blank index is {blank})"
        )));
    }
    Ok((t_len, c, blank))
}

/// Frames needed to emit `labels`: one per token plus a mandatory blank
/// between adjacent repeats.
fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC loss and its exact gradient w.r.t. the log probabilities.
///
/// An alignment-infeasible instance (too few frames for the label sequence)
/// yields loss +inf with an all-zero gradient rather than an error, so a
/// training loop can skip it gracefully.
pub fn ctc_loss(log_probs: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (t_len, c, blank) = check_inputs(log_probs, labels)?;
    if t_len < min_frames(labels) {
        return Ok((
            f32::INFINITY,
            Tensor::new(log_probs.shape(), Fill::Zeros)?,
        ));
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * c + k] as f64;
    let s_len = 2 * labels.len() + 1;
    let lab = |s: usize| if s % 2 == 0 { blank } else { labels[s / 2] };

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, lab(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && lab(s) != blank && lab(s) != lab(s - 2) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, lab(s));
        }
    }

    // beta mirrors alpha and includes the emission at its own frame, so
    // alpha + beta - lp counts each path's score exactly once.
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = lp(t_len - 1, lab(s_len - 1));
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = lp(t_len - 1, lab(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && lab(s + 2) != blank && lab(s + 2) != lab(s) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, lab(s));
        }
    }

    let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    }

    let mut grad = vec![0f32; t_len * c];
    let mut occ = vec![NEG_INF; c];
    for t in 0..t_len {
        occ.fill(NEG_INF);
        for s in 0..s_len {
            let k = lab(s);
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, k);
            occ[k] = log_add(occ[k], v);
        }
        for k in 0..c {
            if occ[k] != NEG_INF {
                grad[t * c + k] = -((occ[k] - log_p).exp() as f32);
            }
        }
    }
    Ok((-log_p as f32, Tensor::from_vec(log_probs.shape(), grad)?))
}

/// Collapse a frame-level path: merge consecutive repeats, then drop blanks.
fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != blank {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Brute-force CTC reference: -log of the summed score over every one of
/// the C^T frame paths that collapses to `labels`. Exponential in T; callers
/// keep T and C tiny.
pub(crate) fn enumerate_loss_f64(lp: &[f64], t_len: usize, c: usize, labels: &[usize]) -> f64 {
    let blank = c - 1;
    let mut total = NEG_INF;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path, blank) == labels {
            let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * c + k]).sum();
            total = log_add(total, score);
        }
        // Odometer increment over base-C digits.
        let mut pos = 0;
        loop {
            if pos == t_len {
                return -total;
            }
            path[pos] += 1;
            if path[pos] < c {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// [`enumerate_loss_f64`] wrapped for Tensor inputs, with the same
/// preconditions as [`ctc_loss`].
pub fn ctc_loss_by_enumeration(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (t_len, c, _) = check_inputs(log_probs, labels)?;
    let lp: Vec<f64> = log_probs.data().iter().map(|&v| v as f64).collect();
    Ok(enumerate_loss_f64(&lp, t_len, c, labels))
}

/// Per-frame argmax (ties to the lowest class index), collapse repeats,
/// drop blanks.
pub fn greedy_ctc_decode(log_probs: &Tensor) -> Vec<usize> {
    let c = log_probs.cols();
    let path: Vec<usize> = log_probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, c - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SplitMix64;

    fn lp_tensor(t: usize, c: usize, vals: &[f32]) -> Tensor {
        Tensor::from_vec(&[t, c], vals.to_vec()).unwrap()
    }

    fn random_log_probs(rng: &mut SplitMix64, t: usize, c: usize) -> Tensor {
        Tensor::new(
            &[t, c],
            Fill::SeededUniform {
                seed: rng.next_u64(),
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        // p(a) = p(blank) = 0.5; only alignment is "a".
        let half = 0.5f32.ln();
        let lp = lp_tensor(1, 2, &[half, half]);
        let (loss, grad) = ctc_loss(&lp, &[0]).unwrap();
        assert!((loss - (-half)).abs() < 1e-6);
        // d(-lp(a))/dlp(a) = -1, blank unused.
        assert!((grad.data()[0] + 1.0).abs() < 1e-6);
        assert_eq!(grad.data()[1], 0.0);
    }

    #[test]
    fn empty_labels_sum_blank_scores() {
        let lp = lp_tensor(3, 3, &[-0.1, -0.2, -0.3, -0.4, -0.5, -0.6, -0.7, -0.8, -0.9]);
        let (loss, grad) = ctc_loss(&lp, &[]).unwrap();
        assert!((loss - (0.3 + 0.6 + 0.9)).abs() < 1e-6);
        // Every frame must emit blank: gradient -1 there, 0 elsewhere.
        for t in 0..3 {
            assert!((grad.data()[t * 3 + 2] + 1.0).abs() < 1e-6);
            assert_eq!(grad.data()[t * 3], 0.0);
        }
    }

    #[test]
    fn two_frames_three_alignments() {
        // Uniform over {a, blank}: alignments a.blank, blank.a, a.a.
        let q = 0.25f32.ln() / 2.0; // each frame log prob = ln 0.5
        let lp = lp_tensor(2, 2, &[q, q, q, q]);
        let (loss, _) = ctc_loss(&lp, &[0]).unwrap();
        assert!((loss - (-(3.0f32 * 0.25).ln())).abs() < 1e-6);
    }

    #[test]
    fn infeasible_returns_infinite_loss_and_zero_grad() {
        let lp = lp_tensor(2, 2, &[-1.0, -1.0, -1.0, -1.0]);
        let (loss, grad) = ctc_loss(&lp, &[0, 0]).unwrap();
        assert!(loss.is_infinite() && loss > 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        // One more frame makes a.blank.a feasible.
        let lp = lp_tensor(3, 2, &[-1.0; 6]);
        let (loss, _) = ctc_loss(&lp, &[0, 0]).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn blank_in_labels_rejected() {
        let lp = lp_tensor(2, 3, &[-1.0; 6]);
        assert!(matches!(
            ctc_loss(&lp, &[2]),
            Err(Error::InvalidValue(_))
        ));
        assert!(matches!(
            ctc_loss(&lp, &[5]),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn matches_enumeration_exhaustively_over_small_instances() {
        // Every (T <= 6, V <= 3, |labels| <= 3) instance with random scores.
        let mut rng = SplitMix64::new(0xC7C);
        let mut checked = 0usize;
        for v in 1..=3usize {
            let c = v + 1;
            let mut labels_sets: Vec<Vec<usize>> = vec![vec![]];
            for len in 1..=3usize {
                let mut idx = vec![0usize; len];
                loop {
                    labels_sets.push(idx.clone());
                    let mut pos = 0;
                    loop {
                        if pos == len {
                            break;
                        }
                        idx[pos] += 1;
                        if idx[pos] < v {
                            break;
                        }
                        idx[pos] = 0;
                        pos += 1;
                    }
                    if pos == len {
                        break;
                    }
                }
            }
            for labels in &labels_sets {
                for t in 1..=6usize {
                    let lp = random_log_probs(&mut rng, t, c);
                    let (loss, _) = ctc_loss(&lp, labels).unwrap();
                    let oracle = ctc_loss_by_enumeration(&lp, labels).unwrap();
                    if t < min_frames(labels) {
                        assert!(loss.is_infinite() && oracle.is_infinite());
                    } else {
                        assert!(
                            (loss as f64 - oracle).abs() <= 1e-6,
                            "T={t} V={v} labels={labels:?}: {loss} vs {oracle}"
                        );
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn gradient_matches_finite_differences_of_enumeration() {
        let mut rng = SplitMix64::new(0xFD);
        for _ in 0..20 {
            let t = 1 + rng.next_range(4);
            let v = 1 + rng.next_range(3);
            let c = v + 1;
            let mut labels = Vec::new();
            for _ in 0..rng.next_range(3) {
                labels.push(rng.next_range(v));
            }
            if t < min_frames(&labels) {
                continue;
            }
            let lp = random_log_probs(&mut rng, t, c);
            let (_, grad) = ctc_loss(&lp, &labels).unwrap();
            let base: Vec<f64> = lp.data().iter().map(|&x| x as f64).collect();
            let eps = 1e-3f64;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let fd = (enumerate_loss_f64(&plus, t, c, &labels)
                    - enumerate_loss_f64(&minus, t, c, &labels))
                    / (2.0 * eps);
                let an = grad.data()[i] as f64;
                assert!(
                    (an - fd).abs() <= 1e-3 * fd.abs().max(1e-2),
                    "coord {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_rows_sum_to_minus_one_when_feasible() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let t = 2 + rng.next_range(4);
            let lp = random_log_probs(&mut rng, t, 4);
            let labels = vec![rng.next_range(3)];
            let (_, grad) = ctc_loss(&lp, &labels).unwrap();
            for row in grad.data().chunks(4) {
                let s: f32 = row.iter().sum();
                assert!((s + 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn greedy_decode_collapses_and_strips_blanks() {
        // blank = 2. argmax path: a, a, blank, b.
        let lp = lp_tensor(
            4,
            3,
            &[
                0.9, 0.0, 0.1, //
                0.8, 0.1, 0.1, //
                0.1, 0.2, 0.9, //
                0.0, 0.9, 0.1,
            ],
        );
        assert_eq!(greedy_ctc_decode(&lp), vec![0, 1]);

        let all_blank = lp_tensor(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(greedy_ctc_decode(&all_blank), Vec::<usize>::new());

        // a, blank, a survives as two tokens.
        let aba = lp_tensor(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(greedy_ctc_decode(&aba), vec![0, 0]);
    }
}
