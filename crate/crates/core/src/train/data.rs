//! Planted synthetic sequence task: each utterance is a sequence of token
//! prototype vectors (noisy, each repeated a random number of frames)
//! separated by near-silent gap frames, labeled with the token sequence.
//! Gaps give the model room to emit blanks between repeated tokens, so
//! every label sequence is greedy-decodable.
//!
//! The prototypes deliberately live in a narrow cone: telling tokens apart
//! needs fine directional resolution in the first layer, while telling
//! tokens from gaps only needs magnitude. That makes the task sensitive to
//! weight precision without making it unlearnable.

use crate::error::Result;
use crate::tensor::{SplitMix64, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub frames: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub input_dim: usize,
    /// Real tokens; the model's class count is vocab + 1 (blank).
    pub vocab: usize,
}

pub const DEFAULT_INPUT_DIM: usize = 16;
pub const DEFAULT_VOCAB: usize = 6;
const NOISE: f32 = 0.2;
/// Half-width of the prototype cone relative to its axis.
const CONE: f32 = 0.7;

fn unit_vector(rng: &mut SplitMix64, d: usize) -> Vec<f32> {
    let mut col: Vec<f32> = (0..d).map(|_| rng.next_f32(-1.0, 1.0)).collect();
    let norm = col.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    for x in col.iter_mut() {
        *x /= norm;
    }
    col
}

/// Unit prototypes of the form normalize(axis + CONE * delta): mutually
/// close directions whose differences carry the token identity.
fn cone_columns(rng: &mut SplitMix64, d: usize, v: usize) -> Vec<Vec<f32>> {
    let axis = unit_vector(rng, d);
    (0..v)
        .map(|_| {
            let delta = unit_vector(rng, d);
            let mut col: Vec<f32> = axis
                .iter()
                .zip(&delta)
                .map(|(a, dv)| a + CONE * dv)
                .collect();
            let norm = col.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            for x in col.iter_mut() {
                *x /= norm;
            }
            col
        })
        .collect()
}

fn utterance(rng: &mut SplitMix64, protos: &[Vec<f32>], d: usize) -> Result<Utterance> {
    let v = protos.len();
    let len = 3 + rng.next_range(4);
    let labels: Vec<usize> = (0..len).map(|_| rng.next_range(v)).collect();
    let mut rows: Vec<f32> = Vec::new();
    let mut t = 0usize;
    let push_frame = |proto: Option<&[f32]>, rng: &mut SplitMix64, rows: &mut Vec<f32>| {
        for i in 0..d {
            let signal = proto.map_or(0.0, |p| p[i]);
            rows.push(signal + rng.next_f32(-NOISE, NOISE));
        }
    };
    // Leading gap, then token bursts separated by gaps.
    push_frame(None, rng, &mut rows);
    t += 1;
    for &label in &labels {
        let reps = 1 + rng.next_range(3);
        for _ in 0..reps {
            push_frame(Some(&protos[label]), rng, &mut rows);
            t += 1;
        }
        let gap = 1 + rng.next_range(2);
        for _ in 0..gap {
            push_frame(None, rng, &mut rows);
            t += 1;
        }
    }
    Ok(Utterance {
        frames: Tensor::from_vec(&[t, d], rows)?,
        labels,
    })
}

/// Deterministic task for a given seed. Token prototypes are unit-norm
/// directions inside a common cone; every frame carries uniform noise.
pub fn generate(seed: u64, train_n: usize, eval_n: usize) -> Result<SyntheticTask> {
    let d = DEFAULT_INPUT_DIM;
    let v = DEFAULT_VOCAB;
    let mut rng = SplitMix64::new(seed);
    let protos = cone_columns(&mut rng, d, v);
    let mut train = Vec::with_capacity(train_n);
    for _ in 0..train_n {
        train.push(utterance(&mut rng, &protos, d)?);
    }
    let mut eval = Vec::with_capacity(eval_n);
    for _ in 0..eval_n {
        eval.push(utterance(&mut rng, &protos, d)?);
    }
    Ok(SyntheticTask {
        train,
        eval,
        input_dim: d,
        vocab: v,
    })
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level token error rate: total edit distance over total reference
/// length.
pub fn token_error_rate(pairs: &[(Vec<usize>, &[usize])]) -> f64 {
    let edits: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
    let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if total == 0 {
        0.0
    } else {
        edits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(7, 4, 2).unwrap();
        let b = generate(7, 4, 2).unwrap();
        assert_eq!(a, b);
        let c = generate(8, 4, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn utterances_are_ctc_feasible_and_in_range() {
        let task = generate(42, 32, 8).unwrap();
        for utt in task.train.iter().chain(&task.eval) {
            assert_eq!(utt.frames.cols(), task.input_dim);
            assert!(utt.labels.iter().all(|&l| l < task.vocab));
            let repeats = utt.labels.windows(2).filter(|w| w[0] == w[1]).count();
            assert!(utt.frames.rows() >= utt.labels.len() + repeats);
            assert!((3..=6).contains(&utt.labels.len()));
        }
    }

    #[test]
    fn edit_distance_classics() {
        assert_eq!(edit_distance(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
        assert_eq!(edit_distance(&[0, 1, 2, 3], &[0, 9, 2, 3]), 1);
    }

    #[test]
    fn token_error_rate_pools_over_the_corpus() {
        let refs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![5, 6]];
        let pairs: Vec<(Vec<usize>, &[usize])> = vec![
            (vec![1, 2, 3, 4], &refs[0]),
            (vec![5], &refs[1]),
        ];
        assert!((token_error_rate(&pairs) - 1.0 / 6.0).abs() < 1e-12);
    }
}
