//! Joint sparsity- and quantization-aware training: per step, update or
//! reuse the per-layer masks, prune and quantize inside the forward, take
//! the CTC loss, backpropagate with the straight-through estimator, and
//! apply a masked Adam update. Deterministic for a fixed seed.

pub mod adam;
pub mod ctc;
pub mod data;
pub mod graph;

use crate::error::{Error, Result};
use crate::exec;
use crate::quant::QuantScheme;
use crate::sparse::{prune, schedule_step, PruneSchedule, SparsityMask, SparsityPattern};
use crate::tensor::Tensor;
use adam::{adam_step, lr_at, AdamConfig, AdamState};
use data::SyntheticTask;
use graph::{build_effective, build_graph, forward_with, init_params, Graph, ModelSpec};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub scheme: Option<QuantScheme>,
    pub pattern: Option<SparsityPattern>,
    /// Mask-update steps T_p; the mask freezes afterwards. Meaningful only
    /// with a pattern.
    pub prune_steps: usize,
    /// Weights whose names match are pruned/quantized; the rest stay dense.
    pub include: String,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            scheme: None,
            pattern: None,
            prune_steps: 1,
            include: "*linear*".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub compression: CompressionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            seed: 0,
            adam: AdamConfig::default(),
            compression: CompressionConfig::default(),
        }
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub masks_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub params: BTreeMap<String, Tensor>,
    pub masks: BTreeMap<String, SparsityMask>,
    pub schedules: BTreeMap<String, PruneSchedule>,
    pub adam: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub final_loss: f32,
    /// Greedy-decode token error rate on the held-out split, evaluated with
    /// the compressed (training-time) forward.
    pub token_error: f64,
}

/// Abort carrying the last state whose step completed with finite numbers.
#[derive(Debug)]
pub struct DivergenceError {
    pub step: usize,
    pub last_state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Debug)]
pub enum TrainError {
    Diverged(Box<DivergenceError>),
    Other(Error),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Other(e)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged(d) => Error::Divergence { step: d.step },
            TrainError::Other(e) => e,
        }
    }
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Diverged(d) => write!(f, "training diverged at step {}", d.step),
            TrainError::Other(e) => e.fmt(f),
        }
    }
}

fn eligible_weights(graph: &Graph, include: &str) -> Vec<String> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| match n {
            graph::Node::Linear { weight, .. } if crate::compress::glob_match(include, weight) => {
                Some(weight.clone())
            }
            _ => None,
        })
        .collect()
}

fn validate(task: &SyntheticTask, spec: &ModelSpec, config: &TrainConfig) -> Result<()> {
    if config.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let c = &config.compression;
    if c.pattern.is_some() {
        if c.prune_steps == 0 {
            return Err(Error::InvalidConfig("prune_steps must be >= 1".into()));
        }
        if config.steps < c.prune_steps {
            return Err(Error::InvalidConfig(format!(
                "steps {} < prune_steps {}",
                config.steps, c.prune_steps
            )));
        }
    }
    if spec.classes != task.vocab + 1 {
        return Err(Error::InvalidConfig(format!(
            "model classes {} must be task vocab {} plus blank",
            spec.classes, task.vocab
        )));
    }
    if spec.input_dim != task.input_dim {
        return Err(Error::InvalidConfig(format!(
            "model input_dim {} != task input_dim {}",
            spec.input_dim, task.input_dim
        )));
    }
    if task.train.is_empty() || task.eval.is_empty() {
        return Err(Error::InvalidConfig("task needs train and eval data".into()));
    }
    for utt in task.train.iter().chain(&task.eval) {
        if utt.labels.iter().any(|&l| l >= task.vocab) {
            return Err(Error::InvalidValue("label out of vocabulary".into()));
        }
    }
    Ok(())
}

/// Run the joint compression-aware training loop for `config.steps` steps
/// and evaluate greedy-decode token error on the held-out split.
pub fn train(
    task: &SyntheticTask,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> std::result::Result<TrainRun, TrainError> {
    validate(task, spec, config)?;
    let graph = build_graph(spec);
    let comp = &config.compression;
    let mut params = init_params(spec, config.seed)?;
    let mut masks: BTreeMap<String, SparsityMask> = BTreeMap::new();
    let mut schedules: BTreeMap<String, PruneSchedule> = BTreeMap::new();
    if let Some(_pattern) = comp.pattern {
        for name in eligible_weights(&graph, &comp.include) {
            schedules.insert(name, PruneSchedule::new(comp.prune_steps)?);
        }
    }
    let mut adam_state = AdamState::new();
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(config.steps);
    let mut last_good = TrainState {
        step: 0,
        params: params.clone(),
        masks: masks.clone(),
        schedules: schedules.clone(),
        adam: adam_state.clone(),
    };

    for t in 1..=config.steps {
        let diverged = |metrics: &[StepMetrics], last_good: &TrainState| {
            TrainError::Diverged(Box::new(DivergenceError {
                step: t,
                last_state: last_good.clone(),
                metrics: metrics.to_vec(),
            }))
        };
        // Mask phase: recompute per layer until each schedule freezes, then
        // pin the raw weights to the mask so pruned slots are literal zeros.
        if let Some(pattern) = comp.pattern {
            for (name, sched) in schedules.iter_mut() {
                let w = params.get(name).expect("schedule tracks a parameter");
                let mask = schedule_step(sched, w, pattern, masks.get(name))?;
                if sched.frozen() {
                    let pruned = prune(w, &mask)?;
                    params.insert(name.clone(), pruned);
                }
                masks.insert(name.clone(), mask);
            }
        }

        let eff = build_effective(&graph, &params, comp.scheme.as_ref(), &masks, &comp.include)?;

        // Per-utterance forward/loss/backward, reduced in utterance order.
        // Any non-finite value surfaces as an InvalidValue from a tensor
        // constructor; labels were validated upfront, so that means the
        // numerics blew up.
        let results: Vec<Result<(f32, BTreeMap<String, Tensor>)>> =
            exec::map_indexed(task.train.len(), |u| {
                let utt = &task.train[u];
                let (out, mut cache) = forward_with(&graph, &utt.frames, &params, &eff)?;
                let (loss, dy) = ctc::ctc_loss(&out, &utt.labels)?;
                let grads = graph::backward_ste(&graph, &mut cache, &dy, &eff, &masks)?;
                Ok((loss, grads))
            });
        let mut loss_sum = 0.0f64;
        let mut grad_acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for r in results {
            let (loss, grads) = match r {
                Ok(v) => v,
                Err(Error::InvalidValue(_)) => return Err(diverged(&metrics, &last_good)),
                Err(e) => return Err(TrainError::Other(e)),
            };
            loss_sum += loss as f64;
            for (name, g) in grads {
                let acc = grad_acc
                    .entry(name)
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, &v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        let n = task.train.len() as f32;
        let loss = (loss_sum / n as f64) as f32;
        if !loss.is_finite() {
            return Err(diverged(&metrics, &last_good));
        }
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, mut acc) in grad_acc {
            for v in acc.iter_mut() {
                *v /= n;
            }
            let shape = params[&name].shape().to_vec();
            match Tensor::from_vec(&shape, acc) {
                Ok(g) => {
                    grads.insert(name, g);
                }
                Err(Error::InvalidValue(_)) => return Err(diverged(&metrics, &last_good)),
                Err(e) => return Err(TrainError::Other(e)),
            }
        }
        adam_step(&mut params, &grads, &masks, &mut adam_state, &config.adam);
        if params
            .values()
            .any(|p| p.data().iter().any(|v| !v.is_finite()))
        {
            return Err(diverged(&metrics, &last_good));
        }

        metrics.push(StepMetrics {
            step: t,
            loss,
            lr: lr_at(t, &config.adam),
            masks_frozen: !schedules.is_empty() && schedules.values().all(|s| s.frozen()),
        });
        last_good = TrainState {
            step: t,
            params: params.clone(),
            masks: masks.clone(),
            schedules: schedules.clone(),
            adam: adam_state.clone(),
        };
    }

    let state = last_good;
    let token_error = evaluate(&graph, &state, comp, &task.eval)?;
    let final_loss = metrics.last().expect("steps >= 1").loss;
    Ok(TrainRun {
        state,
        metrics,
        final_loss,
        token_error,
    })
}

/// Greedy-decode token error rate with the compressed (training-time)
/// forward, matching what the deployed compressed model would compute.
pub fn evaluate(
    graph: &Graph,
    state: &TrainState,
    comp: &CompressionConfig,
    eval: &[data::Utterance],
) -> Result<f64> {
    let eff = build_effective(
        graph,
        &state.params,
        comp.scheme.as_ref(),
        &state.masks,
        &comp.include,
    )?;
    let mut pairs: Vec<(Vec<usize>, &[usize])> = Vec::with_capacity(eval.len());
    for utt in eval {
        let (out, _) = forward_with(graph, &utt.frames, &state.params, &eff)?;
        pairs.push((ctc::greedy_ctc_decode(&out), utt.labels.as_slice()));
    }
    Ok(data::token_error_rate(&pairs))
}

/// Serialize a trained state: eligible weights packed per the compression
/// config (using the trainer's frozen masks, never recomputed), everything
/// else dense.
pub fn state_to_checkpoint(
    state: &TrainState,
    comp: &CompressionConfig,
) -> Result<crate::checkpoint::Checkpoint> {
    let mut ckpt = crate::checkpoint::Checkpoint::new();
    for (name, w) in &state.params {
        let eligible = w.rank() == 2 && crate::compress::glob_match(&comp.include, name);
        if eligible && (comp.scheme.is_some() || comp.pattern.is_some()) {
            let entries = crate::compress::compress_with_mask(
                w,
                comp.scheme.as_ref(),
                state.masks.get(name),
                name,
            )?;
            for (n, p) in entries {
                ckpt.push(n, p)?;
            }
        } else {
            ckpt.push(name.clone(), crate::checkpoint::TensorPayload::from_tensor(w))?;
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::make_mask;

    fn small_task() -> SyntheticTask {
        data::generate(3, 12, 6).unwrap()
    }

    fn dense_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dense_loss_strictly_decreases_over_first_hundred_steps() {
        let task = small_task();
        let run = train(&task, &ModelSpec::default(), &dense_config(100)).unwrap();
        assert_eq!(run.metrics.len(), 100);
        for pair in run.metrics.windows(2) {
            assert!(
                pair[1].loss < pair[0].loss,
                "step {}: {} !< {}",
                pair[1].step,
                pair[1].loss,
                pair[0].loss
            );
        }
        assert!(!run.metrics.iter().any(|m| m.masks_frozen));
    }

    #[test]
    fn identical_seed_and_config_reproduce_the_metrics_log() {
        let task = small_task();
        let a = train(&task, &ModelSpec::default(), &dense_config(30)).unwrap();
        let b = train(&task, &ModelSpec::default(), &dense_config(30)).unwrap();
        assert_eq!(a.metrics, b.metrics);
        for (name, t) in &a.state.params {
            assert_eq!(t.data(), b.state.params[name].data(), "{name}");
        }
        assert_eq!(a.token_error, b.token_error);
    }

    #[test]
    fn one_shot_mask_comes_from_the_initial_weights_and_freezes() {
        let task = small_task();
        let pattern = SparsityPattern::new(2, 4).unwrap();
        let config = TrainConfig {
            steps: 20,
            seed: 9,
            compression: CompressionConfig {
                pattern: Some(pattern),
                prune_steps: 1,
                ..CompressionConfig::default()
            },
            ..TrainConfig::default()
        };
        let run = train(&task, &ModelSpec::default(), &config).unwrap();
        assert!(run.metrics.iter().all(|m| m.masks_frozen));
        // One-shot: the frozen mask is the magnitude mask of the untouched
        // initial weights.
        let init = init_params(&ModelSpec::default(), 9).unwrap();
        for name in ["linear0.weight", "linear1.weight"] {
            let expect = make_mask(&init[name], pattern).unwrap();
            assert_eq!(run.state.masks[name], expect, "{name}");
            // Pruned raw weights stay literal zeros.
            for (f, &v) in run.state.params[name].data().iter().enumerate() {
                if !expect.kept(f) {
                    assert_eq!(v.to_bits(), 0.0f32.to_bits());
                }
            }
        }
        assert!(!run.state.masks.contains_key("softmax.weight"));
    }

    #[test]
    fn invalid_configs_rejected() {
        let task = small_task();
        let spec = ModelSpec::default();
        let mut c = dense_config(0);
        assert!(matches!(
            train(&task, &spec, &c),
            Err(TrainError::Other(Error::InvalidConfig(_)))
        ));
        c.steps = 5;
        c.compression.pattern = Some(SparsityPattern::new(2, 4).unwrap());
        c.compression.prune_steps = 10;
        assert!(matches!(
            train(&task, &spec, &c),
            Err(TrainError::Other(Error::InvalidConfig(_)))
        ));
    }

    #[test]
    fn absurd_learning_rate_diverges_with_last_good_state() {
        let task = small_task();
        let config = TrainConfig {
            steps: 50,
            seed: 2,
            adam: AdamConfig {
                base_lr: 1e32,
                warmup: 1,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        match train(&task, &ModelSpec::default(), &config) {
            Err(TrainError::Diverged(d)) => {
                assert!(d.step >= 1 && d.step <= 50);
                assert_eq!(d.last_state.step, d.step - 1);
                for t in d.last_state.params.values() {
                    assert!(t.data().iter().all(|v| v.is_finite()));
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn quantized_run_trains_and_serializes() {
        let task = small_task();
        let config = TrainConfig {
            steps: 25,
            seed: 4,
            compression: CompressionConfig {
                scheme: Some(QuantScheme::symmetric(4, 1).unwrap()),
                pattern: Some(SparsityPattern::new(2, 4).unwrap()),
                prune_steps: 1,
                ..CompressionConfig::default()
            },
            ..TrainConfig::default()
        };
        let run = train(&task, &ModelSpec::default(), &config).unwrap();
        let ckpt = state_to_checkpoint(&run.state, &config.compression).unwrap();
        // Hidden linears packed + masked; softmax and biases dense.
        let w0 = ckpt.get("linear0.weight").unwrap();
        assert_eq!(w0.dtype, crate::checkpoint::Dtype::I4Packed);
        assert_eq!(w0.mask_ref.as_deref(), Some("linear0.weight.mask"));
        assert!(ckpt.get("linear0.weight.mask").is_some());
        assert_eq!(
            ckpt.get("softmax.weight").unwrap().dtype,
            crate::checkpoint::Dtype::F32
        );
        let bytes = crate::checkpoint::to_bytes(&ckpt).unwrap();
        let back = crate::checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        // The stored weight decodes to the effective training weight.
        let decoded = crate::compress::decode_weight(&back, "linear0.weight").unwrap();
        let mask = &run.state.masks["linear0.weight"];
        for (f, &v) in decoded.data().iter().enumerate() {
            if !mask.kept(f) {
                assert_eq!(v.to_bits(), 0.0f32.to_bits());
            }
        }
        assert_eq!(run.metrics.len(), 25);
    }
}
