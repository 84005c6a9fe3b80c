//! The desk-scale model: a chain of linear(+bias)+relu layers ending in
//! log_softmax, with compression applied inside the forward pass (prune,
//! then quantize, then the quantized matmul) and a straight-through
//! backward that bypasses quantization entirely: gradients are those of the
//! pruned dense forward, with pruned positions zeroed.

use crate::compress::glob_match;
use crate::error::{Error, Result};
use crate::exec;
use crate::quant::{quantize_weight, quantized_matmul_ref, QuantScheme, QuantizedTensor};
use crate::sparse::{prune, SparsityMask};
use crate::tensor::{Fill, SplitMix64, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Output classes including the trailing blank.
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 16,
            hidden_dim: 16,
            hidden_layers: 2,
            classes: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Linear { weight: String, bias: String },
    Relu,
    LogSoftmax,
}

/// A straight chain of nodes; acyclic by construction, each parameter
/// referenced by exactly one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
}

/// Hidden linears are named `linear{i}`; the classifier is `softmax` so the
/// default `*linear*` include pattern compresses hidden layers only.
pub fn build_graph(spec: &ModelSpec) -> Graph {
    let mut nodes = Vec::new();
    for l in 0..spec.hidden_layers {
        nodes.push(Node::Linear {
            weight: format!("linear{l}.weight"),
            bias: format!("linear{l}.bias"),
        });
        nodes.push(Node::Relu);
    }
    nodes.push(Node::Linear {
        weight: "softmax.weight".to_string(),
        bias: "softmax.bias".to_string(),
    });
    nodes.push(Node::LogSoftmax);
    Graph { nodes }
}

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, one derived seed per
/// tensor in graph order.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = SplitMix64::new(seed);
    let mut params = BTreeMap::new();
    let mut dims = Vec::new();
    let mut d_in = spec.input_dim;
    for l in 0..spec.hidden_layers {
        dims.push((format!("linear{l}"), d_in, spec.hidden_dim));
        d_in = spec.hidden_dim;
    }
    dims.push(("softmax".to_string(), d_in, spec.classes));
    for (name, fan_in, fan_out) in dims {
        let s = 1.0 / (fan_in as f32).sqrt();
        let w = Tensor::new(
            &[fan_in, fan_out],
            Fill::SeededUniform {
                seed: rng.next_u64(),
                lo: -s,
                hi: s,
            },
        )?;
        params.insert(format!("{name}.weight"), w);
        params.insert(format!("{name}.bias"), Tensor::new(&[fan_out], Fill::Zeros)?);
    }
    Ok(params)
}

/// Plain dense matmul with the same fixed ascending-i accumulation order as
/// the quantized kernels.
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() {
        return Err(Error::InvalidShape(format!(
            "matmul shapes {:?} x {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (b_dim, i_dim, j_dim) = (x.rows(), w.rows(), w.cols());
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0f32; b_dim * j_dim];
    exec::for_each_chunk_mut(&mut out, j_dim, |b, row| {
        let xrow = &xd[b * i_dim..(b + 1) * i_dim];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (i, &xv) in xrow.iter().enumerate() {
                acc += xv * wd[i * j_dim + j];
            }
            *slot = acc;
        }
    });
    Tensor::from_vec(&[b_dim, j_dim], out)
}

/// Per-step compiled weights: the pruned dense weight (the backward
/// operator) and, for quantized layers, the quantized forward operator.
#[derive(Debug, Clone)]
pub struct EffectiveLayer {
    pub masked: Tensor,
    pub quant: Option<QuantizedTensor>,
}

#[derive(Debug, Clone, Default)]
pub struct EffectiveWeights {
    layers: BTreeMap<String, EffectiveLayer>,
}

impl EffectiveWeights {
    pub fn get(&self, weight: &str) -> Option<&EffectiveLayer> {
        self.layers.get(weight)
    }
}

/// Prune and quantize each linear weight once per step (Algorithm-style:
/// compression is part of the training forward, not a post-hoc wrapper).
/// Masks apply wherever provided; quantization applies to weights matching
/// `include`.
pub fn build_effective(
    graph: &Graph,
    params: &BTreeMap<String, Tensor>,
    scheme: Option<&QuantScheme>,
    masks: &BTreeMap<String, SparsityMask>,
    include: &str,
) -> Result<EffectiveWeights> {
    let mut layers = BTreeMap::new();
    for node in graph.nodes() {
        if let Node::Linear { weight, .. } = node {
            let w = params
                .get(weight)
                .ok_or_else(|| Error::InvalidState(format!("missing parameter {weight:?}")))?;
            let masked = match masks.get(weight) {
                Some(m) => prune(w, m)?,
                None => w.clone(),
            };
            let quant = match scheme {
                Some(s) if glob_match(include, weight) => {
                    Some(quantize_weight(&masked, s)?)
                }
                _ => None,
            };
            layers.insert(weight.clone(), EffectiveLayer { masked, quant });
        }
    }
    Ok(EffectiveWeights { layers })
}

/// Activation trace of one forward pass: acts[i] is the input to node i,
/// acts[len] the network output. Consumed by exactly one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Tensor>,
    used: bool,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("cache holds at least the input")
    }
}

pub fn forward_with(
    graph: &Graph,
    x: &Tensor,
    params: &BTreeMap<String, Tensor>,
    eff: &EffectiveWeights,
) -> Result<(Tensor, ForwardCache)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape("input must be rank 2".into()));
    }
    let mut acts = Vec::with_capacity(graph.nodes().len() + 1);
    acts.push(x.clone());
    for node in graph.nodes() {
        let cur = acts.last().expect("nonempty");
        let next = match node {
            Node::Linear { weight, bias } => {
                let layer = eff
                    .get(weight)
                    .ok_or_else(|| Error::InvalidState(format!("no effective weight {weight:?}")))?;
                let mut y = match &layer.quant {
                    Some(q) => quantized_matmul_ref(cur, q)?,
                    None => matmul(cur, &layer.masked)?,
                };
                let b = params
                    .get(bias)
                    .ok_or_else(|| Error::InvalidState(format!("missing parameter {bias:?}")))?;
                if b.len() != y.cols() {
                    return Err(Error::InvalidShape(format!(
                        "bias length {} != output cols {}",
                        b.len(),
                        y.cols()
                    )));
                }
                let cols = y.cols();
                let bd = b.data().to_vec();
                for (f, v) in y.data_mut().iter_mut().enumerate() {
                    *v += bd[f % cols];
                }
                y
            }
            Node::Relu => {
                let data = cur.data().iter().map(|&v| v.max(0.0)).collect();
                Tensor::from_vec(cur.shape(), data)?
            }
            Node::LogSoftmax => {
                let cols = cur.cols();
                let mut data = cur.data().to_vec();
                for row in data.chunks_mut(cols) {
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let lse = max
                        + row
                            .iter()
                            .map(|&v| ((v - max) as f64).exp())
                            .sum::<f64>()
                            .ln() as f32;
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                Tensor::from_vec(cur.shape(), data)?
            }
        };
        acts.push(next);
    }
    let out = acts.last().expect("nonempty").clone();
    Ok((out, ForwardCache { acts, used: false }))
}

/// Convenience wrapper: build the effective weights and run one forward.
pub fn forward(
    graph: &Graph,
    x: &Tensor,
    params: &BTreeMap<String, Tensor>,
    scheme: Option<&QuantScheme>,
    masks: &BTreeMap<String, SparsityMask>,
    include: &str,
) -> Result<(Tensor, ForwardCache)> {
    let eff = build_effective(graph, params, scheme, masks, include)?;
    forward_with(graph, x, params, &eff)
}

/// Reverse pass with the straight-through estimator: quantization is
/// treated as identity, so every derivative is taken through the pruned
/// dense weights; weight gradients are then masked so pruned positions get
/// exactly zero.
pub fn backward_ste(
    graph: &Graph,
    cache: &mut ForwardCache,
    dy: &Tensor,
    eff: &EffectiveWeights,
    masks: &BTreeMap<String, SparsityMask>,
) -> Result<BTreeMap<String, Tensor>> {
    if cache.used {
        return Err(Error::InvalidState(
            "forward cache already consumed; rerun forward".into(),
        ));
    }
    cache.used = true;
    if dy.shape() != cache.output().shape() {
        return Err(Error::InvalidShape(format!(
            "upstream gradient shape {:?} != output shape {:?}",
            dy.shape(),
            cache.output().shape()
        )));
    }
    let mut grads = BTreeMap::new();
    let mut d = dy.clone();
    for (i, node) in graph.nodes().iter().enumerate().rev() {
        d = match node {
            Node::LogSoftmax => {
                let out = &cache.acts[i + 1];
                let cols = out.cols();
                let mut next = d.data().to_vec();
                for (r, row) in next.chunks_mut(cols).enumerate() {
                    let dsum: f32 = row.iter().sum();
                    for (k, v) in row.iter_mut().enumerate() {
                        *v -= out.data()[r * cols + k].exp() * dsum;
                    }
                }
                Tensor::from_vec(d.shape(), next)?
            }
            Node::Relu => {
                let xin = &cache.acts[i];
                let next = d
                    .data()
                    .iter()
                    .zip(xin.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::from_vec(d.shape(), next)?
            }
            Node::Linear { weight, bias } => {
                let xin = &cache.acts[i];
                let layer = eff
                    .get(weight)
                    .ok_or_else(|| Error::InvalidState(format!("no effective weight {weight:?}")))?;
                let w = &layer.masked;
                let (b_dim, i_dim, j_dim) = (xin.rows(), w.rows(), w.cols());
                // dW = X^T . dY, masked.
                let mut dw = vec![0f32; i_dim * j_dim];
                for b in 0..b_dim {
                    for ii in 0..i_dim {
                        let xv = xin.data()[b * i_dim + ii];
                        for j in 0..j_dim {
                            dw[ii * j_dim + j] += xv * d.data()[b * j_dim + j];
                        }
                    }
                }
                if let Some(mask) = masks.get(weight) {
                    for (f, g) in dw.iter_mut().enumerate() {
                        if !mask.kept(f) {
                            *g = 0.0;
                        }
                    }
                }
                grads.insert(weight.clone(), Tensor::from_vec(&[i_dim, j_dim], dw)?);
                // db = column sums of dY.
                let mut db = vec![0f32; j_dim];
                for b in 0..b_dim {
                    for j in 0..j_dim {
                        db[j] += d.data()[b * j_dim + j];
                    }
                }
                grads.insert(bias.clone(), Tensor::from_vec(&[j_dim], db)?);
                // dX = dY . W^T through the pruned dense weight.
                let mut dx = vec![0f32; b_dim * i_dim];
                for b in 0..b_dim {
                    for ii in 0..i_dim {
                        let mut acc = 0.0f32;
                        for j in 0..j_dim {
                            acc += d.data()[b * j_dim + j] * w.data()[ii * j_dim + j];
                        }
                        dx[b * i_dim + ii] = acc;
                    }
                }
                Tensor::from_vec(&[b_dim, i_dim], dx)?
            }
        };
    }
    Ok(grads)
}

/// 64-bit shadow of the dense, uncompressed forward, ending in the
/// enumeration CTC loss. Used to back finite-difference gradient checks;
/// `perturb` nudges one parameter coordinate before evaluating.
pub fn dense_loss_f64(
    graph: &Graph,
    x: &Tensor,
    params: &BTreeMap<String, Tensor>,
    labels: &[usize],
    perturb: Option<(&str, usize, f64)>,
) -> Result<f64> {
    let mut p64: BTreeMap<&str, Vec<f64>> = params
        .iter()
        .map(|(n, t)| (n.as_str(), t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    if let Some((name, idx, delta)) = perturb {
        let v = p64
            .get_mut(name)
            .ok_or_else(|| Error::InvalidValue(format!("no parameter {name:?}")))?;
        v[idx] += delta;
    }
    let mut cur: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let rows = x.rows();
    let mut cols = x.cols();
    for node in graph.nodes() {
        match node {
            Node::Linear { weight, bias } => {
                let shape = params[weight].shape();
                let (i_dim, j_dim) = (shape[0], shape[1]);
                let w = &p64[weight.as_str()];
                let b = &p64[bias.as_str()];
                let mut next = vec![0f64; rows * j_dim];
                for r in 0..rows {
                    for j in 0..j_dim {
                        let mut acc = 0.0f64;
                        for i in 0..i_dim {
                            acc += cur[r * i_dim + i] * w[i * j_dim + j];
                        }
                        next[r * j_dim + j] = acc + b[j];
                    }
                }
                cur = next;
                cols = j_dim;
            }
            Node::Relu => {
                for v in cur.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            Node::LogSoftmax => {
                for row in cur.chunks_mut(cols) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
            }
        }
    }
    Ok(super::ctc::enumerate_loss_f64(&cur, rows, cols, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{make_mask, SparsityPattern};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_dim: 4,
            hidden_layers: 1,
            classes: 3,
        }
    }

    fn frames(t: usize, d: usize, seed: u64) -> Tensor {
        Tensor::new(
            &[t, d],
            Fill::SeededUniform {
                seed,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn null_compression_equals_plain_dense_forward() {
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let params = init_params(&spec, 11).unwrap();
        let x = frames(5, 3, 1);
        let (y, _) = forward(&graph, &x, &params, None, &BTreeMap::new(), "*linear*").unwrap();
        // Hand-rolled dense chain.
        let h = matmul(&x, &params["linear0.weight"]).unwrap();
        let mut hd = h.data().to_vec();
        for (f, v) in hd.iter_mut().enumerate() {
            *v += params["linear0.bias"].data()[f % 4];
        }
        let hd: Vec<f32> = hd.iter().map(|&v| v.max(0.0)).collect();
        let h = Tensor::from_vec(&[5, 4], hd).unwrap();
        let o = matmul(&h, &params["softmax.weight"]).unwrap();
        let mut od = o.data().to_vec();
        for (f, v) in od.iter_mut().enumerate() {
            *v += params["softmax.bias"].data()[f % 3];
        }
        for row in od.chunks_mut(3) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max
                + row
                    .iter()
                    .map(|&v| ((v - max) as f64).exp())
                    .sum::<f64>()
                    .ln() as f32;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        assert_eq!(y.data(), &od[..]);
    }

    #[test]
    fn exactly_representable_weights_quantize_to_the_same_forward() {
        // Weights are multiples of 2^-7 with per-column max 127 * 2^-7, so
        // the int8 scale is exactly 2^-7 and dequantization is lossless;
        // power-of-two scaling commutes with float rounding, making the
        // quantized forward bitwise equal to the dense one.
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let mut params = init_params(&spec, 3).unwrap();
        let mut rng = SplitMix64::new(99);
        for name in ["linear0.weight", "softmax.weight"] {
            let shape = params[name].shape().to_vec();
            let (i_dim, j_dim) = (shape[0], shape[1]);
            let mut data = vec![0f32; i_dim * j_dim];
            for (f, v) in data.iter_mut().enumerate() {
                let code = if f / j_dim == 0 {
                    // First row pins every column's max magnitude.
                    if f % 2 == 0 { 127 } else { -127 }
                } else {
                    rng.next_range(255) as i64 - 127
                };
                *v = code as f32 / 128.0 * 0.5; // code * 2^-8 ... keep exact
            }
            // 2^-8 scaling keeps |w| <= 127/256 < 1, all exact in f32.
            params.insert(name.to_string(), Tensor::from_vec(&shape, data).unwrap());
        }
        let x = frames(5, 3, 2);
        let scheme = QuantScheme::symmetric(8, 1).unwrap();
        let (dense, _) = forward(&graph, &x, &params, None, &BTreeMap::new(), "*").unwrap();
        let (quant, _) = forward(&graph, &x, &params, Some(&scheme), &BTreeMap::new(), "*").unwrap();
        assert_eq!(dense.data(), quant.data());
    }

    #[test]
    fn all_ones_pattern_equals_dense_forward() {
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let params = init_params(&spec, 4).unwrap();
        let pattern = SparsityPattern::new(4, 4).unwrap();
        let mut masks = BTreeMap::new();
        for name in ["linear0.weight", "softmax.weight"] {
            masks.insert(
                name.to_string(),
                make_mask(&params[name], pattern).unwrap(),
            );
        }
        let x = frames(4, 3, 5);
        let (dense, _) = forward(&graph, &x, &params, None, &BTreeMap::new(), "*").unwrap();
        let (sparse, _) = forward(&graph, &x, &params, None, &masks, "*").unwrap();
        assert_eq!(dense.data(), sparse.data());
    }

    #[test]
    fn backward_ignores_the_quantized_operator_entirely() {
        // Same forward trace, one effective-weight set with the quantized
        // operator and one with it stripped: the STE backward must produce
        // bit-identical gradients, proving it differentiates Y = X.W.
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let params = init_params(&spec, 17).unwrap();
        let x = frames(5, 3, 6);
        let scheme = QuantScheme::symmetric(4, 1).unwrap();
        let dy = frames(5, 3, 7);

        let eff_q = build_effective(&graph, &params, Some(&scheme), &BTreeMap::new(), "*").unwrap();
        let (_, mut cache_a) = forward_with(&graph, &x, &params, &eff_q).unwrap();
        let (_, mut cache_b) = forward_with(&graph, &x, &params, &eff_q).unwrap();
        let stripped = EffectiveWeights {
            layers: eff_q
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        EffectiveLayer {
                            masked: l.masked.clone(),
                            quant: None,
                        },
                    )
                })
                .collect(),
        };
        let grads_q = backward_ste(&graph, &mut cache_a, &dy, &eff_q, &BTreeMap::new()).unwrap();
        let grads_d = backward_ste(&graph, &mut cache_b, &dy, &stripped, &BTreeMap::new()).unwrap();
        assert_eq!(grads_q.len(), grads_d.len());
        for (name, g) in &grads_q {
            assert_eq!(g.data(), grads_d[name].data(), "{name}");
        }
    }

    #[test]
    fn ste_equals_dense_backward_when_quantization_is_lossless() {
        // With exactly representable weights the quantized and dense
        // forwards coincide bitwise, so the full quantized pipeline must
        // reproduce the dense pipeline's gradients bit for bit.
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let mut params = init_params(&spec, 19).unwrap();
        let mut rng = SplitMix64::new(101);
        for name in ["linear0.weight", "softmax.weight"] {
            let shape = params[name].shape().to_vec();
            let j_dim = shape[1];
            let mut data = vec![0f32; shape[0] * j_dim];
            for (f, v) in data.iter_mut().enumerate() {
                let code = if f / j_dim == 0 {
                    127
                } else {
                    rng.next_range(255) as i64 - 127
                };
                *v = code as f32 / 256.0;
            }
            params.insert(name.to_string(), Tensor::from_vec(&shape, data).unwrap());
        }
        let x = frames(5, 3, 20);
        let dy = frames(5, 3, 21);
        let scheme = QuantScheme::symmetric(8, 1).unwrap();

        let eff_q = build_effective(&graph, &params, Some(&scheme), &BTreeMap::new(), "*").unwrap();
        let (yq, mut cache_q) = forward_with(&graph, &x, &params, &eff_q).unwrap();
        let grads_q = backward_ste(&graph, &mut cache_q, &dy, &eff_q, &BTreeMap::new()).unwrap();

        let eff_d = build_effective(&graph, &params, None, &BTreeMap::new(), "*").unwrap();
        let (yd, mut cache_d) = forward_with(&graph, &x, &params, &eff_d).unwrap();
        let grads_d = backward_ste(&graph, &mut cache_d, &dy, &eff_d, &BTreeMap::new()).unwrap();

        assert_eq!(yq.data(), yd.data());
        for (name, g) in &grads_q {
            assert_eq!(g.data(), grads_d[name].data(), "{name}");
        }
    }

    #[test]
    fn pruned_positions_get_exactly_zero_gradient() {
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let params = init_params(&spec, 23).unwrap();
        let pattern = SparsityPattern::new(2, 4).unwrap();
        let masks = BTreeMap::from([(
            "linear0.weight".to_string(),
            make_mask(&params["linear0.weight"], pattern).unwrap(),
        )]);
        let x = frames(6, 3, 8);
        let eff = build_effective(&graph, &params, None, &masks, "*linear*").unwrap();
        let (_, mut cache) = forward_with(&graph, &x, &params, &eff).unwrap();
        let dy = frames(6, 3, 9);
        let grads = backward_ste(&graph, &mut cache, &dy, &eff, &masks).unwrap();
        let mask = &masks["linear0.weight"];
        let mut zeroed = 0;
        for (f, &g) in grads["linear0.weight"].data().iter().enumerate() {
            if !mask.kept(f) {
                assert_eq!(g.to_bits(), 0.0f32.to_bits());
                zeroed += 1;
            }
        }
        assert_eq!(zeroed, 6);
    }

    #[test]
    fn stale_cache_rejected() {
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let params = init_params(&spec, 31).unwrap();
        let x = frames(2, 3, 10);
        let eff = build_effective(&graph, &params, None, &BTreeMap::new(), "*").unwrap();
        let (_, mut cache) = forward_with(&graph, &x, &params, &eff).unwrap();
        let dy = frames(2, 3, 11);
        backward_ste(&graph, &mut cache, &dy, &eff, &BTreeMap::new()).unwrap();
        assert!(matches!(
            backward_ste(&graph, &mut cache, &dy, &eff, &BTreeMap::new()),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn dense_gradients_match_finite_differences_of_the_f64_shadow() {
        let spec = tiny_spec();
        let graph = build_graph(&spec);
        let params = init_params(&spec, 41).unwrap();
        let x = frames(5, 3, 12);
        let labels = vec![0usize, 1];

        let eff = build_effective(&graph, &params, None, &BTreeMap::new(), "*").unwrap();
        let (out, mut cache) = forward_with(&graph, &x, &params, &eff).unwrap();
        let (_, dy) = super::super::ctc::ctc_loss(&out, &labels).unwrap();
        let grads = backward_ste(&graph, &mut cache, &dy, &eff, &BTreeMap::new()).unwrap();

        let eps = 1e-3f64;
        for (name, g) in &grads {
            for idx in 0..g.len() {
                let plus =
                    dense_loss_f64(&graph, &x, &params, &labels, Some((name, idx, eps))).unwrap();
                let minus =
                    dense_loss_f64(&graph, &x, &params, &labels, Some((name, idx, -eps))).unwrap();
                let fd = (plus - minus) / (2.0 * eps);
                let an = g.data()[idx] as f64;
                assert!(
                    (an - fd).abs() <= 1e-3 * fd.abs().max(1e-3),
                    "{name}[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
