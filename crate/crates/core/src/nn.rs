//! Differentiable building blocks: affine maps, masked softmax, layer
//! normalization, self-attention with a residual into the query, recurrent
//! cells, and multilayer perceptrons.
//!
//! Blocks register their tensors into a [`ParamSet`] under a dotted prefix
//! and are evaluated against a [`Bound`] view of that set, so one binding
//! serves a whole forward pass and gradient checks can substitute leaves.

use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{sigmoid, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("softmax over fully masked support")]
    AllMasked,
    #[error("mlp spec: {0}")]
    BadMlpSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn apply_raw(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// y = xW + b for a vector x:[k] or matrix x:[n,k]; W:[k,m], b:[m].
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    if tape.value(x).is_vector() {
        let xw = tape.vecmat(x, w);
        tape.add(xw, b)
    } else {
        let xw = tape.matmul(x, w);
        tape.add_row_broadcast(xw, b)
    }
}

/// Masked softmax with a caller-facing error for empty support; masked
/// entries are exactly zero in the output.
pub fn softmax_masked(tape: &mut Tape, logits: NodeId, mask: &[bool]) -> Result<NodeId, NnError> {
    if mask.iter().all(|&m| m) {
        return Err(NnError::AllMasked);
    }
    Ok(tape.softmax_masked(logits, mask))
}

/// Layer normalization of a single vector.
pub fn layer_norm(tape: &mut Tape, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
    let n = tape.value(x).numel();
    let row = tape.reshape(x, vec![1, n]);
    let normed = tape.layer_norm_rows(row, gain, bias);
    tape.reshape(normed, vec![n])
}

fn uniform_fan_in(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let r = 1.0 / (rows as f64).sqrt();
    rng.uniform_tensor(vec![rows, cols], -r, r)
}

/// Self-attention with separate query/key/value projections and a residual
/// connection into the query, normalized per row. Output width is `d_k`.
#[derive(Debug, Clone)]
pub struct AttentionDims {
    pub input: usize,
    pub d_k: usize,
    pub d_v: usize,
}

pub struct AttentionNodes {
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
    ln_gain: NodeId,
    ln_bias: NodeId,
    d_k: usize,
}

pub fn attention_register(
    set: &mut ParamSet,
    prefix: &str,
    dims: &AttentionDims,
    rng: &mut SeededRng,
) {
    let o = dims.input;
    set.insert(&format!("{prefix}.w_q"), uniform_fan_in(rng, o, dims.d_k))
        .unwrap();
    set.insert(&format!("{prefix}.w_k"), uniform_fan_in(rng, o, dims.d_k))
        .unwrap();
    set.insert(&format!("{prefix}.w_v"), uniform_fan_in(rng, o, dims.d_v))
        .unwrap();
    set.insert(
        &format!("{prefix}.w_o"),
        uniform_fan_in(rng, dims.d_v, dims.d_k),
    )
    .unwrap();
    set.insert(
        &format!("{prefix}.ln_gain"),
        Tensor::new(vec![dims.d_k], vec![1.0; dims.d_k]).unwrap(),
    )
    .unwrap();
    set.insert(&format!("{prefix}.ln_bias"), Tensor::zeros(vec![dims.d_k]))
        .unwrap();
}

pub fn attention_bind(bound: &Bound, prefix: &str, dims: &AttentionDims) -> AttentionNodes {
    AttentionNodes {
        w_q: bound.id(&format!("{prefix}.w_q")),
        w_k: bound.id(&format!("{prefix}.w_k")),
        w_v: bound.id(&format!("{prefix}.w_v")),
        w_o: bound.id(&format!("{prefix}.w_o")),
        ln_gain: bound.id(&format!("{prefix}.ln_gain")),
        ln_bias: bound.id(&format!("{prefix}.ln_bias")),
        d_k: dims.d_k,
    }
}

/// softmax(QK^T/sqrt(D_K))V, projected and layer-normalized around a residual
/// with Q. Permuting input rows permutes output rows identically.
pub fn self_attention_block(tape: &mut Tape, x: NodeId, p: &AttentionNodes) -> NodeId {
    let q = tape.matmul(x, p.w_q);
    let k = tape.matmul(x, p.w_k);
    let v = tape.matmul(x, p.w_v);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / (p.d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let h_raw = tape.matmul(weights, v);
    let proj = tape.matmul(h_raw, p.w_o);
    let res = tape.add(proj, q);
    tape.layer_norm_rows(res, p.ln_gain, p.ln_bias)
}

/// LSTM parameters: one fused weight matrix over [h_prev; input] with gate
/// order (input, forget, output, candidate).
#[derive(Debug, Clone)]
pub struct LstmDims {
    pub input: usize,
    pub hidden: usize,
}

pub struct LstmNodes {
    w: NodeId,
    b: NodeId,
    hidden: usize,
}

pub fn lstm_register(set: &mut ParamSet, prefix: &str, dims: &LstmDims, rng: &mut SeededRng) {
    let rows = dims.hidden + dims.input;
    set.insert(
        &format!("{prefix}.w"),
        uniform_fan_in(rng, rows, 4 * dims.hidden),
    )
    .unwrap();
    set.insert(&format!("{prefix}.b"), Tensor::zeros(vec![4 * dims.hidden]))
        .unwrap();
}

pub fn lstm_bind(bound: &Bound, prefix: &str, dims: &LstmDims) -> LstmNodes {
    LstmNodes {
        w: bound.id(&format!("{prefix}.w")),
        b: bound.id(&format!("{prefix}.b")),
        hidden: dims.hidden,
    }
}

pub fn lstm_cell(
    tape: &mut Tape,
    h_prev: NodeId,
    c_prev: NodeId,
    input: NodeId,
    p: &LstmNodes,
) -> (NodeId, NodeId) {
    let h = p.hidden;
    let z = tape.concat_vec(h_prev, input);
    let lin = linear(tape, z, p.w, p.b);
    let i_raw = tape.slice_vec(lin, 0, h);
    let f_raw = tape.slice_vec(lin, h, h);
    let o_raw = tape.slice_vec(lin, 2 * h, h);
    let g_raw = tape.slice_vec(lin, 3 * h, h);
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let o = tape.sigmoid(o_raw);
    let g = tape.tanh(g_raw);
    let fc = tape.mul_elem(f, c_prev);
    let ig = tape.mul_elem(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h_out = tape.mul_elem(o, tc);
    (h_out, c)
}

/// Vanilla recurrent cell h = tanh(h_prev W + input V + b). Kept selectable
/// because the recurrence is also described in this simpler form.
pub struct RnnNodes {
    w: NodeId,
    v: NodeId,
    b: NodeId,
}

pub fn rnn_register(set: &mut ParamSet, prefix: &str, dims: &LstmDims, rng: &mut SeededRng) {
    set.insert(
        &format!("{prefix}.w"),
        uniform_fan_in(rng, dims.hidden, dims.hidden),
    )
    .unwrap();
    set.insert(
        &format!("{prefix}.v"),
        uniform_fan_in(rng, dims.input, dims.hidden),
    )
    .unwrap();
    set.insert(&format!("{prefix}.b"), Tensor::zeros(vec![dims.hidden]))
        .unwrap();
}

pub fn rnn_bind(bound: &Bound, prefix: &str) -> RnnNodes {
    RnnNodes {
        w: bound.id(&format!("{prefix}.w")),
        v: bound.id(&format!("{prefix}.v")),
        b: bound.id(&format!("{prefix}.b")),
    }
}

pub fn rnn_cell(tape: &mut Tape, h_prev: NodeId, input: NodeId, p: &RnnNodes) -> NodeId {
    let hw = tape.vecmat(h_prev, p.w);
    let iv = tape.vecmat(input, p.v);
    let s = tape.add(hw, iv);
    let sb = tape.add(s, p.b);
    tape.tanh(sb)
}

/// Feed-forward stack: `widths[i]` is the output width of layer i and
/// `activations[i]` its nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self, NnError> {
        if widths.is_empty() {
            return Err(NnError::BadMlpSpec("no layers".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NnError::BadMlpSpec(format!("zero width in {widths:?}")));
        }
        if widths.len() != activations.len() {
            return Err(NnError::BadMlpSpec(format!(
                "{} widths vs {} activations",
                widths.len(),
                activations.len()
            )));
        }
        Ok(Self { widths, activations })
    }

    pub fn validate(&self) -> Result<(), NnError> {
        Self::new(self.widths.clone(), self.activations.clone()).map(|_| ())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
    activations: Vec<Activation>,
}

pub fn mlp_register(
    set: &mut ParamSet,
    prefix: &str,
    input: usize,
    spec: &MlpSpec,
    rng: &mut SeededRng,
) {
    let mut fan_in = input;
    for (i, &w) in spec.widths.iter().enumerate() {
        set.insert(&format!("{prefix}.l{i}.w"), uniform_fan_in(rng, fan_in, w))
            .unwrap();
        set.insert(&format!("{prefix}.l{i}.b"), Tensor::zeros(vec![w]))
            .unwrap();
        fan_in = w;
    }
}

/// Register with every weight and bias drawn uniformly from (lo, hi); the
/// simulated preference model is seeded this way.
pub fn mlp_register_uniform(
    set: &mut ParamSet,
    prefix: &str,
    input: usize,
    spec: &MlpSpec,
    lo: f64,
    hi: f64,
    rng: &mut SeededRng,
) {
    let mut fan_in = input;
    for (i, &w) in spec.widths.iter().enumerate() {
        set.insert(
            &format!("{prefix}.l{i}.w"),
            rng.uniform_tensor(vec![fan_in, w], lo, hi),
        )
        .unwrap();
        set.insert(
            &format!("{prefix}.l{i}.b"),
            rng.uniform_tensor(vec![w], lo, hi),
        )
        .unwrap();
        fan_in = w;
    }
}

pub fn mlp_bind(bound: &Bound, prefix: &str, spec: &MlpSpec) -> MlpNodes {
    MlpNodes {
        layers: (0..spec.widths.len())
            .map(|i| {
                (
                    bound.id(&format!("{prefix}.l{i}.w")),
                    bound.id(&format!("{prefix}.l{i}.b")),
                )
            })
            .collect(),
        activations: spec.activations.clone(),
    }
}

pub fn mlp_forward(tape: &mut Tape, x: NodeId, p: &MlpNodes) -> NodeId {
    let mut h = x;
    for ((w, b), act) in p.layers.iter().zip(&p.activations) {
        let lin = linear(tape, h, *w, *b);
        h = act.apply(tape, lin);
    }
    h
}

/// Tape-free forward pass for hot loops that never need gradients (the
/// simulated click environment evaluates this per item per episode).
pub fn mlp_forward_raw(x: &[f64], set: &ParamSet, prefix: &str, spec: &MlpSpec) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, act) in spec.activations.iter().enumerate() {
        let w = set
            .get(&format!("{prefix}.l{i}.w"))
            .unwrap_or_else(|| panic!("missing mlp layer {prefix}.l{i}.w"));
        let b = set.get(&format!("{prefix}.l{i}.b")).unwrap();
        assert_eq!(h.len(), w.rows(), "mlp layer {i} width mismatch");
        let mut next = b.values().to_vec();
        for (r, &hv) in h.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            let wrow = &w.values()[r * w.cols()..(r + 1) * w.cols()];
            for (n, &wv) in next.iter_mut().zip(wrow) {
                *n += hv * wv;
            }
        }
        for n in next.iter_mut() {
            *n = act.apply_raw(*n);
        }
        h = next;
    }
    h
}
