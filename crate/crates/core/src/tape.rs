//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! A `Tape` records primitive operations in execution order; `backward`
//! replays them in exact reverse order, accumulating adjoints per node with a
//! fixed operand order so repeated runs of the same forward pass produce
//! bitwise-identical gradients. A tape is confined to one forward/backward
//! pass; concurrent episodes each build their own.

use crate::tensor::{matmul_nn, matmul_nt_acc, matmul_tn_acc, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    VecMat(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Ln(NodeId),
    SoftmaxRows(NodeId),
    SoftmaxMasked(NodeId, Vec<bool>),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Entropy(NodeId),
    Pick(NodeId, usize),
    Row(NodeId, usize),
    SliceVec(NodeId, usize, usize),
    ConcatVec(NodeId, NodeId),
    BceLogits(NodeId, Vec<f64>),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, or `None` if the node does not influence the root.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads[id.0] {
            Some(ref g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record an input tensor. Gradients w.r.t. leaves are available after
    /// backward like for any other node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .add(self.value(b))
            .unwrap_or_else(|e| panic!("tape add: {e}"));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .sub(self.value(b))
            .unwrap_or_else(|e| panic!("tape sub: {e}"));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip(self.value(b), "mul_elem", |x, y| x * y)
            .unwrap_or_else(|e| panic!("tape mul_elem: {e}"));
        self.push(Op::MulElem(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("tape matmul: {e}"));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Row vector times matrix: `[k] x [k,c] -> [c]`.
    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> NodeId {
        let vt = self.value(v);
        let mt = self.value(m);
        assert!(
            vt.is_vector() && mt.is_matrix() && vt.numel() == mt.rows(),
            "tape vecmat: {:?} x {:?}",
            vt.shape(),
            mt.shape()
        );
        let (k, c) = (mt.rows(), mt.cols());
        let mut out = vec![0.0; c];
        matmul_nn(vt.values(), mt.values(), 1, k, c, &mut out);
        self.push(Op::VecMat(v, m), Tensor::vector(out))
    }

    /// Matrix times column vector: `[r,c] x [c] -> [r]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let mt = self.value(m);
        let vt = self.value(v);
        assert!(
            mt.is_matrix() && vt.is_vector() && mt.cols() == vt.numel(),
            "tape matvec: {:?} x {:?}",
            mt.shape(),
            vt.shape()
        );
        let (r, c) = (mt.rows(), mt.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let mrow = &mt.values()[i * c..(i + 1) * c];
            out[i] = mrow.iter().zip(vt.values()).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec(m, v), Tensor::vector(out))
    }

    /// Add vector `b` to every row of matrix `a`.
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let at = self.value(a);
        let bt = self.value(b);
        assert!(
            at.is_matrix() && bt.is_vector() && at.cols() == bt.numel(),
            "tape add_row_broadcast: {:?} + {:?}",
            at.shape(),
            bt.shape()
        );
        let (r, c) = (at.rows(), at.cols());
        let mut out = at.values().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bt.values()[j];
            }
        }
        let t = Tensor::new(vec![r, c], out).unwrap();
        self.push(Op::AddRowBroadcast(a, b), t)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    /// Softmax applied independently to each row of a matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let at = self.value(a);
        assert!(at.is_matrix(), "softmax_rows on {:?}", at.shape());
        let (r, c) = (at.rows(), at.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&at.values()[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![r, c], out).unwrap();
        self.push(Op::SoftmaxRows(a), t)
    }

    /// Masked softmax over a logit vector. Masked entries are exactly zero in
    /// the output and receive zero gradient. Panics if everything is masked;
    /// callers expose that as a proper error.
    pub fn softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let at = self.value(a);
        assert!(
            at.is_vector() && at.numel() == mask.len(),
            "softmax_masked: logits {:?} vs mask {}",
            at.shape(),
            mask.len()
        );
        let v = masked_softmax_forward(at.values(), mask);
        self.push(Op::SoftmaxMasked(a, mask.to_vec()), Tensor::vector(v))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xt = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        assert!(
            xt.is_matrix()
                && g.is_vector()
                && b.is_vector()
                && g.numel() == xt.cols()
                && b.numel() == xt.cols(),
            "layer_norm_rows: x {:?}, gain {:?}, bias {:?}",
            xt.shape(),
            g.shape(),
            b.shape()
        );
        let (r, c) = (xt.rows(), xt.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xt.values()[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row);
            for j in 0..c {
                out[i * c + j] = g.values()[j] * (row[j] - mean) * inv_std + b.values()[j];
            }
        }
        let t = Tensor::new(vec![r, c], out).unwrap();
        self.push(Op::LayerNormRows { x, gain, bias }, t)
    }

    /// Same flat values under a new shape (row-major layout is shared).
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let at = self.value(a);
        assert_eq!(
            at.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            at.shape(),
            shape
        );
        let v = Tensor::new(shape, at.values().to_vec()).unwrap();
        self.push(Op::Reshape(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Shannon entropy -sum p ln p of a probability vector, with 0 ln 0 = 0
    /// so exactly-masked entries contribute nothing. Entries at 0 also get
    /// zero gradient; they are constants of the masked distribution.
    pub fn entropy(&mut self, p: NodeId) -> NodeId {
        let pt = self.value(p);
        assert!(pt.is_vector(), "entropy on {:?}", pt.shape());
        let h: f64 = pt
            .values()
            .iter()
            .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
            .sum();
        self.push(Op::Entropy(p), Tensor::scalar(h))
    }

    /// Scalar node holding `a.values()[index]`.
    pub fn pick(&mut self, a: NodeId, index: usize) -> NodeId {
        let v = Tensor::scalar(self.value(a).values()[index]);
        self.push(Op::Pick(a, index), v)
    }

    /// Row `i` of a matrix as a vector node.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let at = self.value(a);
        assert!(at.is_matrix() && i < at.rows(), "row {i} of {:?}", at.shape());
        let v = Tensor::vector(at.row_slice(i).to_vec());
        self.push(Op::Row(a, i), v)
    }

    pub fn slice_vec(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let at = self.value(a);
        assert!(
            at.is_vector() && start + len <= at.numel(),
            "slice_vec [{start}..{}] of {:?}",
            start + len,
            at.shape()
        );
        let v = Tensor::vector(at.values()[start..start + len].to_vec());
        self.push(Op::SliceVec(a, start, len), v)
    }

    pub fn concat_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let at = self.value(a);
        let bt = self.value(b);
        assert!(at.is_vector() && bt.is_vector());
        let mut v = at.values().to_vec();
        v.extend_from_slice(bt.values());
        self.push(Op::ConcatVec(a, b), Tensor::vector(v))
    }

    /// Per-element binary cross-entropy of logits against fixed 0/1 targets,
    /// computed in the numerically stable max(z,0) - z*y + ln(1+e^-|z|) form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let lt = self.value(logits);
        assert!(
            lt.is_vector() && lt.numel() == targets.len(),
            "bce_with_logits: logits {:?} vs {} targets",
            lt.shape(),
            targets.len()
        );
        let v: Vec<f64> = lt
            .values()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        self.push(Op::BceLogits(logits, targets.to_vec()), Tensor::vector(v))
    }

    /// Mean of all elements as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar root. Returns per-node adjoints.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be scalar, got {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(dz) = grads[id].take() else {
                continue;
            };
            self.apply_backward(id, &dz, &mut grads);
            grads[id] = Some(dz);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, update: impl FnOnce(&mut [f64])) {
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(target).shape().to_vec()));
        }
        update(slot.as_mut().unwrap().values_mut());
    }

    fn apply_backward(&self, id: usize, dz: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let dzv = dz.values();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, dzv, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, dzv, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, dzv, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, dzv, -1.0));
            }
            Op::MulElem(a, b) => {
                let av = self.value(*a).values().to_vec();
                let bv = self.value(*b).values().to_vec();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dzv[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dzv[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |g| axpy(g, dzv, c));
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, |g| axpy(g, dzv, 1.0));
            }
            Op::Matmul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                self.accumulate(grads, *a, |g| matmul_nt_acc(dzv, bt.values(), m, n, k, g));
                self.accumulate(grads, *b, |g| matmul_tn_acc(at.values(), dzv, m, k, n, g));
            }
            Op::Transpose(a) => {
                let (r, c) = {
                    let at = self.value(*a);
                    (at.rows(), at.cols())
                };
                self.accumulate(grads, *a, |g| {
                    // dz has shape [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dzv[j * r + i];
                        }
                    }
                });
            }
            Op::VecMat(v, m) => {
                let vt = self.value(*v);
                let mt = self.value(*m);
                let (k, c) = (mt.rows(), mt.cols());
                self.accumulate(grads, *v, |g| {
                    for p in 0..k {
                        let mrow = &mt.values()[p * c..(p + 1) * c];
                        g[p] += mrow.iter().zip(dzv).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accumulate(grads, *m, |g| {
                    for p in 0..k {
                        let vv = vt.values()[p];
                        if vv == 0.0 {
                            continue;
                        }
                        let grow = &mut g[p * c..(p + 1) * c];
                        for j in 0..c {
                            grow[j] += vv * dzv[j];
                        }
                    }
                });
            }
            Op::MatVec(m, v) => {
                let mt = self.value(*m);
                let vt = self.value(*v);
                let (r, c) = (mt.rows(), mt.cols());
                self.accumulate(grads, *m, |g| {
                    for i in 0..r {
                        let d = dzv[i];
                        if d == 0.0 {
                            continue;
                        }
                        let grow = &mut g[i * c..(i + 1) * c];
                        for j in 0..c {
                            grow[j] += d * vt.values()[j];
                        }
                    }
                });
                self.accumulate(grads, *v, |g| {
                    for i in 0..r {
                        let d = dzv[i];
                        if d == 0.0 {
                            continue;
                        }
                        let mrow = &mt.values()[i * c..(i + 1) * c];
                        for j in 0..c {
                            g[j] += d * mrow[j];
                        }
                    }
                });
            }
            Op::AddRowBroadcast(a, b) => {
                let (r, c) = {
                    let at = self.value(*a);
                    (at.rows(), at.cols())
                };
                self.accumulate(grads, *a, |g| axpy(g, dzv, 1.0));
                self.accumulate(grads, *b, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dzv[i * c + j];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[id].value.values();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dzv[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.values();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dzv[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += dzv[i];
                        }
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dzv[i] / x[i];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[id].value.values();
                let (r, c) = {
                    let at = self.value(*a);
                    (at.rows(), at.cols())
                };
                self.accumulate(grads, *a, |g| {
                    for i in 0..r {
                        let yrow = &y[i * c..(i + 1) * c];
                        let drow = &dzv[i * c..(i + 1) * c];
                        let inner: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        let grow = &mut g[i * c..(i + 1) * c];
                        for j in 0..c {
                            grow[j] += yrow[j] * (drow[j] - inner);
                        }
                    }
                });
            }
            Op::SoftmaxMasked(a, mask) => {
                let y = self.nodes[id].value.values();
                self.accumulate(grads, *a, |g| {
                    let inner: f64 = y
                        .iter()
                        .zip(dzv)
                        .zip(mask)
                        .filter(|&(_, &m)| !m)
                        .map(|((y, d), _)| y * d)
                        .sum();
                    for j in 0..g.len() {
                        if !mask[j] {
                            g[j] += y[j] * (dzv[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xt = self.value(*x);
                let gt = self.value(*gain);
                let (r, c) = (xt.rows(), xt.cols());
                // Recompute per-row moments; cheaper than caching for these sizes.
                let mut xhat = vec![0.0; r * c];
                let mut inv_stds = vec![0.0; r];
                for i in 0..r {
                    let row = &xt.values()[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_moments(row);
                    inv_stds[i] = inv_std;
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * inv_std;
                    }
                }
                self.accumulate(grads, *x, |g| {
                    for i in 0..r {
                        let drow = &dzv[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = drow[j] * gt.values()[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xrow[j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        let grow = &mut g[i * c..(i + 1) * c];
                        for j in 0..c {
                            let dxh = drow[j] * gt.values()[j];
                            grow[j] += inv_stds[i] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                        }
                    }
                });
                self.accumulate(grads, *gain, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dzv[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dzv[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| axpy(g, dzv, 1.0));
            }
            Op::Sum(a) => {
                let d = dzv[0];
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Entropy(a) => {
                let d = dzv[0];
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] -= d * (x[i].ln() + 1.0);
                        }
                    }
                });
            }
            Op::Pick(a, index) => {
                let d = dzv[0];
                let index = *index;
                self.accumulate(grads, *a, |g| g[index] += d);
            }
            Op::Row(a, i) => {
                let c = self.value(*a).cols();
                let i = *i;
                self.accumulate(grads, *a, |g| {
                    for j in 0..c {
                        g[i * c + j] += dzv[j];
                    }
                });
            }
            Op::SliceVec(a, start, len) => {
                let (start, len) = (*start, *len);
                self.accumulate(grads, *a, |g| {
                    for j in 0..len {
                        g[start + j] += dzv[j];
                    }
                });
            }
            Op::ConcatVec(a, b) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, |g| axpy(g, &dzv[..n], 1.0));
                self.accumulate(grads, *b, |g| axpy(g, &dzv[n..], 1.0));
            }
            Op::BceLogits(logits, targets) => {
                let z = self.value(*logits).values();
                self.accumulate(grads, *logits, |g| {
                    for i in 0..g.len() {
                        g[i] += dzv[i] * (sigmoid(z[i]) - targets[i]);
                    }
                });
            }
        }
    }
}

fn axpy(acc: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(acc.len(), src.len());
    for (a, s) in acc.iter_mut().zip(src) {
        *a += alpha * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of `row` into `out` (max-subtraction).
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Masked entries are exactly 0; unmasked entries form a stable softmax.
/// Panics if every entry is masked.
pub(crate) fn masked_softmax_forward(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|&(_, &m)| !m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "masked softmax with empty support");
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if !mask[i] {
            let e = (logits[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_of_node_with_itself_doubles_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul_elem(x, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_backward_matches_hand_result() {
        // f = sum(A B), dA = ones * B^T, dB = A^T * ones
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert_eq!(g.wrt(a).unwrap().values(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.wrt(b).unwrap().values(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.7, 1.1]));
        let t = tape.tanh(x);
        let s = tape.mul_elem(t, t);
        let r = tape.sum(s);
        let g1 = tape.backward(r);
        let g2 = tape.backward(r);
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
    }

    #[test]
    fn disconnected_node_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::scalar(2.0));
        let s = tape.sum(x);
        let g = tape.backward(s);
        assert!(g.wrt(y).is_none());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![5.0, 1.0, 2.0]));
        let p = tape.softmax_masked(x, &[true, false, false]);
        let v = tape.value(p).values().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_values_and_gradient() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::vector(vec![0.25; 4]));
        let h = tape.entropy(uniform);
        assert!((tape.value(h).item() - 4f64.ln()).abs() < 1e-15);

        // Masked-out zero entries contribute nothing.
        let masked = tape.leaf(Tensor::vector(vec![0.5, 0.0, 0.5]));
        let hm = tape.entropy(masked);
        assert!((tape.value(hm).item() - 2f64.ln()).abs() < 1e-15);

        // Central differences through softmax -> entropy.
        let eval = |w: &[f64]| {
            let mut t = Tape::new();
            let leaf = t.leaf(Tensor::vector(w.to_vec()));
            let p = t.softmax_masked(leaf, &[false, false, false]);
            let h = t.entropy(p);
            t.value(h).item()
        };
        let w0 = vec![0.4, -1.2, 0.7];
        let mut t = Tape::new();
        let leaf = t.leaf(Tensor::vector(w0.clone()));
        let p = t.softmax_masked(leaf, &[false, false, false]);
        let h = t.entropy(p);
        let analytic = t.backward(h);
        let ga = analytic.wrt(leaf).unwrap().values().to_vec();
        let eps = 1e-6;
        for i in 0..3 {
            let mut hi = w0.clone();
            let mut lo = w0.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let numeric = (eval(&hi) - eval(&lo)) / (2.0 * eps);
            assert!(
                (numeric - ga[i]).abs() < 1e-8,
                "coord {i}: numeric {numeric} vs analytic {}",
                ga[i]
            );
        }
    }
}
