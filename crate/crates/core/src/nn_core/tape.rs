//! Reverse-mode differentiation over a linear recording of tensor ops.
//!
//! A [`Tape`] borrows a [`ParamStore`] for parameter values, records every
//! op in execution order (so node ids are already topologically sorted), and
//! [`Tape::backward`] walks the list in reverse accumulating adjoints. At the
//! end adjoints of parameter nodes are added into a [`Gradients`] buffer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn_core::params::{Gradients, ParamId, ParamStore};
use crate::nn_core::tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_slice};
use crate::nn_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused op with a hand-written gradient.
///
/// `backward` adds each input's gradient into `sink`, skipping inputs for
/// which `sink.needs(i)` is false.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, sink: &mut GradSink);
}

/// Gradient accumulators for the inputs of one custom node.
pub struct GradSink<'a> {
    inputs: &'a [NodeId],
    shapes: Vec<&'a [usize]>,
    needs: Vec<bool>,
    adj: &'a mut [Option<Tensor>],
}

impl GradSink<'_> {
    pub fn needs(&self, input: usize) -> bool {
        self.needs[input]
    }

    /// Runs `f` on the gradient buffer of input `input` (zeroed on first use).
    pub fn add_with(&mut self, input: usize, f: impl FnOnce(&mut [f64])) {
        if !self.needs[input] {
            return;
        }
        let slot = &mut self.adj[self.inputs[input].0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shapes[input]));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    pub fn add(&mut self, input: usize, g: &[f64]) {
        self.add_with(input, |d| {
            for (d, g) in d.iter_mut().zip(g) {
                *d += g;
            }
        });
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Linear {
        terms: Vec<(NodeId, NodeId)>,
        bias: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Stack(Vec<NodeId>),
    Transpose(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    SumSquares(NodeId),
    BinaryCrossEntropy {
        probs: NodeId,
        target: NodeId,
        eps: f64,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    // `None` for parameters, whose values live in the borrowed store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    relu_signs: Option<Vec<bool>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            relu_signs: None,
        }
    }

    /// A tape with no parameters, for evaluating constant-only graphs.
    pub fn detached() -> Tape<'static> {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            relu_signs: None,
        }
    }

    /// Records the sign pattern of every relu input; used by the gradient
    /// checker to detect finite-difference steps that straddle the kink.
    pub fn track_relu_signs(&mut self) {
        self.relu_signs = Some(Vec::new());
    }

    pub(crate) fn relu_signs(&self) -> Option<&[bool]> {
        self.relu_signs.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self.params.expect("param node without store").get(*pid),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by tape op");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes.get(pid.0).copied().flatten() {
            return id;
        }
        assert!(
            pid.0 < self.param_nodes.len(),
            "parameter {pid:?} not in this tape's store"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: None,
            op: Op::Param(pid),
            requires_grad: true,
        });
        self.param_nodes[pid.0] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let a_il = av.data()[i * k + l];
                if a_il == 0.0 {
                    continue;
                }
                let brow = &bv.data()[l * m..(l + 1) * m];
                for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                    *o += a_il * b;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wv, xv) = (self.value(w), self.value(x));
        if !wv.is_matrix() || !xv.is_vector() || wv.cols() != xv.len() {
            return Err(Error::dim(
                "matvec",
                format!("{:?} x {:?}", wv.shape(), xv.shape()),
            ));
        }
        let mut out = vec![0.0; wv.rows()];
        matvec_acc(wv.data(), wv.rows(), wv.cols(), xv.data(), &mut out);
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), rg))
    }

    /// `Σ W_k x_k + b` as one node.
    pub fn linear(&mut self, terms: &[(NodeId, NodeId)], bias: Option<NodeId>) -> Result<NodeId> {
        let rows = match (terms.first(), bias) {
            (Some(&(w, _)), _) => self.value(w).rows(),
            (None, Some(b)) => self.value(b).len(),
            (None, None) => return Err(Error::dim("linear", "no terms")),
        };
        let mut out = vec![0.0; rows];
        for &(w, x) in terms {
            let (wv, xv) = (self.value(w), self.value(x));
            if !wv.is_matrix() || !xv.is_vector() || wv.cols() != xv.len() || wv.rows() != rows {
                return Err(Error::dim(
                    "linear",
                    format!("{:?} x {:?} into {rows}", wv.shape(), xv.shape()),
                ));
            }
            matvec_acc(wv.data(), rows, wv.cols(), xv.data(), &mut out);
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [rows] {
                return Err(Error::dim("linear", format!("bias {:?} vs {rows}", bv.shape())));
            }
            for (o, b) in out.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = terms.iter().any(|&(w, x)| self.rg(w) || self.rg(x))
            || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::vector(out),
            Op::Linear {
                terms: terms.to_vec(),
                bias,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).map(|x| alpha * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, alpha), rg)
    }

    /// Adds a one-element tensor to every entry of `a`.
    pub fn shift(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("shift", format!("shift {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x + sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(v, Op::Shift(a, s), rg))
    }

    /// Concatenation of vectors (axis 0) or matrices along rows (0) or columns (1).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let ndim = self.value(first).ndim();
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.shape(i).to_vec()).collect();
        let value = match (ndim, axis) {
            (1, 0) => {
                if shapes.iter().any(|s| s.len() != 1) {
                    return Err(Error::dim("concat", format!("{shapes:?}")));
                }
                let mut data = Vec::new();
                for &i in inputs {
                    data.extend_from_slice(self.value(i).data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let cols = shapes[0][1];
                if shapes.iter().any(|s| s.len() != 2 || s[1] != cols) {
                    return Err(Error::dim("concat", format!("{shapes:?} axis 0")));
                }
                let mut data = Vec::new();
                for &i in inputs {
                    data.extend_from_slice(self.value(i).data());
                }
                let rows = data.len() / cols;
                Tensor::from_parts(vec![rows, cols], data)
            }
            (2, 1) => {
                let rows = shapes[0][0];
                if shapes.iter().any(|s| s.len() != 2 || s[0] != rows) {
                    return Err(Error::dim("concat", format!("{shapes:?} axis 1")));
                }
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &i in inputs {
                        data.extend_from_slice(self.value(i).row(r));
                    }
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
            _ => {
                return Err(Error::dim(
                    "concat",
                    format!("axis {axis} for {ndim}-d inputs"),
                ))
            }
        };
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = *rows.first().ok_or_else(|| Error::dim("stack", "no rows"))?;
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let v = self.value(r);
            if !v.is_vector() || v.len() != width {
                return Err(Error::dim(
                    "stack",
                    format!("row {:?} vs width {width}", v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), width], data),
            Op::Stack(rows.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if !self.value(a).is_matrix() {
            return Err(Error::dim("transpose", format!("{:?}", self.shape(a))));
        }
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        if let Some(signs) = self.relu_signs.as_mut() {
            signs.extend(v.data().iter().map(|&x| x > 0.0));
        }
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Contract("log of non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Log(a), rg))
    }

    /// Softmax over a vector (axis 0), or over matrix rows (axis 1) or columns (axis 0).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        let out = match (av.ndim(), axis) {
            (1, 0) => {
                let mut out = vec![0.0; av.len()];
                softmax_slice(av.data(), &mut out);
                Tensor::vector(out)
            }
            (2, 1) => {
                let (r, c) = (av.rows(), av.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    softmax_slice(av.row(i), &mut out[i * c..(i + 1) * c]);
                }
                Tensor::from_parts(vec![r, c], out)
            }
            (2, 0) => {
                let t = av.transpose();
                let (r, c) = (t.rows(), t.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    softmax_slice(t.row(i), &mut out[i * c..(i + 1) * c]);
                }
                Tensor::from_parts(vec![r, c], out).transpose()
            }
            (n, _) => {
                return Err(Error::dim(
                    "softmax",
                    format!("axis {axis} for {n}-d input"),
                ))
            }
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { input: a, axis }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`; identity when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: NodeId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Dropout { input: a, mask }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / av.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let v = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sq_norm());
        let rg = self.rg(a);
        self.push(v, Op::SumSquares(a), rg)
    }

    /// `-Σ [y log p + (1-y) log(1-p)]` with `p` clamped into `[eps, 1-eps]`.
    /// Entries that hit the clamp receive zero gradient.
    pub fn binary_cross_entropy(&mut self, probs: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        self.same_shape("binary_cross_entropy", probs, target)?;
        let (pv, yv) = (self.value(probs), self.value(target));
        let mut total = 0.0;
        for (&p, &y) in pv.data().iter().zip(yv.data()) {
            let p = p.clamp(eps, 1.0 - eps);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let rg = self.rg(probs) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy { probs, target, eps },
            rg,
        ))
    }

    /// Records a fused op whose forward value the caller computed.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Accumulates `d loss / d param` into `grads` (`+=`, never reset here).
    pub fn backward(&self, loss: NodeId, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                grads.get_mut(pid).add_assign(&g);
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut adj[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `accumulate` but builds the contribution in place.
    fn accumulate_with(
        &self,
        adj: &mut [Option<Tensor>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.rg(id) {
            return;
        }
        let slot = &mut adj[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(id)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("op node without value");
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                self.accumulate_with(adj, *a, |da| {
                    for i in 0..n {
                        for l in 0..k {
                            let brow = &bv.data()[l * m..(l + 1) * m];
                            let grow = &g.data()[i * m..(i + 1) * m];
                            da[i * k + l] += brow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate_with(adj, *b, |db| {
                    for i in 0..n {
                        let grow = &g.data()[i * m..(i + 1) * m];
                        for l in 0..k {
                            let a_il = av.data()[i * k + l];
                            for (d, gv) in db[l * m..(l + 1) * m].iter_mut().zip(grow) {
                                *d += a_il * gv;
                            }
                        }
                    }
                });
            }
            Op::MatVec(w, x) => self.matvec_backward(*w, *x, g.data(), adj),
            Op::Linear { terms, bias } => {
                for &(w, x) in terms {
                    self.matvec_backward(w, x, g.data(), adj);
                }
                if let Some(b) = bias {
                    self.accumulate(adj, *b, g.clone());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(adj, *a, |d| {
                    for ((d, gv), y) in d.iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * y;
                    }
                });
                self.accumulate_with(adj, *b, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, alpha) => self.accumulate(adj, *a, g.map(|x| alpha * x)),
            Op::Shift(a, s) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *s, Tensor::scalar(g.sum()));
            }
            Op::Concat { inputs, axis } => {
                let ndim = out.ndim();
                if ndim == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &i in inputs {
                        let n = self.value(i).len();
                        let part = g.data()[offset..offset + n].to_vec();
                        self.accumulate(adj, i, Tensor::from_parts(self.shape(i).to_vec(), part));
                        offset += n;
                    }
                } else {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut col0 = 0;
                    for &i in inputs {
                        let c = self.value(i).cols();
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g.data()[r * total + col0..r * total + col0 + c]);
                        }
                        self.accumulate(adj, i, Tensor::from_parts(vec![rows, c], part));
                        col0 += c;
                    }
                }
            }
            Op::Stack(rows) => {
                for (r, &i) in rows.iter().enumerate() {
                    self.accumulate(adj, i, Tensor::vector(g.row(r).to_vec()));
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Relu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(adj, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(adj, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let data = g.data().iter().zip(av.data()).map(|(gv, x)| gv / x).collect();
                self.accumulate(adj, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::Softmax { input, axis } => {
                let grad_in = softmax_backward(out, g, out.ndim(), *axis);
                self.accumulate(adj, *input, grad_in);
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(adj, *input, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(adj, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item() / n;
                self.accumulate(adj, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(adj, *a, bv.map(|y| gv * y));
                self.accumulate(adj, *b, av.map(|x| gv * x));
            }
            Op::SumSquares(a) => {
                let gv = g.item();
                self.accumulate(adj, *a, self.value(*a).map(|x| 2.0 * gv * x));
            }
            Op::BinaryCrossEntropy { probs, target, eps } => {
                let gv = g.item();
                let (pv, yv) = (self.value(*probs), self.value(*target));
                let dp = pv
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            gv * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                self.accumulate(adj, *probs, Tensor::from_parts(pv.shape().to_vec(), dp));
                let dy = pv
                    .data()
                    .iter()
                    .map(|&p| {
                        let p = p.clamp(*eps, 1.0 - eps);
                        gv * ((1.0 - p).ln() - p.ln())
                    })
                    .collect();
                self.accumulate(adj, *target, Tensor::from_parts(yv.shape().to_vec(), dy));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let mut sink = GradSink {
                    inputs,
                    shapes: inputs.iter().map(|&i| self.shape(i)).collect(),
                    needs: inputs.iter().map(|&i| self.rg(i)).collect(),
                    adj,
                };
                op.backward(&values, out, g, &mut sink);
            }
        }
    }

    fn matvec_backward(&self, w: NodeId, x: NodeId, g: &[f64], adj: &mut [Option<Tensor>]) {
        let (wv, xv) = (self.value(w), self.value(x));
        let cols = wv.cols();
        self.accumulate_with(adj, w, |dw| outer_acc(dw, cols, g, xv.data()));
        self.accumulate_with(adj, x, |dx| matvec_t_acc(wv.data(), cols, g, dx));
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, ndim: usize, axis: usize) -> Tensor {
    let slice_grad = |ys: &[f64], gs: &[f64], out: &mut [f64]| {
        let dotp: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((o, yv), gv) in out.iter_mut().zip(ys).zip(gs) {
            *o = yv * (gv - dotp);
        }
    };
    match (ndim, axis) {
        (1, _) => {
            let mut out = vec![0.0; y.len()];
            slice_grad(y.data(), g.data(), &mut out);
            Tensor::vector(out)
        }
        (2, 1) => {
            let (r, c) = (y.rows(), y.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                slice_grad(y.row(i), g.row(i), &mut out[i * c..(i + 1) * c]);
            }
            Tensor::from_parts(vec![r, c], out)
        }
        _ => {
            let (yt, gt) = (y.transpose(), g.transpose());
            softmax_backward(&yt, &gt, 2, 1).transpose()
        }
    }
}
