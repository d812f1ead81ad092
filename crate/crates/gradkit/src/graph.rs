//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is a fresh tape per forward pass: every op appends a node with
//! its eagerly computed value and enough captured state to replay the chain
//! rule backwards. Parameters enter the tape as leaves tagged with their
//! [`ParamId`](crate::params::ParamId) so gradients can be routed back into
//! the owning [`ParamStore`](crate::params::ParamStore) after `backward`.
//!
//! Nodes reachable only from constants carry `needs_grad = false` and are
//! skipped during the backward sweep, which keeps no-grad passes (target
//! networks, detached encoders) at forward cost.

use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(pub(crate) usize);

/// Elementwise functions available as tape ops.
///
/// The first six are the layer activations; the rest are the scalar math the
/// loss builders need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Swish,
    Selu,
    Sigmoid,
    Exp,
    Ln,
    Neg,
    Square,
    Softplus,
}

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

impl UnaryFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            UnaryFn::Identity => x,
            UnaryFn::Relu => x.max(0.0),
            UnaryFn::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Swish => x * sigmoid(x),
            UnaryFn::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            }
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Exp => x.exp(),
            UnaryFn::Ln => x.ln(),
            UnaryFn::Neg => -x,
            UnaryFn::Square => x * x,
            UnaryFn::Softplus => softplus(x),
        }
    }

    /// Derivative at `x`.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            UnaryFn::Identity => 1.0,
            UnaryFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryFn::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            UnaryFn::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryFn::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            UnaryFn::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            UnaryFn::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            UnaryFn::Exp => x.exp(),
            UnaryFn::Ln => 1.0 / x,
            UnaryFn::Neg => -1.0,
            UnaryFn::Square => 2.0 * x,
            UnaryFn::Softplus => sigmoid(x),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

enum Op {
    LeafConst,
    LeafParam {
        store: u64,
        id: ParamId,
    },
    /// out = x . w^T, x: B x in, w: out x in
    MatMulNt {
        x: Node,
        w: Node,
    },
    /// out = x + row (1 x n broadcast over rows)
    AddRow {
        x: Node,
        row: Node,
    },
    /// out = x * row (1 x n broadcast over rows)
    MulRow {
        x: Node,
        row: Node,
    },
    Unary {
        x: Node,
        f: UnaryFn,
    },
    Add {
        a: Node,
        b: Node,
    },
    Sub {
        a: Node,
        b: Node,
    },
    Mul {
        a: Node,
        b: Node,
    },
    Scale {
        x: Node,
        c: f64,
    },
    AddScalar {
        x: Node,
    },
    /// columns of a followed by columns of b
    Concat {
        a: Node,
        b: Node,
    },
    NarrowCols {
        x: Node,
        start: usize,
    },
    SumAll {
        x: Node,
    },
    SumCols {
        x: Node,
    },
    /// out = x * s, s a 1x1 node broadcast everywhere
    MulScalarNode {
        x: Node,
        s: Node,
    },
    /// elementwise min; gradient follows the winning side (ties go to a)
    MinElem {
        a: Node,
        b: Node,
    },
    Clamp {
        x: Node,
        lo: f64,
        hi: f64,
    },
    /// train-mode batch normalization over columns; xhat and inv_std are
    /// captured during forward for the backward pass
    BatchNorm {
        x: Node,
        gamma: Node,
        beta: Node,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
}

struct NodeData {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape. Build the forward pass, call
/// [`Graph::backward`] on a scalar node, then read gradients off the leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Node {
        self.nodes.push(NodeData {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Node(self.nodes.len() - 1)
    }

    fn needs(&self, n: Node) -> bool {
        self.nodes[n.0].needs_grad
    }

    pub fn value(&self, n: Node) -> &Matrix {
        &self.nodes[n.0].value
    }

    /// Gradient of the last `backward` target with respect to `n`, if one was
    /// produced.
    pub fn grad(&self, n: Node) -> Option<&Matrix> {
        self.nodes[n.0].grad.as_ref()
    }

    pub fn constant(&mut self, m: Matrix) -> Node {
        self.push(m, Op::LeafConst, false)
    }

    /// Trainable leaf: the parameter's current value enters the tape and its
    /// gradient can later be collected back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Node {
        let value = store.value(id).clone();
        self.push(
            value,
            Op::LeafParam {
                store: store.store_id(),
                id,
            },
            true,
        )
    }

    /// Parameter value inserted as a constant (detached).
    pub fn param_const(&mut self, store: &ParamStore, id: ParamId) -> Node {
        self.constant(store.value(id).clone())
    }

    pub fn matmul_nt(&mut self, x: Node, w: Node) -> Node {
        let value = Matrix::gemm_nt(self.value(x), self.value(w));
        let needs = self.needs(x) || self.needs(w);
        self.push(value, Op::MatMulNt { x, w }, needs)
    }

    pub fn add_row(&mut self, x: Node, row: Node) -> Node {
        let (xr, xc) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, xc), "add_row width mismatch");
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..xr {
            let base = i * xc;
            for j in 0..xc {
                value.data_mut()[base + j] += r[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow { x, row }, needs)
    }

    pub fn mul_row(&mut self, x: Node, row: Node) -> Node {
        let (xr, xc) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, xc), "mul_row width mismatch");
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..xr {
            let base = i * xc;
            for j in 0..xc {
                value.data_mut()[base + j] *= r[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(value, Op::MulRow { x, row }, needs)
    }

    pub fn unary(&mut self, x: Node, f: UnaryFn) -> Node {
        let value = self.value(x).map(|v| f.eval(v));
        let needs = self.needs(x);
        self.push(value, Op::Unary { x, f }, needs)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), 1.0);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -1.0);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let bb = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(bb.iter()) {
            *v *= w;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Node {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: Node, c: f64) -> Node {
        let value = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar { x }, needs)
    }

    pub fn concat(&mut self, a: Node, b: Node) -> Node {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        assert_eq!(ar, br, "concat batch mismatch: {} vs {}", ar, br);
        let mut value = Matrix::zeros(ar, ac + bc);
        for i in 0..ar {
            let dst = value.data_mut();
            let base = i * (ac + bc);
            dst[base..base + ac].copy_from_slice(self.nodes[a.0].value.row(i));
        }
        for i in 0..ar {
            let dst = value.data_mut();
            let base = i * (ac + bc) + ac;
            dst[base..base + bc].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Concat { a, b }, needs)
    }

    pub fn narrow_cols(&mut self, x: Node, start: usize, len: usize) -> Node {
        let (r, c) = self.value(x).shape();
        assert!(start + len <= c, "narrow_cols out of range");
        let mut value = Matrix::zeros(r, len);
        for i in 0..r {
            let src = self.nodes[x.0].value.row(i)[start..start + len].to_vec();
            value.data_mut()[i * len..(i + 1) * len].copy_from_slice(&src);
        }
        let needs = self.needs(x);
        self.push(value, Op::NarrowCols { x, start }, needs)
    }

    pub fn sum_all(&mut self, x: Node) -> Node {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll { x }, needs)
    }

    /// Row-wise sum: B x n -> B x 1.
    pub fn sum_cols(&mut self, x: Node) -> Node {
        let (r, c) = self.value(x).shape();
        let mut value = Matrix::zeros(r, 1);
        for i in 0..r {
            value.data_mut()[i] = self.nodes[x.0].value.row(i).iter().sum();
        }
        let _ = c;
        let needs = self.needs(x);
        self.push(value, Op::SumCols { x }, needs)
    }

    pub fn mean_all(&mut self, x: Node) -> Node {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn mul_scalar_node(&mut self, x: Node, s: Node) -> Node {
        assert_eq!(self.value(s).shape(), (1, 1), "scalar node must be 1x1");
        let sv = self.value(s).get(0, 0);
        let value = self.value(x).map(|v| v * sv);
        let needs = self.needs(x) || self.needs(s);
        self.push(value, Op::MulScalarNode { x, s }, needs)
    }

    pub fn min_elem(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "min shape");
        let bb = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(bb.iter()) {
            *v = v.min(*w);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MinElem { a, b }, needs)
    }

    pub fn clamp(&mut self, x: Node, lo: f64, hi: f64) -> Node {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(value, Op::Clamp { x, lo, hi }, needs)
    }

    /// Train-mode batch normalization using the batch's own statistics
    /// (biased variance). Returns the normalized-and-affine output plus the
    /// per-column batch mean and variance so the caller can maintain moving
    /// statistics.
    ///
    /// Requires batch >= 2; with a single row the variance is undefined.
    pub fn batch_norm_train(
        &mut self,
        x: Node,
        gamma: Node,
        beta: Node,
        eps: f64,
    ) -> (Node, Vec<f64>, Vec<f64>) {
        let (rows, cols) = self.value(x).shape();
        assert!(rows >= 2, "batch_norm_train requires batch >= 2");
        assert_eq!(self.value(gamma).shape(), (1, cols));
        assert_eq!(self.value(beta).shape(), (1, cols));

        let xv = self.value(x);
        let mut mean = vec![0.0; cols];
        for i in 0..rows {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += xv.get(i, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for (j, v) in var.iter_mut().enumerate() {
                let d = xv.get(i, j) - mean[j];
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                xhat.set(i, j, (xv.get(i, j) - mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, g[j] * xhat.get(i, j) + b[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        );
        (node, mean, var)
    }

    /// Reverse sweep from `loss` (must be 1x1). Populates gradients on every
    /// node that needs them; leaves of constant-only subgraphs are skipped.
    pub fn backward(&mut self, loss: Node) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward target must be a scalar node"
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
    }

    fn ensure_grad(&mut self, n: Node) -> &mut Matrix {
        let shape = self.nodes[n.0].value.shape();
        self.nodes[n.0]
            .grad
            .get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    fn add_grad(&mut self, n: Node, delta: &Matrix) {
        if !self.needs(n) {
            return;
        }
        self.ensure_grad(n).add_scaled(delta, 1.0);
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) {
        // Ops capture enough forward state that each arm only reads values.
        match &self.nodes[idx].op {
            Op::LeafConst | Op::LeafParam { .. } => {}
            Op::MatMulNt { x, w } => {
                let (x, w) = (*x, *w);
                if self.needs(x) {
                    let gx = Matrix::gemm_nn(g, &self.nodes[w.0].value);
                    self.add_grad(x, &gx);
                }
                if self.needs(w) {
                    let shape = self.nodes[w.0].value.shape();
                    let mut gw = self.nodes[w.0]
                        .grad
                        .take()
                        .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
                    // gw += g^T . x
                    let xv = std::mem::replace(&mut self.nodes[x.0].value, Matrix::zeros(0, 0));
                    Matrix::gemm_tn_acc(g, &xv, &mut gw);
                    self.nodes[x.0].value = xv;
                    self.nodes[w.0].grad = Some(gw);
                }
            }
            Op::AddRow { x, row } => {
                let (x, row) = (*x, *row);
                self.add_grad(x, g);
                if self.needs(row) {
                    let (r, c) = g.shape();
                    let mut gr = Matrix::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            gr.data_mut()[j] += g.get(i, j);
                        }
                    }
                    self.add_grad(row, &gr);
                }
            }
            Op::MulRow { x, row } => {
                let (x, row) = (*x, *row);
                let (r, c) = g.shape();
                if self.needs(x) {
                    let rv = self.nodes[row.0].value.data().to_vec();
                    let mut gx = g.clone();
                    for i in 0..r {
                        for j in 0..c {
                            let v = gx.get(i, j) * rv[j];
                            gx.set(i, j, v);
                        }
                    }
                    self.add_grad(x, &gx);
                }
                if self.needs(row) {
                    let mut gr = Matrix::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            gr.data_mut()[j] += g.get(i, j) * self.nodes[x.0].value.get(i, j);
                        }
                    }
                    self.add_grad(row, &gr);
                }
            }
            Op::Unary { x, f } => {
                let (x, f) = (*x, *f);
                if self.needs(x) {
                    let mut gx = g.clone();
                    for (gv, xv) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data().iter())
                    {
                        *gv *= f.deriv(*xv);
                    }
                    self.add_grad(x, &gx);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                if self.needs(b) {
                    let gb = g.map(|v| -v);
                    self.add_grad(b, &gb);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let mut ga = g.clone();
                    for (gv, bv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[b.0].value.data().iter())
                    {
                        *gv *= bv;
                    }
                    self.add_grad(a, &ga);
                }
                if self.needs(b) {
                    let mut gb = g.clone();
                    for (gv, av) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.data().iter())
                    {
                        *gv *= av;
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let gx = g.map(|v| v * c);
                    self.add_grad(x, &gx);
                }
            }
            Op::AddScalar { x } => {
                let x = *x;
                self.add_grad(x, g);
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let ac = self.nodes[a.0].value.cols();
                let bc = self.nodes[b.0].value.cols();
                let rows = g.rows();
                if self.needs(a) {
                    let mut ga = Matrix::zeros(rows, ac);
                    for i in 0..rows {
                        ga.data_mut()[i * ac..(i + 1) * ac].copy_from_slice(&g.row(i)[..ac]);
                    }
                    self.add_grad(a, &ga);
                }
                if self.needs(b) {
                    let mut gb = Matrix::zeros(rows, bc);
                    for i in 0..rows {
                        gb.data_mut()[i * bc..(i + 1) * bc].copy_from_slice(&g.row(i)[ac..]);
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::NarrowCols { x, start } => {
                let (x, start) = (*x, *start);
                if self.needs(x) {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let len = g.cols();
                    let mut gx = Matrix::zeros(r, c);
                    for i in 0..r {
                        gx.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(g.row(i));
                    }
                    self.add_grad(x, &gx);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if self.needs(x) {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let gx = Matrix::full(r, c, g.get(0, 0));
                    self.add_grad(x, &gx);
                }
            }
            Op::SumCols { x } => {
                let x = *x;
                if self.needs(x) {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        gx.data_mut()[i * c..(i + 1) * c].fill(gi);
                    }
                    self.add_grad(x, &gx);
                }
            }
            Op::MulScalarNode { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s.0].value.get(0, 0);
                if self.needs(x) {
                    let gx = g.map(|v| v * sv);
                    self.add_grad(x, &gx);
                }
                if self.needs(s) {
                    let mut acc = 0.0;
                    for (gv, xv) in g.data().iter().zip(self.nodes[x.0].value.data().iter()) {
                        acc += gv * xv;
                    }
                    let gs = Matrix::from_vec(1, 1, vec![acc]);
                    self.add_grad(s, &gs);
                }
            }
            Op::MinElem { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let mut ga = g.clone();
                    for ((gv, x), y) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(av.data().iter())
                        .zip(bv.data().iter())
                    {
                        if x > y {
                            *gv = 0.0;
                        }
                    }
                    self.add_grad(a, &ga);
                }
                if self.needs(b) {
                    let mut gb = g.clone();
                    for ((gv, x), y) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(av.data().iter())
                        .zip(bv.data().iter())
                    {
                        if x <= y {
                            *gv = 0.0;
                        }
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                if self.needs(x) {
                    let mut gx = g.clone();
                    for (gv, xv) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data().iter())
                    {
                        if *xv <= lo || *xv >= hi {
                            *gv = 0.0;
                        }
                    }
                    self.add_grad(x, &gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (xhat, inv_std) = match &self.nodes[idx].op {
                    Op::BatchNorm { xhat, inv_std, .. } => (xhat.clone(), inv_std.clone()),
                    _ => unreachable!(),
                };
                let (rows, cols) = xhat.shape();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                if self.needs(beta) {
                    let mut gb = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gb.data_mut()[j] += g.get(i, j);
                        }
                    }
                    self.add_grad(beta, &gb);
                }
                if self.needs(gamma) {
                    let mut gg = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.add_grad(gamma, &gg);
                }
                if self.needs(x) {
                    // dx = gamma*inv_std * (g - mean(g) - xhat * mean(g*xhat))
                    let n = rows as f64;
                    let mut mean_g = vec![0.0; cols];
                    let mut mean_gx = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            mean_g[j] += g.get(i, j);
                            mean_gx[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    for j in 0..cols {
                        mean_g[j] /= n;
                        mean_gx[j] /= n;
                    }
                    let mut gx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let v = gv[j]
                                * inv_std[j]
                                * (g.get(i, j) - mean_g[j] - xhat.get(i, j) * mean_gx[j]);
                            gx.set(i, j, v);
                        }
                    }
                    self.add_grad(x, &gx);
                }
            }
        }
    }

    /// Accumulate leaf gradients into the matching store (`store.grad += leaf.grad`).
    /// Leaves belonging to other stores are left alone.
    pub fn collect_grads(&self, store: &mut ParamStore) {
        for n in &self.nodes {
            if let Op::LeafParam { store: sid, id } = n.op {
                if sid == store.store_id() {
                    if let Some(g) = &n.grad {
                        store.grad_mut(id).add_scaled(g, 1.0);
                    }
                }
            }
        }
    }

    /// True if every node value produced so far is finite.
    pub fn all_values_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }
}
