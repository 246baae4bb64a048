//! Define-by-run expression graph with reverse-mode gradients.
//!
//! Every builder call evaluates its node immediately, so loss code reads like
//! ordinary array code. The recorded node list is also a replayable program:
//! [`Graph::forward_eval`] re-runs it with new input bindings.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter gradients keyed by parameter handle.
pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Param,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Broadcast { rows: usize, cols: usize },
    /// `x + 1 b` for a `1 x c` row `b`.
    AddRow,
    Transpose,
    Relu,
    /// Heaviside `x > 0`; zero derivative everywhere.
    Step,
    Exp,
    Log,
    Square,
    Sqrt { eps: f64 },
    Sum,
    ColSums,
    RowSums,
    LogSoftmax,
    SqDist,
    GaussMix(Vec<f64>),
    Fourier(f64),
    Center,
    AddDiag(f64),
    Solve,
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Broadcast { .. } => "broadcast",
            Op::AddRow => "add_row",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt { .. } => "sqrt",
            Op::Sum => "sum",
            Op::ColSums => "col_sums",
            Op::RowSums => "row_sums",
            Op::LogSoftmax => "log_softmax",
            Op::SqDist => "sq_dist",
            Op::GaussMix(_) => "gauss_mix",
            Op::Fourier(_) => "fourier",
            Op::Center => "center",
            Op::AddDiag(_) => "add_diag",
            Op::Solve => "solve",
            Op::Detach => "detach",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Forward by-product reused in the backward pass (derivative tables,
    /// Cholesky factors).
    aux: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
}

fn label(index: usize, op: &Op) -> String {
    format!("node #{index} ({})", op.name())
}

fn dim_err(index: usize, op: &Op, msg: impl Into<String>) -> Error {
    Error::Dimension {
        node: label(index, op),
        msg: msg.into(),
    }
}

fn same_shape(index: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(
            index,
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn square(index: usize, op: &Op, a: &Tensor) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(dim_err(index, op, format!("expected square matrix, got {:?}", a.shape())));
    }
    Ok(a.rows())
}

/// Evaluates one operation. Leaves are handled by the caller.
fn evaluate(index: usize, op: &Op, x: &[&Tensor]) -> Result<(Tensor, Option<Tensor>)> {
    let out = match op {
        Op::Input | Op::Constant | Op::Param => unreachable!("leaves are not evaluated"),
        Op::MatMul { ta, tb } => {
            let k1 = if *ta { x[0].rows() } else { x[0].cols() };
            let k2 = if *tb { x[1].cols() } else { x[1].rows() };
            if k1 != k2 {
                return Err(dim_err(
                    index,
                    op,
                    format!("inner dimensions {:?} x {:?} do not agree", x[0].shape(), x[1].shape()),
                ));
            }
            linalg::matmul(x[0], *ta, x[1], *tb)
        }
        Op::Add => {
            same_shape(index, op, x[0], x[1])?;
            x[0].add(x[1])
        }
        Op::Sub => {
            same_shape(index, op, x[0], x[1])?;
            x[0].sub(x[1])
        }
        Op::Mul => {
            same_shape(index, op, x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a * b)
        }
        Op::Scale(s) => x[0].scale(*s),
        Op::AddScalar(s) => x[0].map(|v| v + s),
        Op::Broadcast { rows, cols } => {
            let (r, c) = x[0].dims();
            let ok = (r == 1 || r == *rows) && (c == 1 || c == *cols);
            if !ok {
                return Err(dim_err(
                    index,
                    op,
                    format!("cannot broadcast {:?} to [{rows}, {cols}]", x[0].shape()),
                ));
            }
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..*rows {
                let src = x[0].row(if r == 1 { 0 } else { i });
                if c == 1 {
                    out.extend(std::iter::repeat_n(src[0], *cols));
                } else {
                    out.extend_from_slice(src);
                }
            }
            Tensor::from_vec(*rows, *cols, out)?
        }
        Op::AddRow => {
            if x[1].rows() != 1 || x[1].cols() != x[0].cols() {
                return Err(dim_err(
                    index,
                    op,
                    format!("bias {:?} does not match rows of {:?}", x[1].shape(), x[0].shape()),
                ));
            }
            let mut out = x[0].clone();
            let c = x[0].cols();
            let b = x[1].data();
            for row in out.data_mut().chunks_exact_mut(c.max(1)) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
            out
        }
        Op::Transpose => x[0].transpose(),
        Op::Relu => x[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Step => x[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::Exp => x[0].map(f64::exp),
        Op::Log => x[0].map(f64::ln),
        Op::Square => x[0].map(|v| v * v),
        Op::Sqrt { .. } => x[0].map(|v| v.max(0.0).sqrt()),
        Op::Sum => Tensor::scalar(x[0].sum()),
        Op::ColSums => x[0].column_sums(),
        Op::RowSums => {
            let (r, _) = x[0].dims();
            let data = (0..r).map(|i| x[0].row(i).iter().sum()).collect();
            Tensor::from_vec(r, 1, data)?
        }
        Op::LogSoftmax => {
            let (r, c) = x[0].dims();
            let mut out = x[0].clone();
            for i in 0..r {
                let row = &x[0].row(i);
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for j in 0..c {
                    out.set(i, j, row[j] - lse);
                }
            }
            out
        }
        Op::SqDist => {
            if x[0].cols() != x[1].cols() {
                return Err(dim_err(
                    index,
                    op,
                    format!("feature dimensions {:?} and {:?} differ", x[0].shape(), x[1].shape()),
                ));
            }
            sq_dist(x[0], x[1])
        }
        Op::GaussMix(coeffs) => {
            let t = coeffs.len() as f64;
            let mut out = x[0].clone();
            let mut deriv = x[0].clone();
            for (o, d) in out.data_mut().iter_mut().zip(deriv.data_mut()) {
                let v = *o;
                let (mut s, mut ds) = (0.0, 0.0);
                for &c in coeffs {
                    let e = (-c * v).exp();
                    s += e;
                    ds -= c * e;
                }
                *o = s / t;
                *d = ds / t;
            }
            return Ok((out, Some(deriv)));
        }
        Op::Fourier(scale) => {
            let (r, m) = x[0].dims();
            let mut out = Tensor::zeros(r, 2 * m);
            for i in 0..r {
                for j in 0..m {
                    let v = x[0].get(i, j);
                    out.set(i, j, scale * v.cos());
                    out.set(i, m + j, scale * v.sin());
                }
            }
            out
        }
        Op::Center => {
            square(index, op, x[0])?;
            center(x[0])
        }
        Op::AddDiag(rho) => {
            let n = square(index, op, x[0])?;
            let mut out = x[0].clone();
            for i in 0..n {
                out.set(i, i, out.get(i, i) + rho);
            }
            out
        }
        Op::Solve => {
            let n = square(index, op, x[0])?;
            if x[1].rows() != n {
                return Err(dim_err(
                    index,
                    op,
                    format!("system {:?} vs right-hand side {:?}", x[0].shape(), x[1].shape()),
                ));
            }
            let l = linalg::cholesky(x[0]).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{}: {m}", label(index, op))),
                other => other,
            })?;
            let sol = linalg::cholesky_solve(&l, x[1]);
            return Ok((sol, Some(l)));
        }
        Op::Detach => x[0].clone(),
    };
    Ok((out, None))
}

pub(crate) fn sq_dist(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, _) = a.dims();
    let (m, _) = b.dims();
    let na: Vec<f64> = (0..n).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = (0..m).map(|j| b.row(j).iter().map(|v| v * v).sum()).collect();
    let mut out = linalg::matmul(a, false, b, true);
    for i in 0..n {
        for j in 0..m {
            let d = na[i] + nb[j] - 2.0 * out.get(i, j);
            out.set(i, j, d.max(0.0));
        }
    }
    out
}

/// `C K C` with `C = I - 11^T / n`, computed from row, column and grand means.
pub(crate) fn center(k: &Tensor) -> Tensor {
    let n = k.rows();
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / nf).collect();
    let col_mean: Vec<f64> = k.column_sums().data().iter().map(|s| s / nf).collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    let mut out = k.clone();
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, k.get(i, j) - row_mean[i] - col_mean[j] + grand);
        }
    }
    out
}

impl Graph {
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

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims()
    }

    /// Parameters referenced by this graph.
    pub fn parameters(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    fn leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let index = self.nodes.len();
        if !value.is_matrix() {
            return Err(dim_err(index, &op, format!("expected rank-2 tensor, got {:?}", value.shape())));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} holds NaN or Inf", label(index, &op))));
        }
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            aux: None,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    /// A bindable input. Inputs take part in gradient bookkeeping so that
    /// derivatives with respect to data can be read back.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(Op::Input, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(Op::Constant, value, false)
    }

    /// Trainable leaf for a stored parameter (one node per parameter).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.param_node(store, id, store.get(id).trainable)
    }

    /// Parameter treated as a constant: it never receives gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.param_node(store, id, false)
    }

    fn param_node(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Result<NodeId> {
        if let Some(&node) = self.params.get(&id) {
            if self.nodes[node.0].requires_grad != trainable {
                return Err(contract(format!(
                    "parameter `{}` already added with a different trainable flag",
                    store.get(id).name
                )));
            }
            return Ok(node);
        }
        let node = self.leaf(Op::Param, store.tensor(id).clone(), trainable)?;
        self.params.insert(id, node);
        Ok(node)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let index = self.nodes.len();
        let (value, aux) = {
            let xs: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            evaluate(index, &op, &xs)?
        };
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} produced NaN or Inf", label(index, &op))));
        }
        let requires_grad = !matches!(op, Op::Detach | Op::Step)
            && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { ta: false, tb: false }, vec![a, b])
    }

    /// `op(a) * op(b)` with optional transposes and no copies.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        self.push(Op::MatMul { ta, tb }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(s), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(s), vec![a])
    }

    /// Repeats a `1 x c`, `r x 1` or `1 x 1` node to `rows x cols`.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.push(Op::Broadcast { rows, cols }, vec![a])
    }

    /// `x + b` with a `1 x c` bias row repeated over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow, vec![x, bias])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![a])
    }

    /// Indicator of positive entries. Treated as piecewise constant.
    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Step, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, vec![a])
    }

    /// `sqrt(max(a, 0))` whose derivative is taken as zero wherever
    /// `a <= eps`.
    pub fn sqrt_clamped(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::Sqrt { eps }, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 x c` row.
    pub fn col_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ColSums, vec![a])
    }

    /// Row sums as an `r x 1` column.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::RowSums, vec![a])
    }

    /// Row-wise log-softmax, shifted by the row maximum.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![a])
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::SqDist, vec![a, b])
    }

    /// Elementwise `mean_t exp(-c_t * x)`.
    pub fn gauss_mix(&mut self, a: NodeId, coeffs: Vec<f64>) -> Result<NodeId> {
        if coeffs.is_empty() {
            return Err(contract("gauss_mix needs at least one coefficient"));
        }
        self.push(Op::GaussMix(coeffs), vec![a])
    }

    /// `[cos(a), sin(a)] * scale`, concatenated along columns.
    pub fn fourier(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.push(Op::Fourier(scale), vec![a])
    }

    /// Double centering `C a C`.
    pub fn center(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Center, vec![a])
    }

    pub fn add_diag(&mut self, a: NodeId, rho: f64) -> Result<NodeId> {
        self.push(Op::AddDiag(rho), vec![a])
    }

    /// `a^{-1} b` for symmetric positive definite `a`.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Solve, vec![a, b])
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Detach, vec![a])
    }

    /// Re-runs the recorded program with new values for some inputs and
    /// returns the value of `root`. Parameters keep the values they had when
    /// the graph was built.
    pub fn forward_eval(&mut self, root: NodeId, bindings: &HashMap<NodeId, Tensor>) -> Result<Tensor> {
        for (id, t) in bindings {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| contract(format!("unknown node #{}", id.0)))?;
            if !matches!(node.op, Op::Input) {
                return Err(contract(format!("{} is not an input", label(id.0, &node.op))));
            }
            if node.value.shape() != t.shape() {
                return Err(dim_err(
                    id.0,
                    &node.op,
                    format!("bound shape {:?} differs from {:?}", t.shape(), node.value.shape()),
                ));
            }
            t.ensure_finite(&label(id.0, &node.op))?;
        }
        for (id, t) in bindings {
            self.nodes[id.0].value = t.clone();
        }
        for index in 0..=root.0 {
            if self.nodes[index].inputs.is_empty() {
                continue;
            }
            let (value, aux) = {
                let node = &self.nodes[index];
                let xs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                evaluate(index, &node.op, &xs)?
            };
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} produced NaN or Inf",
                    label(index, &self.nodes[index].op)
                )));
            }
            let node = &mut self.nodes[index];
            node.value = value;
            node.aux = aux;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Gradients of a scalar root with respect to every node that requires
    /// gradient.
    pub fn backward_nodes(&self, root: NodeId, seed: f64) -> Result<NodeGradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar root, {} has shape {:?}",
                label(root.0, &self.nodes[root.0].op),
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.rows(), rv.cols(), seed));

        for index in (0..=root.0).rev() {
            let node = &self.nodes[index];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[index].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let input_grads = self.vjp(node, &g, &needs);
            for ((input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[index] = Some(g);
        }
        Ok(NodeGradients { grads })
    }

    /// Gradients of a scalar root with respect to each trainable parameter in
    /// the graph. Parameters not connected to the root get zeros.
    pub fn backward(&self, root: NodeId, seed: f64) -> Result<Gradients> {
        let node_grads = self.backward_nodes(root, seed)?;
        let mut out = Gradients::new();
        for (&pid, &node) in &self.params {
            if !self.nodes[node.0].requires_grad {
                continue;
            }
            let (r, c) = self.nodes[node.0].value.dims();
            let g = node_grads
                .get(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(r, c));
            out.insert(pid, g);
        }
        Ok(out)
    }

    fn vjp(&self, node: &Node, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Constant | Op::Param | Op::Detach | Op::Step => vec![None; node.inputs.len()],
            Op::MatMul { ta, tb } => {
                let (a, b) = (x(0), x(1));
                let ga = needs[0].then(|| {
                    if *ta {
                        linalg::matmul(b, *tb, g, true)
                    } else {
                        linalg::matmul(g, false, b, !*tb)
                    }
                });
                let gb = needs[1].then(|| {
                    if *tb {
                        linalg::matmul(g, true, a, *ta)
                    } else {
                        linalg::matmul(a, !*ta, g, false)
                    }
                });
                vec![ga, gb]
            }
            Op::Add => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Op::Mul => vec![
                needs[0].then(|| g.zip_map(x(1), |a, b| a * b)),
                needs[1].then(|| g.zip_map(x(0), |a, b| a * b)),
            ],
            Op::Scale(s) => vec![Some(g.scale(*s))],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Broadcast { .. } => {
                let src = x(0);
                let (r, c) = src.dims();
                let red = match (r, c) {
                    (1, 1) => Tensor::scalar(g.sum()),
                    (1, _) => g.column_sums(),
                    (_, 1) => {
                        let data = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                        Tensor::from_vec(r, 1, data).expect("row sums")
                    }
                    _ => g.clone(),
                };
                vec![Some(red)]
            }
            Op::AddRow => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.column_sums())],
            Op::Transpose => vec![Some(g.transpose())],
            Op::Relu => vec![Some(g.zip_map(x(0), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Exp => vec![Some(g.zip_map(out, |a, b| a * b))],
            Op::Log => vec![Some(g.zip_map(x(0), |a, b| a / b))],
            Op::Square => vec![Some(g.zip_map(x(0), |a, b| 2.0 * a * b))],
            Op::Sqrt { eps } => {
                let eps = *eps;
                let mut r = g.clone();
                for ((rv, &xv), &ov) in r.data_mut().iter_mut().zip(x(0).data()).zip(out.data()) {
                    *rv = if xv > eps { *rv / (2.0 * ov) } else { 0.0 };
                }
                vec![Some(r)]
            }
            Op::Sum => {
                let (r, c) = x(0).dims();
                vec![Some(Tensor::full(r, c, g.item()))]
            }
            Op::ColSums => {
                let (r, c) = x(0).dims();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                }
                vec![Some(t)]
            }
            Op::RowSums => {
                let (r, c) = x(0).dims();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    t.data_mut()[i * c..(i + 1) * c].fill(gi);
                }
                vec![Some(t)]
            }
            Op::LogSoftmax => {
                let (r, c) = out.dims();
                let mut t = g.clone();
                for i in 0..r {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..c {
                        t.set(i, j, g.get(i, j) - out.get(i, j).exp() * gs);
                    }
                }
                vec![Some(t)]
            }
            Op::SqDist => {
                let (a, b) = (x(0), x(1));
                let ga = needs[0].then(|| {
                    let gb_ = linalg::matmul(g, false, b, false);
                    let mut t = a.clone();
                    let q = a.cols();
                    for i in 0..a.rows() {
                        let rs: f64 = g.row(i).iter().sum();
                        for k in 0..q {
                            t.set(i, k, 2.0 * (rs * a.get(i, k) - gb_.get(i, k)));
                        }
                    }
                    t
                });
                let gb = needs[1].then(|| {
                    let ga_ = linalg::matmul(g, true, a, false);
                    let cs = g.column_sums();
                    let mut t = b.clone();
                    let q = b.cols();
                    for j in 0..b.rows() {
                        for k in 0..q {
                            t.set(j, k, 2.0 * (cs.get(0, j) * b.get(j, k) - ga_.get(j, k)));
                        }
                    }
                    t
                });
                vec![ga, gb]
            }
            Op::GaussMix(_) => {
                let deriv = node.aux.as_ref().expect("gauss_mix derivative table");
                vec![Some(g.zip_map(deriv, |a, b| a * b))]
            }
            Op::Fourier(_) => {
                let (r, m) = x(0).dims();
                let mut t = Tensor::zeros(r, m);
                for i in 0..r {
                    for j in 0..m {
                        let v = -out.get(i, m + j) * g.get(i, j) + out.get(i, j) * g.get(i, m + j);
                        t.set(i, j, v);
                    }
                }
                vec![Some(t)]
            }
            Op::Center => vec![Some(center(g))],
            Op::AddDiag(_) => vec![Some(g.clone())],
            Op::Solve => {
                let l = node.aux.as_ref().expect("solve keeps its factor");
                let gb = linalg::cholesky_solve(l, g);
                let ga = needs[0].then(|| linalg::matmul(&gb, false, out, true).scale(-1.0));
                vec![ga, needs[1].then_some(gb)]
            }
        }
    }
}

/// Per-node gradients from [`Graph::backward_nodes`].
#[derive(Clone, Debug)]
pub struct NodeGradients {
    grads: Vec<Option<Tensor>>,
}

impl NodeGradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_relu_forward() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.scalar(y), 9.0);
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(-2.0)).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.scalar(y), 0.0);
    }

    #[test]
    fn affine_identity() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::identity(2)).unwrap();
        let b = g.constant(Tensor::zeros(1, 2)).unwrap();
        let x = g.input(Tensor::matrix(1, 2, &[1.0, 2.0])).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_row(xw, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn square_gradient_and_relu_kink() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&store, p).unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y, 1.0).unwrap()[&p].item(), 6.0);

        store.set_values(p, &[0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.backward(y, 1.0).unwrap()[&p].item(), 0.0);
    }

    #[test]
    fn unreachable_parameter_gets_zeros() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0));
        let b = store.add("b", Tensor::matrix(1, 2, &[1.0, 1.0]));
        let mut g = Graph::new();
        let x = g.param(&store, a).unwrap();
        let _unused = g.param(&store, b).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y, 1.0).unwrap();
        assert_eq!(grads[&b], Tensor::zeros(1, 2));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(g.backward(x, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3)).unwrap();
        let b = g.input(Tensor::zeros(2, 3)).unwrap();
        match g.matmul(a, b) {
            Err(Error::Dimension { node, .. }) => assert!(node.contains("matmul")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        assert!(matches!(g.input(Tensor::scalar(f64::NAN)), Err(Error::Numeric(_))));
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 2, &[0.3, -1.2, 2.0, 0.7])).unwrap();
        let e = g.exp(x).unwrap();
        let l = g.log_softmax(e).unwrap();
        let s = g.sum(l).unwrap();
        let mut bind = HashMap::new();
        bind.insert(x, Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let first = g.forward_eval(s, &bind).unwrap();
        let second = g.forward_eval(s, &bind).unwrap();
        assert_eq!(first.item().to_bits(), second.item().to_bits());
        bind.insert(x, Tensor::zeros(1, 2));
        assert!(matches!(g.forward_eval(s, &bind), Err(Error::Dimension { .. })));
    }
}
