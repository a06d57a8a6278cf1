//! The computation record: a Wengert list of primitive operations.
//!
//! Every operation on a [`Graph`] evaluates eagerly and appends a node, so the
//! graph doubles as the forward pass and as the tape replayed in reverse by
//! [`Graph::backward`]. Nodes only ever reference earlier nodes, which keeps
//! the record acyclic by construction. [`Graph::replay`] re-evaluates the
//! whole record against fresh input tensors.

use std::sync::LazyLock;

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a binary elementwise op lines up its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Left operand is a single value.
    ScalarA,
    ScalarB,
    /// Left operand is one row repeated over the right operand's rows.
    RowA,
    RowB,
}

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Param(ParamId),
    Constant,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Max(Var, usize),
    Embedding(Var, Vec<usize>),
    WeightedSum(Vec<Var>, Vec<f64>),
    Sum(Var),
    Pick(Var, usize, usize),
    Unfold(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Max(..) => "max",
            Op::Embedding(..) => "embedding",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Sum(_) => "sum",
            Op::Pick(..) => "pick",
            Op::Unfold(..) => "unfold",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Max(a, _)
            | Op::Embedding(a, _)
            | Op::Sum(a)
            | Op::Pick(a, _, _)
            | Op::Unfold(a, _) => vec![*a],
            Op::Concat(parts, _) | Op::WeightedSum(parts, _) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    /// Empty for parameter leaves, whose values live in the [`ParamSet`].
    value: Tensor,
    /// Argmax positions for `Max` nodes.
    aux: Vec<usize>,
    requires_grad: bool,
}

static NO_PARAMS: LazyLock<ParamSet> = LazyLock::new(ParamSet::new);

/// A computation record bound to a parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    input_shapes: Vec<Vec<usize>>,
}

impl Graph<'static> {
    /// A graph without parameters; only inputs and constants are leaves.
    pub fn standalone() -> Self {
        Graph::new(&NO_PARAMS)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            input_shapes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => &node.value,
        }
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<usize>) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let requires_grad = op.operands().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input leaf; its position in `replay` inputs is its
    /// creation order among inputs.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(DiffError::NonFinite { op: "input" });
        }
        let slot = self.input_shapes.len();
        self.input_shapes.push(t.shape().to_vec());
        self.nodes.push(Node {
            op: Op::Input(slot),
            value: t,
            aux: vec![],
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(DiffError::NonFinite { op: "constant" });
        }
        self.nodes.push(Node {
            op: Op::Constant,
            value: t,
            aux: vec![],
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// The leaf for a parameter tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Tensor::zeros(&[0]),
            aux: vec![],
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn apply(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = {
            let get = |v: Var| self.value(v);
            eval(&op, &get)?
        };
        self.push(op, value, aux)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if (ra, ca) == (rb, cb) {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::ScalarB)
        } else if ta.numel() == 1 {
            Ok(Broadcast::ScalarA)
        } else if rb == 1 && cb == ca {
            Ok(Broadcast::RowB)
        } else if ra == 1 && ca == cb {
            Ok(Broadcast::RowA)
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum; a scalar or a single row broadcasts over the other operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("add", a, b)?;
        self.apply(Op::Add(a, b, bc))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("sub", a, b)?;
        self.apply(Op::Sub(a, b, bc))
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("mul", a, b)?;
        self.apply(Op::Mul(a, b, bc))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.numel() != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let value = Tensor::from_parts(vec![rows, cols], t.data().to_vec());
        self.push(Op::Reshape(a), value, vec![])
    }

    /// Concatenation along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::InvalidArgument(
                "concat needs at least one part and axis 0 or 1".into(),
            ));
        }
        self.apply(Op::Concat(parts.to_vec(), axis))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > r || len == 0 {
            return Err(DiffError::InvalidArgument(format!(
                "row slice {start}..{} out of 0..{r}",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(
            Op::SliceRows(a, start),
            Tensor::from_parts(vec![len, c], data),
            vec![],
        )
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if start + len > c || len == 0 {
            return Err(DiffError::InvalidArgument(format!(
                "column slice {start}..{} out of 0..{c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        self.push(
            Op::SliceCols(a, start),
            Tensor::from_parts(vec![r, len], data),
            vec![],
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax(a))
    }

    /// Maximum along `axis`: 0 reduces over rows (max-over-time for a
    /// `[time, features]` matrix), 1 over columns. Ties resolve to the first
    /// maximal element, which is where the gradient is routed.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(DiffError::InvalidArgument("max axis must be 0 or 1".into()));
        }
        self.apply(Op::Max(a, axis))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(DiffError::InvalidArgument("embedding of no ids".into()));
        }
        self.apply(Op::Embedding(table, ids.to_vec()))
    }

    /// `sum_i weights[i] * parts[i]` over equally shaped parts.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: &[f64]) -> Result<Var> {
        if parts.is_empty() || parts.len() != weights.len() {
            return Err(DiffError::InvalidArgument(
                "weighted_sum needs one weight per part".into(),
            ));
        }
        self.apply(Op::WeightedSum(parts.to_vec(), weights.to_vec()))
    }

    /// Sum of all elements, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Element `(row, col)` as a `1 x 1` tensor.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        self.apply(Op::Pick(a, row, col))
    }

    /// Sliding windows over rows: row `t` of the result is rows `t..t + width`
    /// of `a` laid end to end. A convolution over time is `unfold` followed by
    /// a matmul with the flattened filter bank.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        self.apply(Op::Unfold(a, width))
    }

    /// Nodes whose values no other node consumes.
    pub fn sinks(&self) -> Vec<Var> {
        let mut used = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for v in n.op.operands() {
                used[v.0] = true;
            }
        }
        (0..self.nodes.len())
            .filter(|&i| !used[i])
            .map(Var)
            .collect()
    }

    /// Shapes of the input leaves in slot order.
    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    /// Re-evaluates the record on new input tensors and returns the values of
    /// all sink nodes, in node order.
    pub fn replay(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        if inputs.len() != self.input_shapes.len() {
            return Err(DiffError::InputCount {
                expected: self.input_shapes.len(),
                got: inputs.len(),
            });
        }
        for (t, shape) in inputs.iter().zip(&self.input_shapes) {
            if t.shape() != shape.as_slice() {
                return Err(DiffError::ShapeMismatch {
                    op: "replay",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(DiffError::NonFinite { op: "input" });
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input(slot) => inputs[*slot].clone(),
                Op::Param(_) => Tensor::zeros(&[0]),
                Op::Constant => node.value.clone(),
                Op::Reshape(a) => {
                    let src = resolve(&values, &self.nodes, self.params, *a);
                    Tensor::from_parts(node.value.shape().to_vec(), src.data().to_vec())
                }
                Op::SliceRows(a, start) => {
                    let src = resolve(&values, &self.nodes, self.params, *a);
                    let (_, c) = src.dims2()?;
                    let len = node.value.shape()[0];
                    Tensor::from_parts(
                        vec![len, c],
                        src.data()[start * c..(start + len) * c].to_vec(),
                    )
                }
                Op::SliceCols(a, start) => {
                    let src = resolve(&values, &self.nodes, self.params, *a);
                    let (r, c) = src.dims2()?;
                    let len = node.value.shape()[1];
                    let mut data = Vec::with_capacity(r * len);
                    for i in 0..r {
                        data.extend_from_slice(&src.data()[i * c + start..i * c + start + len]);
                    }
                    Tensor::from_parts(vec![r, len], data)
                }
                op => {
                    let get = |v: Var| resolve(&values, &self.nodes, self.params, v);
                    let (t, _) = eval(op, &get)?;
                    if !t.is_finite() {
                        return Err(DiffError::NonFinite { op: op.name() });
                    }
                    t
                }
            };
            values.push(v);
        }
        Ok(self
            .sinks()
            .into_iter()
            .map(|v| resolve(&values, &self.nodes, self.params, v).clone())
            .collect())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(DiffError::Unreachable);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        let mut param_grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut input_grads: Vec<Tensor> =
            self.input_shapes.iter().map(|s| Tensor::zeros(s)).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input(slot) => {
                    add_into(input_grads[*slot].data_mut(), &g);
                }
                Op::Param(id) => {
                    add_into(param_grads[id.0].data_mut(), &g);
                }
                Op::Constant => {}
                op => self.propagate(op, node, &g, &mut grads)?,
            }
        }
        Ok(Gradients {
            params: param_grads,
            inputs: input_grads,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let out = &node.value;
        match op {
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ra, rb) = (self.value(*a).numel(), self.value(*b).numel());
                if self.needs(*a) {
                    let ga = acc(grads, *a, ra);
                    reduce_broadcast(ga, g, *bc, true, out.dims2()?.1, 1.0);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, rb);
                    reduce_broadcast(gb, g, *bc, false, out.dims2()?.1, sign);
                }
            }
            Op::Mul(a, b, bc) => {
                let cols = out.dims2()?.1;
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let prod: Vec<f64> = (0..g.len())
                        .map(|k| g[k] * tb.data()[operand_index(*bc, false, k, cols)])
                        .collect();
                    let ga = acc(grads, *a, ta.numel());
                    reduce_broadcast(ga, &prod, *bc, true, cols, 1.0);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = (0..g.len())
                        .map(|k| g[k] * ta.data()[operand_index(*bc, true, k, cols)])
                        .collect();
                    let gb = acc(grads, *b, tb.numel());
                    reduce_broadcast(gb, &prod, *bc, false, cols, 1.0);
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.needs(*a) {
                    // dA = dC * B^T
                    let ga = acc(grads, *a, m * k);
                    let bd = tb.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let gb = acc(grads, *b, k * n);
                    let ad = ta.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            if s != 0.0 {
                                axpy(&mut gb[p * n..(p + 1) * n], s, grow);
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2()?;
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = acc(grads, *a, g.len());
                add_into(ga, g);
            }
            Op::Concat(parts, axis) => {
                let (rows, cols) = out.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.value(*p).dims2()?;
                    if self.needs(*p) {
                        let gp = acc(grads, *p, pr * pc);
                        if *axis == 0 {
                            add_into(gp, &g[offset * cols..(offset + pr) * cols]);
                        } else {
                            for i in 0..rows {
                                add_into(
                                    &mut gp[i * pc..(i + 1) * pc],
                                    &g[i * cols + offset..i * cols + offset + pc],
                                );
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).dims2()?;
                let ga = acc(grads, *a, r * c);
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims2()?;
                let len = out.dims2()?.1;
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    add_into(
                        &mut ga[i * c + start..i * c + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, g.len());
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let input = self.value(*a).data().to_vec();
                let ga = acc(grads, *a, g.len());
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(&input) {
                    if *v > 0.0 {
                        *x += gi;
                    }
                }
            }
            Op::Exp(a) => {
                let ga = acc(grads, *a, g.len());
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y;
                }
            }
            Op::Log(a) => {
                let input = self.value(*a).data().to_vec();
                let ga = acc(grads, *a, g.len());
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(&input) {
                    *x += gi / v;
                }
            }
            Op::Softmax(a) => {
                let (r, c) = out.dims2()?;
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let s = dot(y, gi);
                    for j in 0..c {
                        ga[i * c + j] += y[j] * (gi[j] - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (r, c) = out.dims2()?;
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let s: f64 = gi.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] += gi[j] - y[j].exp() * s;
                    }
                }
            }
            Op::Max(a, axis) => {
                let (r, c) = self.value(*a).dims2()?;
                let ga = acc(grads, *a, r * c);
                if *axis == 0 {
                    for j in 0..c {
                        ga[node.aux[j] * c + j] += g[j];
                    }
                } else {
                    for i in 0..r {
                        ga[i * c + node.aux[i]] += g[i];
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let (r, c) = self.value(*table).dims2()?;
                let gt = acc(grads, *table, r * c);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::WeightedSum(parts, weights) => {
                for (p, w) in parts.iter().zip(weights) {
                    if self.needs(*p) {
                        let gp = acc(grads, *p, g.len());
                        axpy(gp, *w, g);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = acc(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Pick(a, row, col) => {
                let t = self.value(*a);
                let (_, c) = t.dims2()?;
                let ga = acc(grads, *a, t.numel());
                ga[row * c + col] += g[0];
            }
            Op::Unfold(a, width) => {
                let (r, c) = self.value(*a).dims2()?;
                let ga = acc(grads, *a, r * c);
                let w = width * c;
                for t in 0..(r + 1 - width) {
                    add_into(&mut ga[t * c..t * c + w], &g[t * w..(t + 1) * w]);
                }
            }
            Op::Input(_) | Op::Param(_) | Op::Constant => {}
        }
        Ok(())
    }
}

/// Gradients of a scalar with respect to every parameter and input leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    params: Vec<Tensor>,
    inputs: Vec<Tensor>,
}

impl Gradients {
    /// Gradient for a parameter; all zeros when the loss does not use it.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn input(&self, slot: usize) -> &Tensor {
        &self.inputs[slot]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Parameter gradients flattened in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.params {
            out.extend_from_slice(t.data());
        }
        out
    }
}

fn resolve<'a>(values: &'a [Tensor], nodes: &[Node], params: &'a ParamSet, v: Var) -> &'a Tensor {
    match nodes[v.0].op {
        Op::Param(id) => params.get(id),
        _ => &values[v.0],
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in dst.iter_mut().zip(x) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index into an operand for output element `k` of a broadcast binary op.
#[inline]
fn operand_index(bc: Broadcast, left: bool, k: usize, cols: usize) -> usize {
    match (bc, left) {
        (Broadcast::Same, _) => k,
        (Broadcast::ScalarA, true) | (Broadcast::ScalarB, false) => 0,
        (Broadcast::RowA, true) | (Broadcast::RowB, false) => k % cols,
        _ => k,
    }
}

/// Accumulates `scale * g` into an operand gradient, summing over broadcast axes.
fn reduce_broadcast(dst: &mut [f64], g: &[f64], bc: Broadcast, left: bool, cols: usize, scale: f64) {
    for (k, gk) in g.iter().enumerate() {
        dst[operand_index(bc, left, k, cols)] += scale * gk;
    }
}

fn binary(ta: &Tensor, tb: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = match bc {
        Broadcast::Same | Broadcast::ScalarB | Broadcast::RowB => ta.shape().to_vec(),
        Broadcast::ScalarA | Broadcast::RowA => tb.shape().to_vec(),
    };
    let n: usize = shape.iter().product();
    let cols = match shape.as_slice() {
        [] => 1,
        s => *s.last().unwrap(),
    };
    let (a, b) = (ta.data(), tb.data());
    let data = (0..n)
        .map(|k| {
            f(
                a[operand_index(bc, true, k, cols)],
                b[operand_index(bc, false, k, cols)],
            )
        })
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

fn unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward kernel shared by eager evaluation and replay.
fn eval<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Tensor) -> Result<(Tensor, Vec<usize>)> {
    let out = match op {
        Op::Add(a, b, bc) => binary(get(*a), get(*b), *bc, |x, y| x + y)?,
        Op::Sub(a, b, bc) => binary(get(*a), get(*b), *bc, |x, y| x - y)?,
        Op::Mul(a, b, bc) => binary(get(*a), get(*b), *bc, |x, y| x * y)?,
        Op::Scale(a, c) => unary(get(*a), |x| c * x),
        Op::MatMul(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            let (m, k) = ta.dims2()?;
            let (k2, n) = tb.dims2()?;
            if k != k2 {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut data = vec![0.0; m * n];
            let (ad, bd) = (ta.data(), tb.data());
            for i in 0..m {
                let orow = &mut data[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = ad[i * k + p];
                    if s != 0.0 {
                        axpy(orow, s, &bd[p * n..(p + 1) * n]);
                    }
                }
            }
            Tensor::from_parts(vec![m, n], data)
        }
        Op::Transpose(a) => {
            let t = get(*a);
            let (r, c) = t.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        }
        Op::Concat(parts, axis) => {
            let dims = parts
                .iter()
                .map(|p| get(*p).dims2())
                .collect::<Result<Vec<_>>>()?;
            if *axis == 0 {
                let cols = dims[0].1;
                if let Some(bad) = dims.iter().position(|d| d.1 != cols) {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat",
                        lhs: get(parts[0]).shape().to_vec(),
                        rhs: get(parts[bad]).shape().to_vec(),
                    });
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(get(*p).data());
                }
                Tensor::from_parts(vec![rows, cols], data)
            } else {
                let rows = dims[0].0;
                if let Some(bad) = dims.iter().position(|d| d.0 != rows) {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat",
                        lhs: get(parts[0]).shape().to_vec(),
                        rhs: get(parts[bad]).shape().to_vec(),
                    });
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for (p, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&get(*p).data()[i * d.1..(i + 1) * d.1]);
                    }
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
        }
        Op::Tanh(a) => unary(get(*a), f64::tanh),
        Op::Sigmoid(a) => unary(get(*a), sigmoid),
        Op::Relu(a) => unary(get(*a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp(a) => unary(get(*a), f64::exp),
        Op::Log(a) => unary(get(*a), f64::ln),
        Op::Softmax(a) | Op::LogSoftmax(a) => {
            let t = get(*a);
            let (r, c) = t.dims2()?;
            let log = matches!(op, Op::LogSoftmax(_));
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = &t.data()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                if log {
                    let lz = m + z.ln();
                    data.extend(row.iter().map(|x| x - lz));
                } else {
                    data.extend(row.iter().map(|x| (x - m).exp() / z));
                }
            }
            Tensor::from_parts(vec![r, c], data)
        }
        Op::Max(a, axis) => {
            let t = get(*a);
            let (r, c) = t.dims2()?;
            let d = t.data();
            if *axis == 0 {
                let mut arg = vec![0usize; c];
                let mut best = d[..c].to_vec();
                for i in 1..r {
                    for j in 0..c {
                        if d[i * c + j] > best[j] {
                            best[j] = d[i * c + j];
                            arg[j] = i;
                        }
                    }
                }
                return Ok((Tensor::from_parts(vec![1, c], best), arg));
            } else {
                let mut arg = vec![0usize; r];
                let mut best = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &d[i * c..(i + 1) * c];
                    let mut bj = 0;
                    for j in 1..c {
                        if row[j] > row[bj] {
                            bj = j;
                        }
                    }
                    arg[i] = bj;
                    best.push(row[bj]);
                }
                return Ok((Tensor::from_parts(vec![r, 1], best), arg));
            }
        }
        Op::Embedding(table, ids) => {
            let t = get(*table);
            let (r, c) = t.dims2()?;
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= r {
                    return Err(DiffError::InvalidArgument(format!(
                        "embedding id {id} out of range for {r} rows"
                    )));
                }
                data.extend_from_slice(&t.data()[id * c..(id + 1) * c]);
            }
            Tensor::from_parts(vec![ids.len(), c], data)
        }
        Op::WeightedSum(parts, weights) => {
            let first = get(parts[0]);
            let mut data = vec![0.0; first.numel()];
            for (p, w) in parts.iter().zip(weights) {
                let t = get(*p);
                if t.shape() != first.shape() {
                    return Err(DiffError::ShapeMismatch {
                        op: "weighted_sum",
                        lhs: first.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                axpy(&mut data, *w, t.data());
            }
            Tensor::from_parts(first.shape().to_vec(), data)
        }
        Op::Sum(a) => Tensor::scalar(get(*a).data().iter().sum()),
        Op::Pick(a, row, col) => {
            let t = get(*a);
            let (r, c) = t.dims2()?;
            if *row >= r || *col >= c {
                return Err(DiffError::InvalidArgument(format!(
                    "pick ({row}, {col}) out of range for {r}x{c}"
                )));
            }
            Tensor::scalar(t.data()[row * c + col])
        }
        Op::Unfold(a, width) => {
            let t = get(*a);
            let (r, c) = t.dims2()?;
            if *width == 0 || *width > r {
                return Err(DiffError::InvalidArgument(format!(
                    "unfold width {width} invalid for {r} rows"
                )));
            }
            let out_rows = r + 1 - width;
            let w = width * c;
            let mut data = Vec::with_capacity(out_rows * w);
            for s in 0..out_rows {
                data.extend_from_slice(&t.data()[s * c..s * c + w]);
            }
            Tensor::from_parts(vec![out_rows, w], data)
        }
        Op::Input(_) | Op::Param(_) | Op::Constant | Op::Reshape(_) | Op::SliceRows(..) | Op::SliceCols(..) => {
            unreachable!("leaf and view ops are evaluated by the graph")
        }
    };
    Ok((out, vec![]))
}
