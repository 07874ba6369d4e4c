//! Dense f64 tensors and tape-based reverse-mode automatic differentiation.
//!
//! The tape records every operation eagerly. Backward passes are built by
//! emitting new tape nodes for the adjoint arithmetic, so a gradient is
//! itself differentiable and `hvp` in exact mode is just grad-of-grad.
//! A finite-difference `hvp` mode replays the recorded graph at shifted
//! leaf values and serves as an independent cross-check.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::TensorError;

/// Plain n-dimensional array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; numel],
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.numel(), other.numel());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor, no tape involvement.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Row `i` of a 2-d tensor as a 1-d tensor.
    pub fn row(&self, i: usize) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        Tensor {
            shape: vec![cols],
            data: self.data[i * cols..(i + 1) * cols].to_vec(),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// sign with the fixed convention sign(0) = 0.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Matmul,
    Transpose,
    Relu,
    Softplus,
    Sigmoid,
    Log,
    Exp,
    Abs,
    SignDetached,
    StepDetached,
    Sum,
    Mean,
    MaxReduce,
    Clamp(f64, f64),
    RowSum,
    BroadcastCols(usize),
    ColSum,
    BroadcastRows(usize),
    Reshape(Vec<usize>),
    /// out[i] = in[table[i]], table[i] == usize::MAX reads as zero.
    Gather {
        table: Rc<Vec<usize>>,
        out_shape: Vec<usize>,
    },
    /// out[table[i]] += in[i]; adjoint of Gather with the same table.
    ScatterAdd {
        table: Rc<Vec<usize>>,
        out_shape: Vec<usize>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    tracked: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of operations; node ids are topologically ordered.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one value on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Exact (grad-of-grad) or central finite-difference Hessian-vector product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    Exact,
    FiniteDiff,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, tracked: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            inputs,
            value,
            tracked,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Drops every node with id >= len. Handles pointing above the cut
    /// become dangling; callers own that discipline. Used to keep repeated
    /// hvp evaluations on one tape from growing it without bound.
    pub fn truncate(&self, len: usize) {
        self.inner.borrow_mut().nodes.truncate(len);
    }

    /// Tracked leaf: gradients flow to it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Untracked constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].tracked
    }

    fn apply(&self, op: Op, inputs: &[&Var]) -> Result<Var, TensorError> {
        for v in inputs {
            if !self.same_as(&v.tape) {
                return Err(TensorError::MixedTapes);
            }
        }
        let (value, tracked) = {
            let inner = self.inner.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &inner.nodes[v.id].value).collect();
            let value = eval_op(&op, &vals)?;
            let tracked = inputs.iter().any(|v| inner.nodes[v.id].tracked);
            (value, tracked)
        };
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: format!("{op:?}"),
            });
        }
        Ok(self.push(op, inputs.iter().map(|v| v.id).collect(), value, tracked))
    }

    /// Gradient of a scalar root w.r.t. each leaf, as new tape nodes
    /// (so the result is itself differentiable).
    pub fn grad(&self, root: &Var, leaves: &[&Var]) -> Result<Vec<Var>, TensorError> {
        if !self.same_as(&root.tape) {
            return Err(TensorError::MixedTapes);
        }
        if !root.value().is_scalar() {
            return Err(TensorError::RootNotScalar {
                shape: root.value().shape().to_vec(),
            });
        }
        for l in leaves {
            if !self.same_as(&l.tape) || l.id >= self.len() {
                return Err(TensorError::LeafNotOnTape);
            }
            if !self.tracked(l.id) {
                return Err(TensorError::LeafNotTracked);
            }
        }
        let root_id = root.id;
        let mut adjoint: Vec<Option<Var>> = Vec::new();
        adjoint.resize(root_id + 1, None);
        adjoint[root_id] = Some(self.constant_scalar(1.0));

        for id in (0..=root_id).rev() {
            let Some(adj) = adjoint[id].clone() else {
                continue;
            };
            let (op, inputs, tracked) = {
                let inner = self.inner.borrow();
                let n = &inner.nodes[id];
                (n.op.clone(), n.inputs.clone(), n.tracked)
            };
            if !tracked || matches!(op, Op::Leaf) {
                continue;
            }
            let grads = self.vjp(&op, &inputs, id, &adj)?;
            for (inp, g) in inputs.iter().zip(grads.into_iter()) {
                let Some(g) = g else { continue };
                if !self.tracked(*inp) {
                    continue;
                }
                adjoint[*inp] = Some(match adjoint[*inp].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
        }
        leaves
            .iter()
            .map(|l| match adjoint.get(l.id).and_then(|a| a.clone()) {
                Some(v) => Ok(v),
                None => Ok(self.constant(Tensor::zeros(self.value_of(l.id).shape().to_vec()))),
            })
            .collect()
    }

    /// Hessian-vector product of a scalar root w.r.t. one leaf.
    pub fn hvp(
        &self,
        root: &Var,
        leaf: &Var,
        v: &Tensor,
        mode: HvpMode,
    ) -> Result<Tensor, TensorError> {
        let leaf_val = leaf.value();
        if v.shape() != leaf_val.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "hvp".into(),
                lhs: leaf_val.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        match mode {
            HvpMode::Exact => {
                let g = self.grad(root, &[leaf])?.remove(0);
                let vc = self.constant(v.clone());
                let s = g.mul(&vc)?.sum()?;
                if !self.tracked(s.id) {
                    return Ok(Tensor::zeros(leaf_val.shape().to_vec()));
                }
                Ok(self.grad(&s, &[leaf])?.remove(0).value())
            }
            HvpMode::FiniteDiff => {
                let h = 1e-4 * (1.0 + leaf_val.linf_norm());
                let plus = leaf_val.zip_map(v, |x, d| x + h * d);
                let minus = leaf_val.zip_map(v, |x, d| x - h * d);
                let gp = self.replay_grad(root, leaf, &plus)?;
                let gm = self.replay_grad(root, leaf, &minus)?;
                Ok(gp.zip_map(&gm, |a, b| (a - b) / (2.0 * h)))
            }
        }
    }

    /// Re-executes the recorded subgraph below `root` with `leaf` replaced
    /// by `value`, and returns the gradient of root w.r.t. that leaf.
    pub fn replay_grad(
        &self,
        root: &Var,
        leaf: &Var,
        value: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let (fresh, new_root, new_leaf) = self.reexec(root, leaf, value)?;
        Ok(fresh.grad(&new_root, &[&new_leaf])?.remove(0).value())
    }

    /// Re-executes the subgraph below `root` with `leaf` overridden and
    /// returns the root value.
    pub fn replay_value(
        &self,
        root: &Var,
        leaf: &Var,
        value: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let (_, new_root, _) = self.reexec(root, leaf, value)?;
        Ok(new_root.value())
    }

    fn reexec(
        &self,
        root: &Var,
        leaf: &Var,
        value: &Tensor,
    ) -> Result<(Tape, Var, Var), TensorError> {
        if !self.same_as(&root.tape) || !self.same_as(&leaf.tape) {
            return Err(TensorError::MixedTapes);
        }
        if value.shape() != leaf.value().shape() {
            return Err(TensorError::ShapeMismatch {
                op: "replay".into(),
                lhs: leaf.value().shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        // ancestor set of root
        let mut needed = vec![false; root.id + 1];
        needed[root.id] = true;
        {
            let inner = self.inner.borrow();
            for id in (0..=root.id).rev() {
                if !needed[id] {
                    continue;
                }
                for &inp in &inner.nodes[id].inputs {
                    needed[inp] = true;
                }
            }
        }
        let fresh = Tape::new();
        let mut map: Vec<Option<Var>> = vec![None; root.id + 1];
        for id in 0..=root.id {
            if !needed[id] {
                continue;
            }
            let (op, inputs, old_value, tracked) = {
                let inner = self.inner.borrow();
                let n = &inner.nodes[id];
                (n.op.clone(), n.inputs.clone(), n.value.clone(), n.tracked)
            };
            let var = if id == leaf.id {
                fresh.leaf(value.clone())
            } else if matches!(op, Op::Leaf) {
                fresh.push(Op::Leaf, vec![], old_value, tracked)
            } else {
                let ins: Vec<Var> = inputs
                    .iter()
                    .map(|i| map[*i].clone().expect("ancestor mapped"))
                    .collect();
                let refs: Vec<&Var> = ins.iter().collect();
                fresh.apply(op, &refs)?
            };
            map[id] = Some(var);
        }
        let new_root = map[root.id].clone().unwrap();
        let new_leaf = map[leaf.id].clone().unwrap();
        Ok((fresh, new_root, new_leaf))
    }

    fn vjp(
        &self,
        op: &Op,
        inputs: &[usize],
        node_id: usize,
        adj: &Var,
    ) -> Result<Vec<Option<Var>>, TensorError> {
        let var = |id: usize| Var {
            tape: self.clone(),
            id,
        };
        // sums the adjoint down to a scalar when the operand was broadcast
        let reduce_to = |g: Var, id: usize| -> Result<Var, TensorError> {
            let target = self.value_of(id);
            if g.value().shape() == target.shape() {
                Ok(g)
            } else {
                debug_assert_eq!(target.numel(), 1);
                let s = g.sum()?;
                s.reshape(target.shape().to_vec())
            }
        };
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![
                Some(reduce_to(adj.clone(), inputs[0])?),
                Some(reduce_to(adj.clone(), inputs[1])?),
            ],
            Op::Sub => vec![
                Some(reduce_to(adj.clone(), inputs[0])?),
                Some(reduce_to(adj.neg()?, inputs[1])?),
            ],
            Op::Mul => {
                let a = var(inputs[0]);
                let b = var(inputs[1]);
                vec![
                    Some(reduce_to(adj.mul(&b)?, inputs[0])?),
                    Some(reduce_to(adj.mul(&a)?, inputs[1])?),
                ]
            }
            Op::Div => {
                let a = var(inputs[0]);
                let b = var(inputs[1]);
                let ga = adj.div(&b)?;
                let gb = adj.mul(&a)?.div(&b.mul(&b)?)?.neg()?;
                vec![
                    Some(reduce_to(ga, inputs[0])?),
                    Some(reduce_to(gb, inputs[1])?),
                ]
            }
            Op::Neg => vec![Some(adj.neg()?)],
            Op::Scale(c) => vec![Some(adj.scale(*c)?)],
            Op::Matmul => {
                let a = var(inputs[0]);
                let b = var(inputs[1]);
                vec![
                    Some(adj.matmul(&b.transpose()?)?),
                    Some(a.transpose()?.matmul(adj)?),
                ]
            }
            Op::Transpose => vec![Some(adj.transpose()?)],
            Op::Relu => {
                let x = var(inputs[0]);
                vec![Some(adj.mul(&x.step_detached()?)?)]
            }
            Op::Softplus => {
                let x = var(inputs[0]);
                vec![Some(adj.mul(&x.sigmoid()?)?)]
            }
            Op::Sigmoid => {
                let s = var(node_id);
                let one = self.constant_scalar(1.0);
                let ds = s.mul(&one.sub(&s)?)?;
                vec![Some(adj.mul(&ds)?)]
            }
            Op::Log => {
                let x = var(inputs[0]);
                vec![Some(adj.div(&x)?)]
            }
            Op::Exp => {
                let e = var(node_id);
                vec![Some(adj.mul(&e)?)]
            }
            Op::Abs => {
                let x = var(inputs[0]);
                vec![Some(adj.mul(&x.sign_detached()?)?)]
            }
            Op::SignDetached | Op::StepDetached => vec![None],
            Op::Sum => {
                let shape = self.value_of(inputs[0]).shape().to_vec();
                let ones = self.constant(Tensor::ones(shape));
                vec![Some(ones.mul(adj)?)]
            }
            Op::Mean => {
                let t = self.value_of(inputs[0]);
                let n = t.numel() as f64;
                let ones = self.constant(Tensor::ones(t.shape().to_vec()));
                vec![Some(ones.mul(adj)?.scale(1.0 / n)?)]
            }
            Op::MaxReduce => {
                // subgradient: all mass on the first argmax
                let t = self.value_of(inputs[0]);
                let mut best = 0usize;
                for (i, v) in t.data().iter().enumerate() {
                    if *v > t.data()[best] {
                        best = i;
                    }
                }
                let mut mask = Tensor::zeros(t.shape().to_vec());
                mask.data_mut()[best] = 1.0;
                vec![Some(self.constant(mask).mul(adj)?)]
            }
            Op::Clamp(lo, hi) => {
                let t = self.value_of(inputs[0]);
                let mask = t.map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                vec![Some(adj.mul(&self.constant(mask))?)]
            }
            Op::RowSum => {
                let cols = self.value_of(inputs[0]).shape()[1];
                vec![Some(adj.broadcast_cols(cols)?)]
            }
            Op::BroadcastCols(_) => vec![Some(adj.row_sum()?)],
            Op::ColSum => {
                let rows = self.value_of(inputs[0]).shape()[0];
                vec![Some(adj.broadcast_rows(rows)?)]
            }
            Op::BroadcastRows(_) => vec![Some(adj.col_sum()?)],
            Op::Reshape(_) => {
                let shape = self.value_of(inputs[0]).shape().to_vec();
                vec![Some(adj.reshape(shape)?)]
            }
            Op::Gather { table, .. } => {
                let in_shape = self.value_of(inputs[0]).shape().to_vec();
                let op = Op::ScatterAdd {
                    table: table.clone(),
                    out_shape: in_shape,
                };
                vec![Some(self.apply(op, &[adj])?)]
            }
            Op::ScatterAdd { table, .. } => {
                let in_shape = self.value_of(inputs[0]).shape().to_vec();
                let op = Op::Gather {
                    table: table.clone(),
                    out_shape: in_shape,
                };
                vec![Some(self.apply(op, &[adj])?)]
            }
        })
    }
}

fn broadcast_shapes<'a>(
    op: &str,
    a: &'a Tensor,
    b: &'a Tensor,
) -> Result<Vec<usize>, TensorError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op: op.into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn ew(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let (ad, bd) = (a.data(), b.data());
    for i in 0..numel {
        let x = if ad.len() == 1 { ad[0] } else { ad[i] };
        let y = if bd.len() == 1 { bd[0] } else { bd[i] };
        data.push(f(x, y));
    }
    Tensor { shape, data }
}

fn eval_op(op: &Op, vals: &[&Tensor]) -> Result<Tensor, TensorError> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves are pushed directly"),
        Op::Add => ew(
            vals[0],
            vals[1],
            broadcast_shapes("add", vals[0], vals[1])?,
            |a, b| a + b,
        ),
        Op::Sub => ew(
            vals[0],
            vals[1],
            broadcast_shapes("sub", vals[0], vals[1])?,
            |a, b| a - b,
        ),
        Op::Mul => ew(
            vals[0],
            vals[1],
            broadcast_shapes("mul", vals[0], vals[1])?,
            |a, b| a * b,
        ),
        Op::Div => ew(
            vals[0],
            vals[1],
            broadcast_shapes("div", vals[0], vals[1])?,
            |a, b| a / b,
        ),
        Op::Neg => vals[0].map(|v| -v),
        Op::Scale(c) => vals[0].map(|v| c * v),
        Op::Matmul => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul".into(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data()[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        }
        Op::Transpose => {
            let a = vals[0];
            if a.shape().len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose".into(),
                    lhs: a.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor {
                shape: vec![n, m],
                data,
            }
        }
        Op::Relu => vals[0].map(|v| v.max(0.0)),
        Op::Softplus => vals[0].map(softplus_stable),
        Op::Sigmoid => vals[0].map(|v| 1.0 / (1.0 + (-v).exp())),
        Op::Log => vals[0].map(|v| v.ln()),
        Op::Exp => vals[0].map(|v| v.exp()),
        Op::Abs => vals[0].map(|v| v.abs()),
        Op::SignDetached => vals[0].map(sign),
        Op::StepDetached => vals[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::Sum => Tensor::scalar(vals[0].data().iter().sum()),
        Op::Mean => Tensor::scalar(vals[0].data().iter().sum::<f64>() / vals[0].numel() as f64),
        Op::MaxReduce => Tensor::scalar(vals[0].data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        Op::Clamp(lo, hi) => vals[0].map(|v| v.clamp(*lo, *hi)),
        Op::RowSum => {
            let a = vals[0];
            require_2d("row_sum", a)?;
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let data = (0..m)
                .map(|i| a.data()[i * n..(i + 1) * n].iter().sum())
                .collect();
            Tensor {
                shape: vec![m, 1],
                data,
            }
        }
        Op::BroadcastCols(c) => {
            let a = vals[0];
            require_2d("broadcast_cols", a)?;
            if a.shape()[1] != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_cols".into(),
                    lhs: a.shape().to_vec(),
                    rhs: vec![a.shape()[0], 1],
                });
            }
            let m = a.shape()[0];
            let mut data = Vec::with_capacity(m * c);
            for i in 0..m {
                data.extend(std::iter::repeat(a.data()[i]).take(*c));
            }
            Tensor {
                shape: vec![m, *c],
                data,
            }
        }
        Op::ColSum => {
            let a = vals[0];
            require_2d("col_sum", a)?;
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    data[j] += a.data()[i * n + j];
                }
            }
            Tensor {
                shape: vec![1, n],
                data,
            }
        }
        Op::BroadcastRows(r) => {
            let a = vals[0];
            require_2d("broadcast_rows", a)?;
            if a.shape()[0] != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_rows".into(),
                    lhs: a.shape().to_vec(),
                    rhs: vec![1, a.shape()[1]],
                });
            }
            let n = a.shape()[1];
            let mut data = Vec::with_capacity(r * n);
            for _ in 0..*r {
                data.extend_from_slice(a.data());
            }
            Tensor {
                shape: vec![*r, n],
                data,
            }
        }
        Op::Reshape(shape) => {
            let numel: usize = shape.iter().product();
            if numel != vals[0].numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape".into(),
                    lhs: vals[0].shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor {
                shape: shape.clone(),
                data: vals[0].data().to_vec(),
            }
        }
        Op::Gather { table, out_shape } => {
            let a = vals[0];
            let data = table
                .iter()
                .map(|&t| if t == usize::MAX { 0.0 } else { a.data()[t] })
                .collect();
            Tensor {
                shape: out_shape.clone(),
                data,
            }
        }
        Op::ScatterAdd { table, out_shape } => {
            let a = vals[0];
            let numel: usize = out_shape.iter().product();
            let mut data = vec![0.0; numel];
            for (i, &t) in table.iter().enumerate() {
                if t != usize::MAX {
                    data[t] += a.data()[i];
                }
            }
            Tensor {
                shape: out_shape.clone(),
                data,
            }
        }
    })
}

fn require_2d(op: &str, t: &Tensor) -> Result<(), TensorError> {
    if t.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: op.into(),
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

/// log(1 + e^x) without overflow for large x.
pub fn softplus_stable(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

macro_rules! binary {
    ($name:ident, $op:expr) => {
        pub fn $name(&self, other: &Var) -> Result<Var, TensorError> {
            self.tape.apply($op, &[self, other])
        }
    };
}

macro_rules! unary {
    ($name:ident, $op:expr) => {
        pub fn $name(&self) -> Result<Var, TensorError> {
            self.tape.apply($op, &[self])
        }
    };
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    binary!(add, Op::Add);
    binary!(sub, Op::Sub);
    binary!(mul, Op::Mul);
    binary!(div, Op::Div);
    binary!(matmul, Op::Matmul);
    unary!(neg, Op::Neg);
    unary!(transpose, Op::Transpose);
    unary!(relu, Op::Relu);
    unary!(softplus, Op::Softplus);
    unary!(sigmoid, Op::Sigmoid);
    unary!(log, Op::Log);
    unary!(exp, Op::Exp);
    unary!(abs, Op::Abs);
    unary!(sign_detached, Op::SignDetached);
    unary!(step_detached, Op::StepDetached);
    unary!(sum, Op::Sum);
    unary!(mean, Op::Mean);
    unary!(max_reduce, Op::MaxReduce);
    unary!(row_sum, Op::RowSum);
    unary!(col_sum, Op::ColSum);

    pub fn scale(&self, c: f64) -> Result<Var, TensorError> {
        self.tape.apply(Op::Scale(c), &[self])
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.tape.apply(Op::Clamp(lo, hi), &[self])
    }

    pub fn broadcast_cols(&self, cols: usize) -> Result<Var, TensorError> {
        self.tape.apply(Op::BroadcastCols(cols), &[self])
    }

    pub fn broadcast_rows(&self, rows: usize) -> Result<Var, TensorError> {
        self.tape.apply(Op::BroadcastRows(rows), &[self])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.tape.apply(Op::Reshape(shape), &[self])
    }

    /// out[i] = self[table[i]]; usize::MAX entries read as zero.
    pub fn gather(&self, table: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var, TensorError> {
        self.tape.apply(Op::Gather { table, out_shape }, &[self])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_values(tape: &Tape, root: &Var, leaves: &[&Var]) -> Vec<Tensor> {
        tape.grad(root, leaves)
            .unwrap()
            .into_iter()
            .map(|v| v.value())
            .collect()
    }

    #[test]
    fn softplus_at_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = x.softplus().unwrap();
        assert!((y.value().item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn relu_values() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[-3.0, 3.0]));
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 3.0]);
    }

    #[test]
    fn matmul_hand() {
        let t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        let y = x.mul(&x).unwrap().sum().unwrap();
        let g = grad_values(&t, &y, &[&x]);
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_relu_at_zero_is_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = x.relu().unwrap().sum().unwrap();
        let g = grad_values(&t, &y, &[&x]);
        assert_eq!(g[0].data(), &[0.0]);
    }

    #[test]
    fn grad_root_must_be_scalar() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let y = x.mul(&x).unwrap();
        assert!(matches!(
            t.grad(&y, &[&x]),
            Err(TensorError::RootNotScalar { .. })
        ));
    }

    #[test]
    fn grad_leaf_must_be_on_same_tape() {
        let t = Tape::new();
        let other = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let z = other.leaf(Tensor::scalar(1.0));
        let y = x.mul(&x).unwrap();
        assert!(t.grad(&y, &[&z]).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let t = Tape::new();
        let a = t.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let b = t.leaf(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    fn mlp_loss(_tape: &Tape, x: &Var, w1: &Var, w2: &Var) -> Var {
        let h = x.matmul(w1).unwrap().softplus().unwrap();
        let o = h.matmul(w2).unwrap();
        o.mul(&o).unwrap().sum().unwrap()
    }

    #[test]
    fn grad_matches_finite_differences_on_mlp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xv = Tensor::matrix(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w1v = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2v = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let t = Tape::new();
        let x = t.leaf(xv.clone());
        let w1 = t.leaf(w1v.clone());
        let w2 = t.leaf(w2v.clone());
        let loss = mlp_loss(&t, &x, &w1, &w2);
        let g = grad_values(&t, &loss, &[&x]);

        let h = 1e-5;
        for i in 0..4 {
            let mut plus = xv.clone();
            plus.data_mut()[i] += h;
            let mut minus = xv.clone();
            minus.data_mut()[i] -= h;
            let fp = t.replay_value(&loss, &x, &plus).unwrap().item();
            let fm = t.replay_value(&loss, &x, &minus).unwrap().item();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[0].data()[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "i={i} ad={} fd={fd}", g[0].data()[i]);
        }
    }

    #[test]
    fn hvp_quadratic_matches_matrix() {
        // root = 1/2 x^T A x with A=[[2,1],[1,3]]
        let t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap());
        let x = t.leaf(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let loss = x
            .matmul(&a)
            .unwrap()
            .mul(&x)
            .unwrap()
            .sum()
            .unwrap()
            .scale(0.5)
            .unwrap();
        let v = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let hv = t.hvp(&loss, &x, &v, HvpMode::Exact).unwrap();
        assert!((hv.data()[0] - 2.0).abs() < 1e-10);
        assert!((hv.data()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hvp_zero_vector_gives_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let loss = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
        let hv = t
            .hvp(&loss, &x, &Tensor::zeros(vec![2]), HvpMode::Exact)
            .unwrap();
        assert_eq!(hv.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_exact_vs_finite_diff() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::matrix(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w1v = Tensor::matrix(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2v = Tensor::matrix(6, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let t = Tape::new();
        let x = t.leaf(xv);
        let w1 = t.leaf(w1v);
        let w2 = t.leaf(w2v);
        let loss = mlp_loss(&t, &x, &w1, &w2);
        let v = Tensor::matrix(1, 4, vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let he = t.hvp(&loss, &x, &v, HvpMode::Exact).unwrap();
        let hf = t.hvp(&loss, &x, &v, HvpMode::FiniteDiff).unwrap();
        for i in 0..4 {
            let rel = (he.data()[i] - hf.data()[i]).abs() / he.data()[i].abs().max(1e-8);
            assert!(rel < 1e-3, "i={i} exact={} fd={}", he.data()[i], hf.data()[i]);
        }
    }

    #[test]
    fn hvp_linear_in_v_and_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = Tape::new();
        let x = t.leaf(Tensor::matrix(
            1,
            3,
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap());
        let w = t.leaf(Tensor::matrix(
            3,
            3,
            (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap());
        let loss = x
            .matmul(&w)
            .unwrap()
            .softplus()
            .unwrap()
            .sum()
            .unwrap();
        let u = Tensor::matrix(1, 3, vec![1.0, -0.5, 0.2]).unwrap();
        let v = Tensor::matrix(1, 3, vec![0.3, 0.9, -1.1]).unwrap();
        let hu = t.hvp(&loss, &x, &u, HvpMode::Exact).unwrap();
        let hv = t.hvp(&loss, &x, &v, HvpMode::Exact).unwrap();
        // symmetry
        assert!((u.dot(&hv) - v.dot(&hu)).abs() < 1e-6);
        // linearity
        let av_bw = u.zip_map(&v, |a, b| 2.0 * a - 3.0 * b);
        let h_mix = t.hvp(&loss, &x, &av_bw, HvpMode::Exact).unwrap();
        for i in 0..3 {
            let want = 2.0 * hu.data()[i] - 3.0 * hv.data()[i];
            assert!((h_mix.data()[i] - want).abs() < 1e-8);
        }
    }

    #[test]
    fn relu_logit_network_has_zero_input_hessian() {
        let t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![0.4, -0.2, 0.9]).unwrap());
        let w1 = t.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect()).unwrap());
        let w2 = t.constant(Tensor::matrix(4, 2, (0..8).map(|i| 0.3 - (i as f64) * 0.07).collect()).unwrap());
        let logits = x.matmul(&w1).unwrap().relu().unwrap().matmul(&w2).unwrap();
        let one_logit = logits
            .mul(&t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()))
            .unwrap()
            .sum()
            .unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let hv = t.hvp(&one_logit, &x, &v, HvpMode::Exact).unwrap();
        for &h in hv.data() {
            assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn clamp_and_abs_values() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[-2.0, 0.5, 2.0]));
        let c = x.clamp(0.0, 1.0).unwrap();
        assert_eq!(c.value().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(x.abs().unwrap().value().data(), &[2.0, 0.5, 2.0]);
        assert_eq!(x.max_reduce().unwrap().value().item(), 2.0);
    }
}
