use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node of an [`ExprGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of leaf values for [`ExprGraph::evaluate`].
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Chains two binding sources; the first one wins on name collisions.
impl<A: Bindings + ?Sized, B: Bindings + ?Sized> Bindings for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Const(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast(_) => "broadcast",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::GatherRows(..) => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) | Op::Const(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(vs, _) => vs.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Softmax(a, _)
            | Op::Broadcast(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::GatherRows(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
    scope: Option<Arc<str>>,
}

/// Gradients of a scalar with respect to every named leaf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A define-by-run expression graph.
///
/// Nodes are appended in dependency order, so the node list is always a
/// topological order and the graph is acyclic by construction. Output shapes
/// are inferred when a node is added.
#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
    values: Vec<Tensor>,
    scope: Option<Arc<str>>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels nodes created from now on; shows up in numeric errors.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        let s: String = scope.into();
        self.scope = Some(s.into());
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        let needs_grad = match &op {
            Op::Leaf(_) => true,
            Op::Const(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.values.clear();
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Named input whose value comes from the bindings at evaluation time.
    /// Requesting an existing name returns the same node.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            if self.nodes[v.0].shape != shape {
                return Err(TensorError::Shape {
                    op: "leaf",
                    left: self.nodes[v.0].shape.clone(),
                    right: shape.to_vec(),
                });
            }
            return Ok(v);
        }
        let v = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Anonymous constant; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => Ok(self.push(Op::MatMul(a, b), vec![m, n])),
            (sa, sb) => Err(TensorError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            }),
        }
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        match (self.shape(a), self.shape(b)) {
            (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => {
                Ok(self.push(Op::BatchMatMul(a, b), vec![ba, m, n]))
            }
            (sa, sb) => Err(TensorError::Shape {
                op: "batch_matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            }),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Relu(a), s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Tanh(a), s)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Abs(a), s)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Invalid(format!("softmax axis {axis} for shape {s:?}")));
        }
        Ok(self.push(Op::Softmax(a, axis), s))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let mut shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid(format!("concat axis {axis} for shape {shape:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == shape.len()
                && s.iter().zip(&shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: shape.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        shape[axis] = total;
        Ok(self.push(Op::Concat(inputs.to_vec(), axis), shape))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        shape[axis] = len;
        Ok(self.push(Op::Slice { input: a, axis, start }, shape))
    }

    /// Numpy-style broadcast to `target`.
    pub fn broadcast(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let ok = s.len() <= target.len()
            && s
                .iter()
                .rev()
                .zip(target.iter().rev())
                .all(|(&x, &y)| x == y || x == 1);
        if !ok {
            return Err(TensorError::Shape {
                op: "broadcast",
                left: s.to_vec(),
                right: target.to_vec(),
            });
        }
        Ok(self.push(Op::Broadcast(a), target.to_vec()))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a), Vec::new())
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Invalid(format!("sum axis {axis} for shape {s:?}")));
        }
        s.remove(axis);
        Ok(self.push(Op::SumAxis(a, axis), s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: s.to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes.iter().all(|&x| x < s.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(TensorError::Invalid(format!("permutation {axes:?} for shape {s:?}")));
        }
        let shape = axes.iter().map(|&x| s[x]).collect();
        Ok(self.push(Op::Permute(a, axes.to_vec()), shape))
    }

    /// Rows of a rank-2 tensor selected by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        match self.shape(a) {
            &[r, d] if rows.iter().all(|&i| i < r) => {
                Ok(self.push(Op::GatherRows(a, rows.to_vec()), vec![rows.len(), d]))
            }
            s => Err(TensorError::Invalid(format!(
                "gather_rows needs rank 2 with indices in range, got {s:?}"
            ))),
        }
    }

    /// Computes every node. Deterministic for fixed bindings.
    pub fn evaluate(&mut self, bindings: &dyn Bindings) -> Result<()> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = forward(node, &values, bindings)?;
            if !matches!(node.op, Op::Leaf(_) | Op::Const(_)) && !value.is_finite() {
                return Err(TensorError::NonFinite {
                    op: node.op.name(),
                    node: idx,
                    scope: node
                        .scope
                        .as_deref()
                        .map(|s| format!(" in {s}"))
                        .unwrap_or_default(),
                });
            }
            if let Op::Leaf(name) = &node.op {
                if !value.is_finite() {
                    return Err(TensorError::Invalid(format!("leaf `{name}` holds non-finite values")));
                }
            }
            values.push(value);
        }
        self.values = values;
        Ok(())
    }

    pub fn is_evaluated(&self) -> bool {
        !self.nodes.is_empty() && self.values.len() == self.nodes.len()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        if !self.is_evaluated() {
            return Err(TensorError::NotEvaluated);
        }
        Ok(&self.values[v.0])
    }

    /// Which side of the kink every input of every `relu` and `abs` node sits
    /// on. Two evaluations with equal patterns lie on one smooth piece.
    pub fn kink_pattern(&self) -> Result<Vec<bool>> {
        if !self.is_evaluated() {
            return Err(TensorError::NotEvaluated);
        }
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                out.extend(self.values[a.0].data().iter().map(|v| *v > 0.0));
            }
        }
        Ok(out)
    }

    /// Reverse pass from `output` seeded with `seed`; returns a gradient for
    /// every named leaf (zeros for leaves the output does not depend on).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if !self.is_evaluated() {
            return Err(TensorError::NotEvaluated);
        }
        if seed.shape() != self.shape(output) {
            return Err(TensorError::Shape {
                op: "backward seed",
                left: self.shape(output).to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, g, &mut grads);
        }
        let out = self
            .leaves
            .iter()
            .map(|(name, &v)| {
                let shape = self.nodes[v.0].shape.clone();
                let t = match grads.get_mut(v.0).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), t)
            })
            .collect();
        Ok(Gradients(out))
    }

    fn propagate(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.values[v.0].data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                if needs(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if needs(*b) {
                    acc(*b, g.iter().map(|x| -x).collect());
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a, _) => acc(*a, g),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, &g, false, val(*b), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, &g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(*b)[2];
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => {
                let y = self.values[idx].data();
                acc(*a, g.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)).collect());
            }
            Op::Tanh(a) => {
                let y = self.values[idx].data();
                acc(*a, g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect());
            }
            Op::Abs(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > 0.0 { *x } else if v < 0.0 { -x } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(a, axis) => {
                let y = self.values[idx].data();
                let (outer, dim, inner) = kernels::split_axis(&node.shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| o * dim * inner + d * inner + i;
                        let dot: f64 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                        for d in 0..dim {
                            dx[at(d)] = y[at(d)] * (g[at(d)] - dot);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = kernels::split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let dim = self.shape(v)[*axis];
                    if needs(v) {
                        let mut part = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            part.extend_from_slice(&g[from..from + dim * inner]);
                        }
                        acc(v, part);
                    }
                    offset += dim;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, dim, inner) = kernels::split_axis(in_shape, *axis);
                let len = node.shape[*axis];
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let to = (o * dim + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, dx);
            }
            Op::Broadcast(a) => acc(*a, kernels::unbroadcast(&g, self.shape(*a), &node.shape)),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, dim, inner) = kernels::split_axis(self.shape(*a), *axis);
                let mut dx = Vec::with_capacity(outer * dim * inner);
                for o in 0..outer {
                    for _ in 0..dim {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, g),
            Op::Permute(a, axes) => {
                let (_, dx) = kernels::permute(&g, &node.shape, &kernels::inverse_axes(axes));
                acc(*a, dx);
            }
            Op::GatherRows(a, rows) => {
                let s = self.shape(*a);
                let d = s[1];
                let mut dx = vec![0.0; s[0] * d];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(x, y)| *x += y);
                }
                acc(*a, dx);
            }
        }
    }
}

fn forward(node: &Node, values: &[Tensor], bindings: &dyn Bindings) -> Result<Tensor> {
    let v = |x: &Var| &values[x.0];
    let shape = node.shape.clone();
    let elementwise = |a: &Var, f: &dyn Fn(f64) -> f64| -> Tensor { v(a).map(f) };
    let zip = |a: &Var, b: &Var, f: fn(f64, f64) -> f64| -> Tensor {
        Tensor::from_parts(
            shape.clone(),
            v(a).data().iter().zip(v(b).data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    };
    Ok(match &node.op {
        Op::Leaf(name) => {
            let t = bindings
                .lookup(name)
                .ok_or_else(|| TensorError::Unbound(name.clone()))?;
            if t.shape() != node.shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "bind leaf",
                    left: node.shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
            t.clone()
        }
        Op::Const(t) => t.clone(),
        Op::Add(a, b) => zip(a, b, |x, y| x + y),
        Op::Sub(a, b) => zip(a, b, |x, y| x - y),
        Op::Mul(a, b) => zip(a, b, |x, y| x * y),
        Op::Scale(a, c) => elementwise(a, &|x| x * c),
        Op::AddScalar(a, c) => elementwise(a, &|x| x + c),
        Op::MatMul(a, b) => {
            let (m, k) = (v(a).shape()[0], v(a).shape()[1]);
            let n = v(b).shape()[1];
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, v(a).data(), false, v(b).data(), false, &mut out, 0.0);
            Tensor::from_parts(shape, out)
        }
        Op::BatchMatMul(a, b) => {
            let (bs, m, k) = (v(a).shape()[0], v(a).shape()[1], v(a).shape()[2]);
            let n = v(b).shape()[2];
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &v(a).data()[i * m * k..(i + 1) * m * k],
                    false,
                    &v(b).data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Tensor::from_parts(shape, out)
        }
        Op::Relu(a) => elementwise(a, &|x| if x > 0.0 { x } else { 0.0 }),
        Op::Sigmoid(a) => elementwise(a, &sigmoid),
        Op::Tanh(a) => elementwise(a, &f64::tanh),
        Op::Abs(a) => elementwise(a, &f64::abs),
        Op::Softmax(a, axis) => Tensor::from_parts(shape, kernels::softmax(v(a).data(), v(a).shape(), *axis)),
        Op::Concat(inputs, axis) => {
            let (outer, _, inner) = kernels::split_axis(&node.shape, *axis);
            let mut out = Vec::with_capacity(node.shape.iter().product());
            for o in 0..outer {
                for x in inputs {
                    let chunk = v(x).shape()[*axis] * inner;
                    out.extend_from_slice(&v(x).data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, out)
        }
        Op::Slice { input, axis, start } => {
            let (outer, dim, inner) = kernels::split_axis(v(input).shape(), *axis);
            let len = node.shape[*axis];
            let src = v(input).data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * dim + start) * inner;
                out.extend_from_slice(&src[from..from + len * inner]);
            }
            Tensor::from_parts(shape, out)
        }
        Op::Broadcast(a) => Tensor::from_parts(
            shape.clone(),
            kernels::broadcast(v(a).data(), v(a).shape(), &shape),
        ),
        Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
        Op::Mean(a) => Tensor::scalar(v(a).data().iter().sum::<f64>() / v(a).len() as f64),
        Op::SumAxis(a, axis) => Tensor::from_parts(shape, kernels::sum_axis(v(a).data(), v(a).shape(), *axis)),
        Op::Reshape(a) => v(a).reshape(&shape)?,
        Op::Permute(a, axes) => {
            let (s, out) = kernels::permute(v(a).data(), v(a).shape(), axes);
            Tensor::from_parts(s, out)
        }
        Op::GatherRows(a, rows) => {
            let d = v(a).shape()[1];
            let src = v(a).data();
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
            Tensor::from_parts(shape, out)
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
