//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the list is already topologically
//! sorted; `backward` walks it once in reverse. Parameter leaves borrow their
//! tensors from the bound [`ParamSet`], so building a tape for a single action
//! costs no parameter copies.

use std::collections::{BTreeMap, HashMap};

use super::{GradError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter set bound on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scope(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Affine { w: Var, x: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    Index(Var, usize),
    WeightedSum { weights: Var, values: Vec<Var> },
    LogSigmoid(Var),
    MeanRows(Var),
    AddRow(Var, Var),
    Gather(Var, Vec<usize>),
    Row(Var, usize),
    ConcatRows(Vec<Var>),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleShift(..) => "scale_shift",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Index(..) => "index",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::MeanRows(_) => "mean_rows",
            Op::AddRow(..) => "add_row",
            Op::Gather(..) => "gather",
            Op::Row(..) => "row",
            Op::ConcatRows(..) => "concat_rows",
            Op::Transpose(..) => "transpose",
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

struct Bound<'p> {
    set: &'p ParamSet,
    vars: HashMap<&'p str, Var>,
}

/// Recording surface for one forward evaluation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    scopes: Vec<Bound<'p>>,
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), scopes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a parameter set; every entry becomes a differentiable leaf.
    pub fn bind(&mut self, set: &'p ParamSet) -> Scope {
        let mut vars = HashMap::with_capacity(set.len());
        for (name, t) in set.iter() {
            let v = Var(self.nodes.len());
            self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, requires_grad: true });
            vars.insert(name.as_str(), v);
        }
        self.scopes.push(Bound { set, vars });
        Scope(self.scopes.len() - 1)
    }

    /// Binds a parameter set whose entries are treated as constants.
    pub fn bind_frozen(&mut self, set: &'p ParamSet) -> Scope {
        let s = self.bind(set);
        for v in self.scopes[s.0].vars.values() {
            self.nodes[v.0].requires_grad = false;
        }
        s
    }

    pub fn param(&self, scope: Scope, name: &str) -> Result<Var, GradError> {
        self.scopes[scope.0]
            .vars
            .get(name)
            .copied()
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Value::Owned(t), Op::Leaf, false)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push_unchecked(&mut self, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, out: Tensor, op: Op, inputs: &[Var]) -> Result<Var, GradError> {
        if !out.is_finite() {
            return Err(GradError::NonFinite { node: format!("{}#{}", op.name(), self.nodes.len()) });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(Value::Owned(out), op, rg))
    }

    fn shape_err(&self, op: &str, detail: String) -> GradError {
        GradError::Shape { node: format!("{op}#{}", self.nodes.len()), detail }
    }

    /// `W x + b` with `W: [out, in]`; `x` is `[in]` or `[rows, in]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, GradError> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || xt.shape().len() > 2 || wt.shape()[1] != xt.cols() {
            return Err(self.shape_err(
                "affine",
                format!("weight {:?} vs input {:?}", wt.shape(), xt.shape()),
            ));
        }
        let (o, i, rows) = (wt.shape()[0], wt.shape()[1], xt.rows());
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(self.shape_err(
                    "affine",
                    format!("bias {:?} vs out {o}", self.value(b).shape()),
                ));
            }
        }
        let wd = wt.data();
        let xd = xt.data();
        let mut out = vec![0.0; rows * o];
        for r in 0..rows {
            let xr = &xd[r * i..(r + 1) * i];
            for (k, slot) in out[r * o..(r + 1) * o].iter_mut().enumerate() {
                let wr = &wd[k * i..(k + 1) * i];
                *slot = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for k in 0..o {
                    out[r * o + k] += bd[k];
                }
            }
        }
        let shape = if xt.shape().len() == 1 { vec![o] } else { vec![rows, o] };
        let inputs: Vec<Var> = std::iter::once(w).chain(Some(x)).chain(b).collect();
        self.push(Tensor::new(shape, out)?, Op::Affine { w, x, b }, &inputs)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(self.shape_err(name, format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`, elementwise.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, GradError> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::ScaleShift(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, GradError> {
        self.scale_shift(a, s, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; a non-positive input yields a non-finite rejection.
    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        data.chunks_mut(c).for_each(softmax_in_place);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Concatenates 1-D tensors (scalars included).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(self.shape_err("concat", format!("non-vector input {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.len() != bt.len() {
            return Err(self.shape_err("dot", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let s = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    /// Picks element `i` of the flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var, GradError> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(self.shape_err("index", format!("{i} out of {}", t.len())));
        }
        let v = t.data()[i];
        self.push(Tensor::scalar(v), Op::Index(a, i), &[a])
    }

    /// `Σ_j weights[j] * values[j]` for a weight vector and equal-shape values.
    pub fn weighted_sum(&mut self, weights: Var, values: &[Var]) -> Result<Var, GradError> {
        let wt = self.value(weights);
        if wt.len() != values.len() || values.is_empty() {
            return Err(self.shape_err(
                "weighted_sum",
                format!("{} weights for {} values", wt.len(), values.len()),
            ));
        }
        let shape = self.value(values[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(values[0]).len()];
        for (j, &v) in values.iter().enumerate() {
            let vt = self.value(v);
            if vt.shape() != shape.as_slice() {
                return Err(self.shape_err("weighted_sum", format!("value shape {:?}", vt.shape())));
            }
            let w = self.value(weights).data()[j];
            out.iter_mut().zip(vt.data()).for_each(|(o, x)| *o += w * x);
        }
        let inputs: Vec<Var> = std::iter::once(weights).chain(values.iter().copied()).collect();
        let op = Op::WeightedSum { weights, values: values.to_vec() };
        self.push(Tensor::new(shape, out)?, op, &inputs)
    }

    /// `log σ(a)`, elementwise and stable for large |a|.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Mean over the leading axis of a `[rows, cols]` tensor, giving `[cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v / r as f64);
        }
        self.push(Tensor::vector(out), Op::MeanRows(a), &[a])
    }

    /// Adds the vector `v: [cols]` to every row of `a: [rows, cols]`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var, GradError> {
        let (at, vt) = (self.value(a), self.value(v));
        if vt.shape().len() != 1 || vt.len() != at.cols() {
            return Err(self.shape_err("add_row", format!("{:?} + {:?}", at.shape(), vt.shape())));
        }
        let c = at.cols();
        let data = at.data().iter().enumerate().map(|(i, x)| x + vt.data()[i % c]).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, v), &[a, v])
    }

    /// Picks column `idx[r]` from each row `r`, giving `[rows]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, GradError> {
        let t = self.value(a);
        let c = t.cols();
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= c) {
            return Err(self.shape_err("gather", format!("{} indices into {:?}", idx.len(), t.shape())));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| t.data()[r * c + i]).collect();
        self.push(Tensor::vector(data), Op::Gather(a, idx.to_vec()), &[a])
    }

    /// Row `i` of a `[rows, cols]` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, GradError> {
        let t = self.value(a);
        let c = t.cols();
        if t.shape().len() != 2 || i >= t.rows() {
            return Err(self.shape_err("row", format!("row {i} of {:?}", t.shape())));
        }
        let data = t.data()[i * c..(i + 1) * c].to_vec();
        self.push(Tensor::vector(data), Op::Row(a, i), &[a])
    }

    /// Stacks `[r_i, cols]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        };
        let cols = self.value(first).cols();
        let (mut rows, mut data) = (0, Vec::new());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(self.shape_err("concat_rows", format!("{:?} vs {cols} columns", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(self.shape_err("transpose", format!("non-matrix {:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let data = (0..r * c).map(|k| d[(k % r) * c + k / r]).collect();
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), &[a])
    }

    /// Stacks scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var, GradError> {
        self.concat(scalars)
    }

    /// Single-head scaled dot-product attention of one query over a set of
    /// keys/values. Returns the attended value and the attention weights.
    pub fn attention(
        &mut self,
        query: Var,
        keys: &[Var],
        values: &[Var],
    ) -> Result<(Var, Var), GradError> {
        if keys.len() != values.len() || keys.is_empty() {
            return Err(self.shape_err("attention", format!("{} keys, {} values", keys.len(), values.len())));
        }
        let d = self.value(query).len() as f64;
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            let s = self.dot(query, k)?;
            scores.push(self.scale(s, 1.0 / d.sqrt())?);
        }
        let s = self.stack(&scores)?;
        let w = self.softmax(s)?;
        let out = self.weighted_sum(w, values)?;
        Ok((out, w))
    }

    /// Gated recurrent cell with parameters `{prefix}.{z,r,n}.{w,u,b}`.
    pub fn gru(&mut self, scope: Scope, prefix: &str, x: Var, h: Var) -> Result<Var, GradError> {
        let p = |t: &Self, s: &str| t.param(scope, &format!("{prefix}.{s}"));
        let gate = |t: &mut Self, g: &str, hin: Var| -> Result<Var, GradError> {
            let (w, u, b) = (p(t, &format!("{g}.w"))?, p(t, &format!("{g}.u"))?, p(t, &format!("{g}.b"))?);
            let a = t.affine(w, x, Some(b))?;
            let c = t.affine(u, hin, None)?;
            t.add(a, c)
        };
        let z_pre = gate(self, "z", h)?;
        let z = self.sigmoid(z_pre)?;
        let r_pre = gate(self, "r", h)?;
        let r = self.sigmoid(r_pre)?;
        let rh = self.mul(r, h)?;
        let n_pre = gate(self, "n", rh)?;
        let n = self.tanh(n_pre)?;
        let one_minus_z = self.scale_shift(z, -1.0, 1.0)?;
        let a = self.mul(one_minus_z, n)?;
        let b = self.mul(z, h)?;
        self.add(a, b)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients, GradError> {
        if self.value(out).len() != 1 {
            return Err(GradError::Shape {
                node: "backward".into(),
                detail: format!("output must be scalar, got {:?}", self.value(out).shape()),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let (wt, xt) = (self.value(*w), self.value(*x));
                let (o, i, rows) = (wt.shape()[0], wt.shape()[1], xt.rows());
                if self.rg(*w) {
                    let mut gw = vec![0.0; o * i];
                    for r in 0..rows {
                        let xr = &xt.data()[r * i..(r + 1) * i];
                        for k in 0..o {
                            let gk = g[r * o + k];
                            if gk != 0.0 {
                                gw[k * i..(k + 1) * i].iter_mut().zip(xr).for_each(|(a, xv)| *a += gk * xv);
                            }
                        }
                    }
                    accumulate(adj, *w, &gw);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * i];
                    for r in 0..rows {
                        for k in 0..o {
                            let gk = g[r * o + k];
                            if gk != 0.0 {
                                let wr = &wt.data()[k * i..(k + 1) * i];
                                gx[r * i..(r + 1) * i].iter_mut().zip(wr).for_each(|(a, wv)| *a += gk * wv);
                            }
                        }
                    }
                    accumulate(adj, *x, &gx);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; o];
                        for r in 0..rows {
                            gb.iter_mut().zip(&g[r * o..(r + 1) * o]).for_each(|(a, v)| *a += v);
                        }
                        accumulate(adj, *b, &gb);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_if(adj, *a, g);
                self.acc_if(adj, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_if(adj, *a, g);
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(adj, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga: Vec<f64> = g.iter().zip(bt).map(|(x, y)| x * y).collect();
                    accumulate(adj, *a, &ga);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = g.iter().zip(at).map(|(x, y)| x * y).collect();
                    accumulate(adj, *b, &gb);
                }
            }
            Op::ScaleShift(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(adj, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                accumulate(adj, *a, &ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(adj, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                accumulate(adj, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                accumulate(adj, *a, &ga);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                accumulate(adj, *a, &ga);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - dotp);
                    }
                }
                accumulate(adj, *a, &ga);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let gs: f64 = gr.iter().sum();
                    for k in 0..c {
                        dr[k] = gr[k] - yr[k].exp() * gs;
                    }
                }
                accumulate(adj, *a, &ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        accumulate(adj, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(adj, *a, &vec![g[0]; n]);
            }
            Op::Dot(a, b) => {
                let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga: Vec<f64> = bt.iter().map(|v| v * g[0]).collect();
                    accumulate(adj, *a, &ga);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = at.iter().map(|v| v * g[0]).collect();
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Index(a, i) => {
                let mut ga = vec![0.0; self.value(*a).len()];
                ga[*i] = g[0];
                accumulate(adj, *a, &ga);
            }
            Op::WeightedSum { weights, values } => {
                let wt = self.value(*weights).data();
                if self.rg(*weights) {
                    let gw: Vec<f64> = values
                        .iter()
                        .map(|&v| self.value(v).data().iter().zip(g).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(adj, *weights, &gw);
                }
                for (j, &v) in values.iter().enumerate() {
                    if self.rg(v) {
                        let gv: Vec<f64> = g.iter().map(|x| x * wt[j]).collect();
                        accumulate(adj, v, &gv);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv * sigmoid(-xv)).collect();
                accumulate(adj, *a, &ga);
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let r = t.rows() as f64;
                let ga: Vec<f64> = (0..t.len()).map(|i| g[i % g.len()] / r).collect();
                accumulate(adj, *a, &ga);
            }
            Op::AddRow(a, v) => {
                self.acc_if(adj, *a, g);
                if self.rg(*v) {
                    let c = self.value(*v).len();
                    let mut gv = vec![0.0; c];
                    for (i, x) in g.iter().enumerate() {
                        gv[i % c] += x;
                    }
                    accumulate(adj, *v, &gv);
                }
            }
            Op::Gather(a, idx) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    ga[r * c + i] = g[r];
                }
                accumulate(adj, *a, &ga);
            }
            Op::Row(a, i) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                ga[i * c..(i + 1) * c].copy_from_slice(g);
                accumulate(adj, *a, &ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_if(adj, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Transpose(a) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let ga: Vec<f64> = (0..r * c).map(|k| g[(k % c) * r + k / c]).collect();
                accumulate(adj, *a, &ga);
            }
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc_if(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.rg(v) {
            accumulate(adj, v, g);
        }
    }

    /// Collects gradients of every entry in a bound scope, zero-filled for unused entries.
    pub fn grads_for(&self, scope: Scope, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let bound = &self.scopes[scope.0];
        bound
            .set
            .iter()
            .map(|(name, t)| {
                let v = bound.vars[name.as_str()];
                let data = match &grads.adjoints[v.0] {
                    Some(g) => g.clone(),
                    None => vec![0.0; t.len()],
                };
                (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape preserved"))
            })
            .collect()
    }
}

impl Gradients {
    /// Adjoint of an arbitrary node (zero-length when unreached).
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(g.to_vec()),
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

/// `log σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
