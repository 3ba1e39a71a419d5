//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every primitive pushes one node holding its forward value. `backward`
//! walks the nodes in reverse creation order, which is a valid topological
//! order because a node can only reference nodes created before it.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Real, Tensor};
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    /// `[x]_+`; the subgradient at 0 is 0.
    Relu,
    Sqrt,
    Recip,
    Exp,
    Square,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    Max(Var, Vec<usize>),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    L2Norm(Var, usize),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    LstmGates(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// A single recorded computation.
///
/// Parameters are bound lazily from an optional [`ParameterStore`]; each name
/// becomes one leaf node no matter how often it is requested.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParameterStore<T>>,
    bound: BTreeMap<String, Var>,
    consumed: bool,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("axis {axis} out of range (0 or 1)"),
        });
    }
    Ok(())
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParameterStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from the attached store.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        let v = self.variable(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.get(name).is_some())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First element of a node's value.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        t.dims2().ok_or_else(|| shape_err(op, &[t.shape()]))
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims("transpose", a)?;
        let t = self.value(a).transpose();
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(op, a)?;
        let db = self.dims(op, b)?;
        if da != db {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(da)
    }

    fn zip_with(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (m, n) = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Div(a, b), "div", a, b, |x, y| x / y)
    }

    /// `a[m×n] + r[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.dims("add_row", a)?;
        let (rr, rn) = self.dims("add_row", r)?;
        if rr != 1 || rn != n {
            return Err(shape_err("add_row", &[self.shape(a), self.shape(r)]));
        }
        let rv = self.value(r).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % n])
            .collect();
        let ng = self.ng(&[a, r]);
        Ok(self.push(Tensor::new(vec![m, n], data), Op::AddRow(a, r), ng))
    }

    /// `a[m×n] ⊙ r[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.dims("mul_row", a)?;
        let (rr, rn) = self.dims("mul_row", r)?;
        if rr != 1 || rn != n {
            return Err(shape_err("mul_row", &[self.shape(a), self.shape(r)]));
        }
        let rv = self.value(r).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % n])
            .collect();
        let ng = self.ng(&[a, r]);
        Ok(self.push(Tensor::new(vec![m, n], data), Op::MulRow(a, r), ng))
    }

    /// `a[m×n] ⊙ c[m×1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims("mul_col", a)?;
        let (cm, cn) = self.dims("mul_col", c)?;
        if cn != 1 || cm != m {
            return Err(shape_err("mul_col", &[self.shape(a), self.shape(c)]));
        }
        let cv = self.value(c).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv[i / n])
            .collect();
        let ng = self.ng(&[a, c]);
        Ok(self.push(Tensor::new(vec![m, n], data), Op::MulCol(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.dims("scale", a)?;
        let st = T::from_f64_lossy(s);
        let t = self.value(a).map(|x| x * st);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Scale(a, s), ng))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.dims("add_scalar", a)?;
        let st = T::from_f64_lossy(s);
        let t = self.value(a).map(|x| x + st);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::AddScalar(a), ng))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        self.dims("unary", a)?;
        let t = self.value(a).map(|x| match f {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => x.recip(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Neg => -x,
        });
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Unary(a, f), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip)
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Softmax normalising along `axis` (0: down each column, 1: across each row).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", axis)?;
        let (m, n) = self.dims("softmax", a)?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        let (lanes, len) = if axis == 0 { (n, m) } else { (m, n) };
        for lane in 0..lanes {
            let idx = |t: usize| {
                if axis == 0 {
                    t * n + lane
                } else {
                    lane * n + t
                }
            };
            let mx = (0..len).map(|t| x[idx(t)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for t in 0..len {
                let e = (x[idx(t)] - mx).exp();
                out[idx(t)] = e;
                z = z + e;
            }
            for t in 0..len {
                out[idx(t)] = out[idx(t)] / z;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Softmax(a, axis), ng))
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Rows with
    /// no admissible entry produce all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims("masked_softmax", a)?;
        if mask.len() != m * n {
            return Err(shape_err("masked_softmax", &[self.shape(a), &[mask.len()]]));
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let mx = row
                .clone()
                .filter(|&k| mask[k])
                .map(|k| x[k])
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for k in row.clone().filter(|&k| mask[k]) {
                let e = (x[k] - mx).exp();
                out[k] = e;
                z = z + e;
            }
            for k in row.filter(|&k| mask[k]) {
                out[k] = out[k] / z;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MaskedSoftmax(a), ng))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("max", axis)?;
        let (m, n) = self.dims("max", a)?;
        let x = self.value(a).data();
        let (lanes, len) = if axis == 0 { (n, m) } else { (m, n) };
        let mut out = Vec::with_capacity(lanes);
        let mut arg = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let idx = |t: usize| {
                if axis == 0 {
                    t * n + lane
                } else {
                    lane * n + t
                }
            };
            let mut best = 0;
            for t in 1..len {
                if x[idx(t)] > x[idx(best)] {
                    best = t;
                }
            }
            out.push(x[idx(best)]);
            arg.push(idx(best));
        }
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(shape, out), Op::Max(a, arg), ng))
    }

    /// Column-wise maximum over each row range `[start, end)`, one output row
    /// per range; ties resolve to the lowest row.
    pub fn segment_max_rows(&mut self, a: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims("segment_max_rows", a)?;
        if ranges.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_max_rows",
                msg: "no ranges".into(),
            });
        }
        if let Some(r) = ranges.iter().find(|r| r.0 >= r.1 || r.1 > m) {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_max_rows",
                msg: format!("range {r:?} empty or outside {m} rows"),
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(ranges.len() * n);
        let mut arg = Vec::with_capacity(ranges.len() * n);
        for &(s, e) in ranges {
            for j in 0..n {
                let mut best = s * n + j;
                for i in s + 1..e {
                    if x[i * n + j] > x[best] {
                        best = i * n + j;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![ranges.len(), n], out), Op::Max(a, arg), ng))
    }

    fn reduce(&self, a: Var, axis: usize) -> Result<(Vec<T>, Vec<usize>)> {
        let (m, n) = self.dims("sum", a)?;
        let x = self.value(a).data();
        if axis == 0 {
            let mut out = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] = out[j] + x[i * n + j];
                }
            }
            Ok((out, vec![1, n]))
        } else {
            let out = (0..m)
                .map(|i| x[i * n..(i + 1) * n].iter().fold(T::zero(), |s, &v| s + v))
                .collect();
            Ok((out, vec![m, 1]))
        }
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("sum", axis)?;
        let (out, shape) = self.reduce(a, axis)?;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(shape, out), Op::Sum(a, axis), ng))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("mean", axis)?;
        let (m, n) = self.dims("mean", a)?;
        let (mut out, shape) = self.reduce(a, axis)?;
        let cnt = T::from_usize(if axis == 0 { m } else { n }).unwrap();
        out.iter_mut().for_each(|x| *x = *x / cnt);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(shape, out), Op::Mean(a, axis), ng))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), ng))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `sqrt(Σ x² + eps)` along `axis`.
    pub fn l2_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        check_axis("l2_norm", axis)?;
        let sq = self.value(a).map(|x| x * x);
        let (m, n) = self.dims("l2_norm", a)?;
        let e = T::from_f64_lossy(eps);
        let out: Vec<T> = if axis == 0 {
            (0..n)
                .map(|j| ((0..m).fold(T::zero(), |s, i| s + sq.data()[i * n + j]) + e).sqrt())
                .collect()
        } else {
            (0..m)
                .map(|i| {
                    (sq.data()[i * n..(i + 1) * n]
                        .iter()
                        .fold(T::zero(), |s, &v| s + v)
                        + e)
                        .sqrt()
                })
                .collect()
        };
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(shape, out), Op::L2Norm(a, axis), ng))
    }

    // ── structure ───────────────────────────────────────────────────

    /// Concatenates along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        check_axis("concat", axis)?;
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims("concat", p))
            .collect::<Result<_>>()?;
        let bad = if axis == 0 {
            dims.iter().any(|d| d.1 != dims[0].1)
        } else {
            dims.iter().any(|d| d.0 != dims[0].0)
        };
        if bad {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat", &shapes));
        }
        let (shape, data) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * dims[0].1);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (vec![rows, dims[0].1], data)
        } else {
            let m = dims[0].0;
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m * cols);
            for i in 0..m {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            (vec![m, cols], data)
        };
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(shape, data),
            Op::Concat(parts.to_vec(), axis),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims("slice_rows", a)?;
        if len == 0 || start + len > m {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {m}", start + len),
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![len, n], data), Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {n}", start + len),
            });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![m, len], data), Op::SliceCols(a, start), ng))
    }

    /// Row gather; doubles as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims("gather_rows", a)?;
        if idx.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of {m}"),
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(src.row_slice(i));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data),
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", &[self.shape(a), shape]));
        }
        let t = self.value(a).clone().reshaped(shape.to_vec());
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// One LSTM cell update from gate pre-activations.
    ///
    /// `pre` is `[n × 4H]` in gate order input, forget, candidate, output;
    /// `c_prev` is `[n × H]`. The result is `[n × 2H]` holding the new hidden
    /// state in the first `H` columns and the new cell state in the last `H`.
    pub fn lstm_gates(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let (n, h4) = self.dims("lstm_gates", pre)?;
        let (cn, h) = self.dims("lstm_gates", c_prev)?;
        if cn != n || h4 != 4 * h {
            return Err(shape_err(
                "lstm_gates",
                &[self.shape(pre), self.shape(c_prev)],
            ));
        }
        let p = self.value(pre).data();
        let c0 = self.value(c_prev).data();
        let mut out = vec![T::zero(); n * 2 * h];
        for r in 0..n {
            for k in 0..h {
                let i = sigmoid(p[r * h4 + k]);
                let f = sigmoid(p[r * h4 + h + k]);
                let g = p[r * h4 + 2 * h + k].tanh();
                let o = sigmoid(p[r * h4 + 3 * h + k]);
                let c = f * c0[r * h + k] + i * g;
                out[r * 2 * h + k] = o * c.tanh();
                out[r * 2 * h + h + k] = c;
            }
        }
        let ng = self.ng(&[pre, c_prev]);
        Ok(self.push(
            Tensor::new(vec![n, 2 * h], out),
            Op::LstmGates(pre, c_prev),
            ng,
        ))
    }

    // ── composites ──────────────────────────────────────────────────

    /// Scales each row to unit length using `sqrt(‖x‖² + eps)` as the norm.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let norm = self.l2_norm(a, 1, eps)?;
        let inv = self.recip(norm)?;
        self.mul_col(a, inv)
    }

    /// Pairwise cosine similarities between the rows of `a[m×d]` and `b[n×d]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let an = self.l2_normalize_rows(a, eps)?;
        let bn = self.l2_normalize_rows(b, eps)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Cosine similarity between two row vectors, shape `[1, 1]`.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ra, _) = self.dims("cosine", a)?;
        let (rb, _) = self.dims("cosine", b)?;
        if ra != 1 || rb != 1 {
            return Err(shape_err("cosine", &[self.shape(a), self.shape(b)]));
        }
        self.cosine_matrix(a, b, eps)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss).to_vec(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
        }

        let mut node_grads = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                node_grads.insert(id, g);
            }
        }
        let mut params = BTreeMap::new();
        if let Some(store) = self.store {
            for (name, t) in store.iter() {
                let g = match self.bound.get(name) {
                    Some(v) => node_grads[&v.0].clone(),
                    None => Tensor::zeros(t.shape().to_vec()),
                };
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients { node_grads, params })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |v: Var, data: Vec<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(data) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, data)),
            }
        };
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(gd, val(*b).data(), &mut da, m, n, k);
                    acc(*a, da, grads);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(val(*a).data(), gd, &mut db, k, m, n);
                    acc(*b, db, grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().into_data(), grads),
            Op::Add(a, b) => {
                acc(*a, gd.to_vec(), grads);
                acc(*b, gd.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec(), grads);
                acc(*b, gd.iter().map(|&x| -x).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, gd.iter().zip(bv).map(|(&g, &b)| g * b).collect(), grads);
                }
                if wants(*b) {
                    acc(*b, gd.iter().zip(av).map(|(&g, &a)| g * a).collect(), grads);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if wants(*a) {
                    acc(*a, gd.iter().zip(bv).map(|(&g, &b)| g / b).collect(), grads);
                }
                if wants(*b) {
                    let d = gd
                        .iter()
                        .zip(y)
                        .zip(bv)
                        .map(|((&g, &y), &b)| -g * y / b)
                        .collect();
                    acc(*b, d, grads);
                }
            }
            Op::AddRow(a, r) => {
                let n = val(*r).len();
                acc(*a, gd.to_vec(), grads);
                if wants(*r) {
                    let mut dr = vec![T::zero(); n];
                    for (i, &g) in gd.iter().enumerate() {
                        dr[i % n] = dr[i % n] + g;
                    }
                    acc(*r, dr, grads);
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r).data();
                let n = rv.len();
                if wants(*a) {
                    acc(
                        *a,
                        gd.iter().enumerate().map(|(i, &g)| g * rv[i % n]).collect(),
                        grads,
                    );
                }
                if wants(*r) {
                    let av = val(*a).data();
                    let mut dr = vec![T::zero(); n];
                    for (i, &g) in gd.iter().enumerate() {
                        dr[i % n] = dr[i % n] + g * av[i];
                    }
                    acc(*r, dr, grads);
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(*c).data();
                let n = val(*a).cols();
                if wants(*a) {
                    acc(
                        *a,
                        gd.iter().enumerate().map(|(i, &g)| g * cv[i / n]).collect(),
                        grads,
                    );
                }
                if wants(*c) {
                    let av = val(*a).data();
                    let mut dc = vec![T::zero(); cv.len()];
                    for (i, &g) in gd.iter().enumerate() {
                        dc[i / n] = dc[i / n] + g * av[i];
                    }
                    acc(*c, dc, grads);
                }
            }
            Op::Scale(a, s) => {
                let s = T::from_f64_lossy(*s);
                acc(*a, gd.iter().map(|&g| g * s).collect(), grads);
            }
            Op::AddScalar(a) => acc(*a, gd.to_vec(), grads),
            Op::Unary(a, f) => {
                let x = val(*a).data();
                let two = one + one;
                let half = one / two;
                let d = gd
                    .iter()
                    .zip(x)
                    .zip(y)
                    .map(|((&g, &x), &y)| {
                        g * match f {
                            Unary::Tanh => one - y * y,
                            Unary::Sigmoid => y * (one - y),
                            Unary::Relu => {
                                if x > T::zero() {
                                    one
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sqrt => half / y,
                            Unary::Recip => -y * y,
                            Unary::Exp => y,
                            Unary::Square => two * x,
                            Unary::Neg => -one,
                        }
                    })
                    .collect();
                acc(*a, d, grads);
            }
            Op::Softmax(a, axis) => {
                let (m, n) = node.value.dims2().unwrap();
                let (lanes, len) = if *axis == 0 { (n, m) } else { (m, n) };
                let mut d = vec![T::zero(); m * n];
                for lane in 0..lanes {
                    let idx = |t: usize| {
                        if *axis == 0 {
                            t * n + lane
                        } else {
                            lane * n + t
                        }
                    };
                    let dot = (0..len).fold(T::zero(), |s, t| s + gd[idx(t)] * y[idx(t)]);
                    for t in 0..len {
                        d[idx(t)] = y[idx(t)] * (gd[idx(t)] - dot);
                    }
                }
                acc(*a, d, grads);
            }
            Op::MaskedSoftmax(a) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let row = i * n..(i + 1) * n;
                    let dot = row.clone().fold(T::zero(), |s, k| s + gd[k] * y[k]);
                    for k in row {
                        d[k] = y[k] * (gd[k] - dot);
                    }
                }
                acc(*a, d, grads);
            }
            Op::Max(a, arg) => {
                let mut d = vec![T::zero(); val(*a).len()];
                for (&k, &g) in arg.iter().zip(gd) {
                    d[k] = d[k] + g;
                }
                acc(*a, d, grads);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (m, n) = val(*a).dims2().unwrap();
                let scale = match node.op {
                    Op::Mean(..) => one / T::from_usize(if *axis == 0 { m } else { n }).unwrap(),
                    _ => one,
                };
                let d = (0..m * n)
                    .map(|k| scale * if *axis == 0 { gd[k % n] } else { gd[k / n] })
                    .collect();
                acc(*a, d, grads);
            }
            Op::SumAll(a) => acc(*a, vec![gd[0]; val(*a).len()], grads),
            Op::L2Norm(a, axis) => {
                let (_, n) = val(*a).dims2().unwrap();
                let x = val(*a).data();
                let d = (0..x.len())
                    .map(|k| {
                        let lane = if *axis == 0 { k % n } else { k / n };
                        gd[lane] * x[k] / y[lane]
                    })
                    .collect();
                acc(*a, d, grads);
            }
            Op::Concat(parts, axis) => {
                let (m, total) = node.value.dims2().unwrap();
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, gd[off..off + len].to_vec(), grads);
                        off += len;
                    }
                } else {
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                        }
                        acc(p, d, grads);
                        col += w;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let n = val(*a).cols();
                    let mut d = vec![T::zero(); val(*a).len()];
                    d[start * n..start * n + gd.len()].copy_from_slice(gd);
                    acc(*a, d, grads);
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let (m, n) = val(*a).dims2().unwrap();
                    let w = node.value.cols();
                    let mut d = vec![T::zero(); m * n];
                    for i in 0..m {
                        d[i * n + start..i * n + start + w]
                            .copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    acc(*a, d, grads);
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let n = val(*a).cols();
                    let mut d = vec![T::zero(); val(*a).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..n {
                            d[i * n + k] = d[i * n + k] + gd[r * n + k];
                        }
                    }
                    acc(*a, d, grads);
                }
            }
            Op::Reshape(a) => acc(*a, gd.to_vec(), grads),
            Op::LstmGates(pre, c_prev) => {
                let p = val(*pre).data();
                let c0 = val(*c_prev).data();
                let h = val(*c_prev).cols();
                let rows = val(*c_prev).rows();
                let h4 = 4 * h;
                let mut dp = vec![T::zero(); rows * h4];
                let mut dc0 = vec![T::zero(); rows * h];
                for r in 0..rows {
                    for k in 0..h {
                        let i = sigmoid(p[r * h4 + k]);
                        let f = sigmoid(p[r * h4 + h + k]);
                        let gg = p[r * h4 + 2 * h + k].tanh();
                        let o = sigmoid(p[r * h4 + 3 * h + k]);
                        let c = y[r * 2 * h + h + k];
                        let tc = c.tanh();
                        let dh = gd[r * 2 * h + k];
                        let dc = gd[r * 2 * h + h + k] + dh * o * (one - tc * tc);
                        dp[r * h4 + k] = dc * gg * i * (one - i);
                        dp[r * h4 + h + k] = dc * c0[r * h + k] * f * (one - f);
                        dp[r * h4 + 2 * h + k] = dc * i * (one - gg * gg);
                        dp[r * h4 + 3 * h + k] = dh * tc * o * (one - o);
                        dc0[r * h + k] = dc * f;
                    }
                }
                acc(*pre, dp, grads);
                acc(*c_prev, dc0, grads);
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    node_grads: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a gradient-requiring leaf (zeros when the loss does not
    /// depend on it). `None` for constants and intermediate nodes.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.node_grads.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// One entry per parameter in the bound store, zeros for unused ones.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
