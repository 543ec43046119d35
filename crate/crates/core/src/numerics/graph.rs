//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Graph`] evaluates immediately and appends a node
//! recording its inputs. Nodes are therefore stored in topological order, and
//! [`Graph::backward`] walks them once in reverse, accumulating gradients
//! additively where a value fans out.
//!
//! Most operations work on matrices (rank-2 tensors); reductions and loss
//! nodes produce scalars. Parameters enter the graph by name, so the resulting
//! [`Gradients`] can be matched back to a [`ParamStore`].

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, log_softmax_in_place, softmax_in_place, Strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, iterated in name order.
pub type ParamStore = BTreeMap<String, Tensor>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Mask(Var, Tensor),
    Transpose(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    OuterAdd(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    External(Var, Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of evaluated operations.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: HashSet<String>,
}

/// Gradients of a backward pass, kept for leaf nodes only.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.leaves.get(v))
    }

    /// Gradient for every parameter of `store`; parameters the loss does not
    /// reach get zeros.
    pub fn for_params(&self, store: &ParamStore) -> ParamStore {
        store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .param(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which the named parameters are registered as constants.
    pub fn with_frozen<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Graph {
            frozen: names.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// An unnamed differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A named parameter leaf. Repeated calls with one name return one node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = !self.frozen.contains(name);
        let v = self.push(t.clone(), Op::Param, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Looks `name` up in `store` and registers it.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        Ok(self.param(name, t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).require_matrix("matmul_t")?;
        let (n, k2) = self.value(b).require_matrix("matmul_t")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::row(k),
            self.value(b).data(),
            Strides::transposed(k),
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need ≥1 part and axis 0 or 1"));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).require_matrix("concat"))
            .collect::<Result<_>>()?;
        let out = if axis == 0 {
            let cols = shapes[0].1;
            if shapes.iter().any(|s| s.1 != cols) {
                return Err(Error::dim("concat", "column counts differ"));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let rows = shapes.iter().map(|s| s.0).sum();
            Tensor::new(vec![rows, cols], data)?
        } else {
            let rows = shapes[0].0;
            if shapes.iter().any(|s| s.0 != rows) {
                return Err(Error::dim("concat", "row counts differ"));
            }
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Half-open range `start..end` of a matrix along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).require_matrix("slice")?;
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start > end || end > extent {
            return Err(Error::dim(
                "slice",
                format!("{start}..{end} on axis {axis} of {rows}x{cols}"),
            ));
        }
        let av = self.value(a);
        let out = if axis == 0 {
            Tensor::new(
                vec![end - start, cols],
                av.data()[start * cols..end * cols].to_vec(),
            )?
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&av.row(r)[start..end]);
            }
            Tensor::new(vec![rows, end - start], data)?
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::Slice(a, axis, start, end), ng))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(&mask, "mask", |x, m| x * m)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Mask(a, mask), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim("layer_norm", "gain/bias width"));
        }
        let rows = xv.rows();
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((v, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Rows `ids` of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).require_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), ng))
    }

    /// Pairwise row sums: row `i·|b| + j` of the result is `a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, h) = self.value(a).require_matrix("outer_add")?;
        let (tb, h2) = self.value(b).require_matrix("outer_add")?;
        if h != h2 {
            return Err(Error::dim("outer_add", format!("widths {h} vs {h2}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ta * tb * h);
        for i in 0..ta {
            let ar = av.row(i);
            for j in 0..tb {
                data.extend(ar.iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        let out = Tensor::new(vec![ta * tb, h], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::OuterAdd(a, b), ng))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("weighted_sum", "terms must be scalars"));
            }
            total += w * t.item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// A scalar computed outside the graph from `input`, with its local
    /// gradient `d value / d input` supplied by the caller.
    pub fn external(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::dim("external", "gradient shape differs from input"));
        }
        let ng = self.ng(input);
        Ok(self.push(Tensor::scalar(value), Op::External(input, grad), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::dim("backward", "seed shape differs from root"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: self.params.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Input | Op::Param) {
                out.leaves.insert(Var(i), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let ga = slot(grads, *a, val(*a).shape());
                    gemm(m, n, k, g.data(), Strides::row(n), val(*b).data(), Strides::transposed(n), ga.data_mut(), 1.0);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, val(*b).shape());
                    gemm(k, m, n, val(*a).data(), Strides::transposed(k), g.data(), Strides::row(n), gb.data_mut(), 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if wants(*a) {
                    let ga = slot(grads, *a, val(*a).shape());
                    gemm(m, n, k, g.data(), Strides::row(n), val(*b).data(), Strides::row(k), ga.data_mut(), 1.0);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, val(*b).shape());
                    gemm(n, m, k, g.data(), Strides::transposed(n), val(*a).data(), Strides::row(k), gb.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, v, val(v).shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    slot(grads, *a, val(*a).shape()).add_assign(g);
                }
                if wants(*row) {
                    let gr = slot(grads, *row, val(*row).shape());
                    for r in 0..g.rows() {
                        for (x, y) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if wants(x) {
                        let other = val(y).data();
                        let gx = slot(grads, x, val(x).shape());
                        for ((d, gi), o) in gx.data_mut().iter_mut().zip(g.data()).zip(other) {
                            *d += gi * o;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, val(*a).shape());
                for (d, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += s * gi;
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, val(*a).shape());
                for ((d, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, val(*a).shape());
                for ((d, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = slot(grads, *a, val(*a).shape());
                for ((d, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, val(*a).shape());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for ((d, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d += gi - yi.exp() * gs;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, val(*a).shape());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, z)| x * z).sum();
                    for ((d, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (val(p).shape()[0], val(p).shape()[1]);
                    if wants(p) {
                        let gp = slot(grads, p, val(p).shape());
                        if *axis == 0 {
                            let cols = g.cols();
                            for (d, gi) in gp.data_mut().iter_mut().zip(&g.data()[offset * cols..(offset + pr) * cols]) {
                                *d += gi;
                            }
                        } else {
                            for r in 0..pr {
                                for (d, gi) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + pc]) {
                                    *d += gi;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice(a, axis, start, end) => {
                let ga = slot(grads, *a, val(*a).shape());
                let cols = ga.cols();
                if *axis == 0 {
                    for (d, gi) in ga.data_mut()[start * cols..end * cols].iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                } else {
                    for r in 0..ga.rows() {
                        for (d, gi) in ga.row_mut(r)[*start..*end].iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Mask(a, m) => {
                let ga = slot(grads, *a, val(*a).shape());
                for ((d, gi), mi) in ga.data_mut().iter_mut().zip(g.data()).zip(m.data()) {
                    *d += gi * mi;
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?;
                slot(grads, *a, val(*a).shape()).add_assign(&gt);
            }
            Op::Sum(a) => {
                let s = g.item();
                for d in slot(grads, *a, val(*a).shape()).data_mut() {
                    *d += s;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                if wants(*gain) {
                    let gg = slot(grads, *gain, val(*gain).shape());
                    for r in 0..xhat.rows() {
                        for ((d, gi), xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += gi * xh;
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, val(*bias).shape());
                    for r in 0..xhat.rows() {
                        for (d, gi) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
                if wants(*x) {
                    let gain_v = val(*gain).data().to_vec();
                    let gx = slot(grads, *x, val(*x).shape());
                    let mut dxh = vec![0.0; n];
                    for r in 0..xhat.rows() {
                        for ((d, gi), gn) in dxh.iter_mut().zip(g.row(r)).zip(&gain_v) {
                            *d = gi * gn;
                        }
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((out, d), xh) in gx.row_mut(r).iter_mut().zip(&dxh).zip(xhat.row(r)) {
                            *out += inv_std[r] * (d - mean_d - xh * mean_dx);
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let gt = slot(grads, *table, val(*table).shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (d, gi) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += gi;
                    }
                }
            }
            Op::OuterAdd(a, b) => {
                let tb = val(*b).shape()[0];
                let ta = val(*a).shape()[0];
                if wants(*a) {
                    let ga = slot(grads, *a, val(*a).shape());
                    for i in 0..ta {
                        for j in 0..tb {
                            for (d, gi) in ga.row_mut(i).iter_mut().zip(g.row(i * tb + j)) {
                                *d += gi;
                            }
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, val(*b).shape());
                    for i in 0..ta {
                        for j in 0..tb {
                            for (d, gi) in gb.row_mut(j).iter_mut().zip(g.row(i * tb + j)) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let s = g.item();
                for &(v, w) in terms {
                    if wants(v) {
                        slot(grads, v, val(v).shape()).data_mut()[0] += w * s;
                    }
                }
            }
            Op::External(input, local) => {
                let s = g.item();
                let gi = slot(grads, *input, val(*input).shape());
                for (d, l) in gi.data_mut().iter_mut().zip(local.data()) {
                    *d += s * l;
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
