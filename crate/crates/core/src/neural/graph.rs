//! Reverse-mode automatic differentiation over 2-D tensors.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key columns each query row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    /// Rows and columns attend only within equal group labels.
    pub fn blocks(groups: &[usize]) -> Self {
        Self::from_fn(groups.len(), groups.len(), |r, c| groups[r] == groups[c])
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols.max(1), i % cols.max(1))).collect();
        Self { rows, cols, allowed }
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    GatherRows(Var, Rc<[usize]>),
    ReplaceRows(Var, Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Expand(Var, Rc<[usize]>),
    Reshape(Var),
    CrossEntropy(Var, Rc<[Option<usize>]>, Tensor),
    StraightThrough(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass recorded for differentiation. Parameters are read from
/// the store and appear as leaves; constants are leaves without gradient.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    var_params: HashMap<usize, usize>,
    nonfinite: Option<&'static str>,
}

/// Gradients indexed like the parameter store; `None` for unused blocks.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub blocks: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self { blocks: vec![None; params.len()] }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.blocks[id].as_ref()
    }

    /// `self += other`, block by block.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.blocks.iter_mut().flatten() {
            t.data.iter_mut().for_each(|x| *x *= c);
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), var_params: HashMap::new(), nonfinite: None }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Name of the first op that produced a NaN or infinity.
    pub fn nonfinite(&self) -> Option<&'static str> {
        self.nonfinite
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf for a named parameter block, created once per graph.
    pub fn param(&mut self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("unknown parameter block {name}"));
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.tensor(id).clone(), Op::Leaf, "param");
        self.param_vars.insert(id, v);
        self.var_params.insert(v.0, id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out.data, 0.0);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul_bt inner dimensions");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, true, &mut out.data, 0.0);
        self.push(out, Op::MatMulBT(a, b), "matmul_bt")
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "{name} shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor::new(x.shape.clone(), data);
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(row), (1, n), "{name} expects a 1 × {n} row");
        let r = &self.value(row).data;
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (x, y) in out.data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x = f(*x, *y);
            }
        }
        self.push(out, op, name)
    }

    /// Add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, y| x + y, Op::AddRow(a, row), "add_row")
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, y| x * y, Op::MulRow(a, row), "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Row-wise softmax. Masked entries get probability zero, as if their
    /// logits were −∞.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let (m, n) = self.dims(a);
        if let Some(mask) = mask {
            assert_eq!((mask.rows, mask.cols), (m, n), "mask shape");
        }
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|mk| mk.allows(i, j));
            let max = (0..n).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if allowed(j) { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            if sum > 0.0 {
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std), "layer_norm")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(out, Op::Gelu(a), "gelu")
    }

    /// Rows of `table` at `ids`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (m, n) = self.dims(table);
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < m, "row {id} out of range for {m} rows");
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), n], data);
        self.push(out, Op::GatherRows(table, ids.into()), "gather_rows")
    }

    /// Copy of `base` with row `rows[j]` replaced by row `j` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Var {
        let (_, n) = self.dims(base);
        assert_eq!(self.dims(src), (rows.len(), n), "replace_rows source shape");
        let mut out = self.value(base).clone();
        for (j, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.value(src).row(j));
        }
        self.push(out, Op::ReplaceRows(base, src, rows.into()), "replace_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        assert!(parts.iter().all(|&p| self.dims(p).0 == m), "concat_cols row counts");
        let n: usize = widths.iter().sum();
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let mut c = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.data[i * n + c..i * n + c + w].copy_from_slice(self.value(p).row(i));
                c += w;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(start + len <= n, "slice_cols out of range");
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.dims(parts[0]).1;
        assert!(parts.iter().all(|&p| self.dims(p).1 == n), "concat_rows widths");
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let m = data.len() / n.max(1);
        self.push(Tensor::new(vec![m, n], data), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// `out[t1, t2] = s[groups[t1], groups[t2]]`.
    pub fn expand(&mut self, s: Var, groups: &[usize]) -> Var {
        let (b, b2) = self.dims(s);
        assert_eq!(b, b2, "expand needs a square matrix");
        let t = groups.len();
        let sv = self.value(s);
        let mut out = Tensor::zeros(t, t);
        for (i, &gi) in groups.iter().enumerate() {
            assert!(gi < b, "group {gi} out of range for {b}");
            let src = sv.row(gi);
            for (o, &gj) in out.data[i * t..(i + 1) * t].iter_mut().zip(groups) {
                *o = src[gj];
            }
        }
        self.push(out, Op::Expand(s, groups.into()), "expand")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.data.len(), rows * cols, "reshape size");
        out.shape = vec![rows, cols];
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Summed negative log-likelihood of `targets` under the row-wise
    /// softmax of `logits`; rows with no target contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (m, n) = self.dims(logits);
        assert_eq!(targets.len(), m, "one target per row");
        let mut probs = self.value(logits).clone();
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let row = &mut probs.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
            if let Some(t) = *target {
                assert!(t < n, "target {t} out of range for {n} classes");
                let logit = self.nodes[logits.0].value.data[i * n + t];
                total += sum.ln() + max - logit;
            }
        }
        let op = Op::CrossEntropy(logits, targets.into(), probs);
        self.push(Tensor::new(vec![1, 1], vec![total]), op, "cross_entropy")
    }

    /// Forward value `quantized`, backward identity into `input`.
    pub fn straight_through(&mut self, input: Var, quantized: &Tensor) -> Var {
        assert_eq!(self.value(input).shape, quantized.shape, "straight_through shapes");
        self.push(quantized.clone(), Op::StraightThrough(input), "straight_through")
    }

    /// Constant copy of a value, cut from the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|x| x * x).sum();
        self.push(Tensor::new(vec![1, 1], vec![s]), Op::SumSquares(a), "sum_squares")
    }

    /// Gradients of the scalar `output` with respect to every parameter
    /// block used in this graph.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.dims(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ((m, k), (_, n)) = (self.dims(*a), self.dims(*b));
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    gemm(m, n, k, &gy.data, false, bv, true, &mut buf(&mut grads, *a, m, k).data, 1.0);
                    gemm(k, m, n, av, true, &gy.data, false, &mut buf(&mut grads, *b, k, n).data, 1.0);
                }
                Op::MatMulBT(a, b) => {
                    let ((m, k), (n, _)) = (self.dims(*a), self.dims(*b));
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    gemm(m, n, k, &gy.data, false, bv, false, &mut buf(&mut grads, *a, m, k).data, 1.0);
                    gemm(n, m, k, &gy.data, true, av, false, &mut buf(&mut grads, *b, n, k).data, 1.0);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &gy);
                    acc(&mut grads, *b, &gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &gy);
                    let (m, n) = self.dims(*b);
                    let g = buf(&mut grads, *b, m, n);
                    g.data.iter_mut().zip(&gy.data).for_each(|(x, y)| *x -= y);
                }
                Op::Mul(a, b) => {
                    let (m, n) = self.dims(*a);
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let ga = buf(&mut grads, *a, m, n);
                    for ((x, y), bb) in ga.data.iter_mut().zip(&gy.data).zip(bv) {
                        *x += y * bb;
                    }
                    let gb = buf(&mut grads, *b, m, n);
                    for ((x, y), aa) in gb.data.iter_mut().zip(&gy.data).zip(av) {
                        *x += y * aa;
                    }
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *a, &gy);
                    let (m, n) = self.dims(*a);
                    let gr = buf(&mut grads, *r, 1, n);
                    for i in 0..m {
                        for (x, y) in gr.data.iter_mut().zip(&gy.data[i * n..(i + 1) * n]) {
                            *x += y;
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (m, n) = self.dims(*a);
                    let (av, rv) = (&self.value(*a).data, &self.value(*r).data);
                    let ga = buf(&mut grads, *a, m, n);
                    for (ga_row, gy_row) in ga.data.chunks_mut(n).zip(gy.data.chunks(n)) {
                        for ((x, g), r) in ga_row.iter_mut().zip(gy_row).zip(rv) {
                            *x += g * r;
                        }
                    }
                    let gr = buf(&mut grads, *r, 1, n);
                    for i in 0..m {
                        for j in 0..n {
                            gr.data[j] += gy.data[i * n + j] * av[i * n + j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (m, n) = self.dims(*a);
                    let ga = buf(&mut grads, *a, m, n);
                    ga.data.iter_mut().zip(&gy.data).for_each(|(x, y)| *x += c * y);
                }
                Op::Softmax(a) => {
                    let (m, n) = self.dims(*a);
                    let y = &node.value.data;
                    let ga = buf(&mut grads, *a, m, n);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gy.data[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga.data[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm(a, inv_std) => {
                    let (m, n) = self.dims(*a);
                    let y = &node.value.data;
                    let ga = buf(&mut grads, *a, m, n);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gy.data[i * n..(i + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga.data[i * n + j] += inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let (m, n) = self.dims(*a);
                    let av = &self.value(*a).data;
                    let ga = buf(&mut grads, *a, m, n);
                    for ((x, y), v) in ga.data.iter_mut().zip(&gy.data).zip(av) {
                        *x += y * gelu_grad(*v);
                    }
                }
                Op::GatherRows(table, ids) => {
                    let (m, n) = self.dims(*table);
                    let gt = buf(&mut grads, *table, m, n);
                    for (j, &id) in ids.iter().enumerate() {
                        for (x, y) in gt.row_mut(id).iter_mut().zip(gy.row(j)) {
                            *x += y;
                        }
                    }
                }
                Op::ReplaceRows(base, src, rows) => {
                    let (m, n) = self.dims(*base);
                    let mut through = gy.clone();
                    for &r in rows.iter() {
                        through.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    let gs = buf(&mut grads, *src, rows.len(), n);
                    for (j, &r) in rows.iter().enumerate() {
                        for (x, y) in gs.row_mut(j).iter_mut().zip(gy.row(r)) {
                            *x += y;
                        }
                    }
                    debug_assert_eq!(through.rows(), m);
                    acc(&mut grads, *base, &through);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (gy.rows(), gy.cols());
                    let mut c = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let gp = buf(&mut grads, p, m, w);
                        for i in 0..m {
                            for (x, y) in gp.row_mut(i).iter_mut().zip(&gy.data[i * n + c..i * n + c + w]) {
                                *x += y;
                            }
                        }
                        c += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.dims(*a);
                    let w = gy.cols();
                    let ga = buf(&mut grads, *a, m, n);
                    for i in 0..m {
                        for (x, y) in ga.data[i * n + start..i * n + start + w].iter_mut().zip(gy.row(i)) {
                            *x += y;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (m, n) = self.dims(p);
                        let gp = buf(&mut grads, p, m, n);
                        for (x, y) in gp.data.iter_mut().zip(&gy.data[offset..offset + m * n]) {
                            *x += y;
                        }
                        offset += m * n;
                    }
                }
                Op::Expand(s, groups) => {
                    let (b, _) = self.dims(*s);
                    let t = groups.len();
                    let gs = buf(&mut grads, *s, b, b);
                    for (i, &gi) in groups.iter().enumerate() {
                        for (j, &gj) in groups.iter().enumerate() {
                            gs.data[gi * b + gj] += gy.data[i * t + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    let (m, n) = self.dims(*a);
                    let mut g = gy.clone();
                    g.shape = vec![m, n];
                    acc(&mut grads, *a, &g);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let (m, n) = self.dims(*logits);
                    let scale = gy.data[0];
                    let gl = buf(&mut grads, *logits, m, n);
                    for (i, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl.data[i * n + j] += scale * (probs.data[i * n + j] - onehot);
                        }
                    }
                }
                Op::StraightThrough(a) => acc(&mut grads, *a, &gy),
                Op::SumSquares(a) => {
                    let (m, n) = self.dims(*a);
                    let scale = 2.0 * gy.data[0];
                    let av = &self.value(*a).data;
                    let ga = buf(&mut grads, *a, m, n);
                    ga.data.iter_mut().zip(av).for_each(|(x, v)| *x += scale * v);
                }
            }
        }
        let mut out = Gradients::zeros_like(self.params);
        for (&var, &id) in &self.var_params {
            out.blocks[id] = grads[var].take();
        }
        out
    }
}

fn buf(grads: &mut [Option<Tensor>], v: Var, m: usize, n: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(m, n))
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
