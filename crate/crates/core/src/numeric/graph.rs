//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! node list backwards is a valid reverse topological order.

use std::collections::BTreeMap;

use crate::error::{precondition, Error, Result};
use crate::numeric::kernels::{self, matmul_nt, matmul_tn};
use crate::numeric::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    StandardizeRows(Var, f64),
    NormalizeRows(Var),
    CrossEntropyRows(Var, Vec<usize>),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. Confined to one thread while it is being built.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<usize, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters are recorded as constants: forward values are
    /// identical, nothing receives a gradient.
    pub fn without_grad() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let track = self.track_params;
        self.push(t, Op::Leaf, track)
    }

    /// Binds an external parameter by key. Repeated binds of the same key
    /// return the same node so contributions accumulate.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(key, v);
        v
    }

    /// Makes later `param(key, ..)` calls resolve to `v`. Used to probe a
    /// single stored parameter with an external node.
    pub fn bind_param(&mut self, key: usize, v: Var) {
        self.params.insert(key, v);
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = Tensor::matrix(r, c, self.value(a).data().iter().map(|x| x * s).collect())
            .expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(row).len() != c {
            return Err(self.shape_err("add_row", a, row));
        }
        let bias = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddRow(a, row), ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(col).len() != r {
            return Err(self.shape_err("mul_col", a, col));
        }
        let w = self.value(col).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o *= w[i]);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MulCol(a, col), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let out = out.reshape(vec![self.dims(a).0, self.dims(a).1]).expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = kernels::softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise logsumexp as an `r x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.dims(a);
        let v = self.value(a);
        let data = (0..r).map(|i| kernels::logsumexp(v.row(i))).collect();
        let out = Tensor::matrix(r, 1, data).expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::LogSumExpRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(ra, ca + cb, out)?, Op::ConcatCols(a, b), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return precondition("concat_rows of nothing");
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return precondition("gather_rows with no indices");
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            out.extend_from_slice(self.value(a).row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    /// Output has `rows` rows; row `idx[i]` receives row `i` of `a` (summed on
    /// repeats), all others are zero.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r {
            return precondition("scatter_rows index count must equal row count");
        }
        let mut out = vec![0.0; rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(Error::Index { index: dst, len: rows });
            }
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(self.value(a).row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ScatterRows(a, idx.to_vec()), ng))
    }

    /// Picks elements `(row, col)` into a `k x 1` column.
    pub fn gather_elems(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if at.is_empty() {
            return precondition("gather_elems with no indices");
        }
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(Error::Index {
                    index: i * c + j,
                    len: r * c,
                });
            }
            out.push(self.value(a).at(i, j));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(at.len(), 1, out)?, Op::GatherElems(a, at.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = Tensor::matrix(r, c, self.value(a).data().iter().map(|x| x * x).collect())
            .expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Var {
        let out = kernels::standardize_rows(self.value(a), eps);
        let ng = self.ng(a);
        self.push(out, Op::StandardizeRows(a, eps), ng)
    }

    /// Divides each row by its sum. Rows must have nonzero sums.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            let s: f64 = out[i * c..(i + 1) * c].iter().sum();
            if s == 0.0 {
                return precondition("normalize_rows on a zero-sum row");
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o /= s);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::NormalizeRows(a), ng))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return precondition("one target per logit row");
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index { index: t, len: c });
            }
            total += kernels::logsumexp(v.row(i)) - v.at(i, t);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropyRows(logits, targets.to_vec()),
            ng,
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(out), Op::Mse(a, b), ng))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::Precondition("weighted_sum of nothing".into()))
    }

    /// Single-head scaled dot-product attention. `mask`, when given, is an
    /// additive `Tq x Tk` constant (use a large negative value to block).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (_, d) = self.dims(q);
        if d == 0 {
            return precondition("attention with zero feature dimension");
        }
        if self.dims(k).1 != d || self.dims(k).0 != self.dims(v).0 {
            return Err(self.shape_err("attention", q, k));
        }
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt)?;
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(m) = mask {
            let mv = self.constant(m.clone());
            scores = self.add(scores, mv)?;
        }
        let w = self.softmax_rows(scores);
        self.matmul(w, v)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return precondition("backward requires a scalar loss");
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn acc(&mut self, target: Var, contrib: Vec<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if self.ng(a) {
                    let da = matmul_nt(dy, self.value(b).data(), m, n, k);
                    self.acc(a, da);
                }
                if self.ng(b) {
                    let db = matmul_tn(self.value(a).data(), dy, m, k, n);
                    self.acc(b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(a, dy.to_vec());
                self.acc(b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(a, dy.to_vec());
                self.acc(b, dy.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let da = dy.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.acc(a, da);
                }
                if self.ng(b) {
                    let db = dy.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.acc(b, db);
                }
            }
            Op::Scale(a, s) => self.acc(a, dy.iter().map(|g| g * s).collect()),
            Op::AddRow(a, row) => {
                let (r, c) = self.dims(a);
                self.acc(a, dy.to_vec());
                if self.ng(row) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        db.iter_mut().zip(&dy[i * c..(i + 1) * c]).for_each(|(d, g)| *d += g);
                    }
                    self.acc(row, db);
                }
            }
            Op::MulCol(a, col) => {
                let (r, c) = self.dims(a);
                if self.ng(a) {
                    let w = self.value(col).data();
                    let mut da = dy.to_vec();
                    for i in 0..r {
                        da[i * c..(i + 1) * c].iter_mut().for_each(|d| *d *= w[i]);
                    }
                    self.acc(a, da);
                }
                if self.ng(col) {
                    let x = self.value(a).data();
                    let dc = (0..r)
                        .map(|i| {
                            dy[i * c..(i + 1) * c]
                                .iter()
                                .zip(&x[i * c..(i + 1) * c])
                                .map(|(g, v)| g * v)
                                .sum()
                        })
                        .collect();
                    self.acc(col, dc);
                }
            }
            Op::Gelu(a) => {
                let da = dy
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                self.acc(a, da);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.dims(a);
                let y = self.nodes[i].value.data();
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &dy[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.acc(a, da);
            }
            Op::LogSumExpRows(a) => {
                let sm = kernels::softmax_rows(self.value(a));
                let (r, c) = self.dims(a);
                let mut da = sm.into_data();
                for row in 0..r {
                    da[row * c..(row + 1) * c].iter_mut().for_each(|d| *d *= dy[row]);
                }
                self.acc(a, da);
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(a);
                // dy is c x r
                let mut da = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        da[x * c + y] = dy[y * r + x];
                    }
                }
                self.acc(a, da);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.dims(a);
                let cb = self.dims(b).1;
                let w = ca + cb;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in 0..r {
                    da.extend_from_slice(&dy[row * w..row * w + ca]);
                    db.extend_from_slice(&dy[row * w + ca..(row + 1) * w]);
                }
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).len();
                    self.acc(p, dy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.dims(a);
                let mut da = vec![0.0; r * c];
                for (k, &src) in idx.iter().enumerate() {
                    da[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&dy[k * c..(k + 1) * c])
                        .for_each(|(d, g)| *d += g);
                }
                self.acc(a, da);
            }
            Op::ScatterRows(a, idx) => {
                let c = self.dims(a).1;
                let mut da = Vec::with_capacity(idx.len() * c);
                for &dst in &idx {
                    da.extend_from_slice(&dy[dst * c..(dst + 1) * c]);
                }
                self.acc(a, da);
            }
            Op::GatherElems(a, at) => {
                let (r, c) = self.dims(a);
                let mut da = vec![0.0; r * c];
                for (k, &(x, y)) in at.iter().enumerate() {
                    da[x * c + y] += dy[k];
                }
                self.acc(a, da);
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                self.acc(a, vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                self.acc(a, vec![dy[0] / n as f64; n]);
            }
            Op::Square(a) => {
                let da = dy
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                self.acc(a, da);
            }
            Op::StandardizeRows(a, eps) => {
                let (r, c) = self.dims(a);
                let x = self.value(a).data();
                let y = self.nodes[i].value.data();
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let xs = &x[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &dy[row * c..(row + 1) * c];
                    let gm = gs.iter().sum::<f64>() / c as f64;
                    let gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[row * c + j] = inv * (gs[j] - gm - ys[j] * gy);
                    }
                }
                self.acc(a, da);
            }
            Op::NormalizeRows(a) => {
                let (r, c) = self.dims(a);
                let x = self.value(a).data();
                let y = self.nodes[i].value.data();
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let s: f64 = x[row * c..(row + 1) * c].iter().sum();
                    let gs = &dy[row * c..(row + 1) * c];
                    let ys = &y[row * c..(row + 1) * c];
                    let dot: f64 = gs.iter().zip(ys).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        da[row * c + j] = (gs[j] - dot) / s;
                    }
                }
                self.acc(a, da);
            }
            Op::CrossEntropyRows(logits, targets) => {
                let (r, c) = self.dims(logits);
                let mut da = kernels::softmax_rows(self.value(logits)).into_data();
                for (row, &t) in targets.iter().enumerate() {
                    da[row * c + t] -= 1.0;
                }
                let s = dy[0] / r as f64;
                da.iter_mut().for_each(|d| *d *= s);
                self.acc(logits, da);
            }
            Op::Mse(a, b) => {
                let n = self.value(a).len() as f64;
                let d: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| 2.0 * (x - y) / n * dy[0])
                    .collect();
                if self.ng(b) {
                    self.acc(b, d.iter().map(|v| -v).collect());
                }
                self.acc(a, d);
            }
        }
    }
}
