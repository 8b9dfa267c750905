//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value; node inputs
//! always precede the node, so a single reverse sweep over the node list is a
//! valid topological traversal. Parameters enter as leaves that share the
//! value buffer of their [`ParamStore`] entry; [`Graph::backward`] adds the
//! resulting gradients into the store's accumulators.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttentionLayout, AttentionShapes};
use super::scalar::{gemm, MatView, MatViewMut};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, shapes: AttentionShapes, layout: Arc<AttentionLayout>, probs: Vec<T> },
    Dropout { x: Var, keep: Vec<T> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Vec<bool>, probs: Vec<T>, count: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Softmax(_) => "softmax",
            Op::Attention { .. } => "attention",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), train: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training-mode graph; dropout masks come from a stream seeded by `seed`.
    pub fn train(seed: u64) -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), train: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value: Arc::new(value), shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives gradients.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node { value: t.shared_data(), shape: t.shape().to_vec(), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(&t))
    }

    /// Records a parameter leaf. Repeated calls for the same id return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            value: t.shared_data(),
            shape: t.shape().to_vec(),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    /// `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] x b^T` where `b` is `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatView::row_major(self.value(a), m, k);
            let bv = if trans_b {
                MatView::row_major(self.value(b), n, k).t()
            } else {
                MatView::row_major(self.value(b), k, n)
            };
            gemm(T::one(), av, bv, T::zero(), MatViewMut::row_major(&mut out, m, n));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: s.to_vec(), rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![c, r], Op::Transpose(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    /// Adds a bias vector `[n]` to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            add_into(row, b);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        self.push(out, self.shape(x).to_vec(), Op::Scale(x, c), ng)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("scale_by", x, s));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, self.shape(x).to_vec(), Op::ScaleBy(x, s), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let ng = self.needs(x);
        self.push(out, self.shape(x).to_vec(), Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.needs(x);
        self.push(out, self.shape(x).to_vec(), Op::Tanh(x), ng)
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(cols).unwrap();
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, self.shape(x).to_vec(), Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Row lookup `table[ids[i]]`, i.e. an embedding layer.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape { op: "gather", lhs: s.to_vec(), rhs: vec![ids.len()] });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("token id {bad} out of range for vocabulary {v}")));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather with no ids"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(out, vec![ids.len(), d], Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    /// Softmax over the last dimension with max subtraction. NaN inputs
    /// propagate to NaN outputs.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push(out, self.shape(x).to_vec(), Op::Softmax(x), ng)
    }

    /// Multi-head scaled dot-product attention; `q` is `[Tq, d]`, `k` and `v`
    /// are `[Tk, d]`, and `layout` assigns visibility per packed block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttentionLayout>) -> Result<Var> {
        let shapes = AttentionShapes::validate(self.shape(q), self.shape(k), self.shape(v), heads, &layout)?;
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), &shapes, &layout);
        let shape = vec![shapes.q_rows, shapes.dim];
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, shape, Op::Attention { q, k, v, shapes, layout, probs }, ng))
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let keep: Vec<T> = (0..n).map(|_| if self.rng.random::<f64>() < p { T::zero() } else { scale }).collect();
        let out = self.value(x).iter().zip(&keep).map(|(&a, &m)| a * m).collect();
        let ng = self.needs(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Dropout { x, keep }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::Mean(x), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [T, V]`, over rows with `ignore[i] == false`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] != ignore.len() {
            return Err(Error::Shape { op: "cross_entropy", lhs: s.to_vec(), rhs: vec![targets.len(), ignore.len()] });
        }
        let (rows, vocab) = (s[0], s[1]);
        let count = ignore.iter().filter(|&&m| !m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let lv = self.value(logits);
        for r in 0..rows {
            if ignore[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::invalid(format!("target {t} out of range for vocabulary {vocab}")));
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            softmax_in_place(p);
        }
        let loss = total / T::from_usize(count).unwrap();
        let ng = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), ignore: ignore.to_vec(), probs, count };
        Ok(self.push(vec![loss], vec![1], op, ng))
    }

    /// Reverse sweep from the scalar `loss`, accumulating into the gradient
    /// buffers of every parameter leaf that requires gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape { op: "backward", lhs: self.shape(loss).to_vec(), rhs: vec![1] });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if id.0 >= store.len() {
                    return Err(Error::invalid("graph parameter not present in store"));
                }
                let t = store.get_mut(*id);
                if t.requires_grad() {
                    for (a, &b) in t.grad_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = node.shape[1];
                let gv = MatView::row_major(g, m, n);
                let bval = self.value(*b);
                let aval = self.value(*a);
                acc(*a, &mut |da| {
                    // dA = dC * op(B)^T
                    let bt = if *trans_b {
                        MatView::row_major(bval, n, k)
                    } else {
                        MatView::row_major(bval, k, n).t()
                    };
                    gemm(T::one(), gv, bt, T::one(), MatViewMut::row_major(da, m, k));
                });
                acc(*b, &mut |db| {
                    if *trans_b {
                        // dB [n,k] = dC^T A
                        gemm(T::one(), gv.t(), MatView::row_major(aval, m, k), T::one(), MatViewMut::row_major(db, sb[0], sb[1]));
                    } else {
                        gemm(T::one(), MatView::row_major(aval, m, k).t(), gv, T::one(), MatViewMut::row_major(db, k, n));
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let cols = self.shape(*bias)[0];
                acc(*bias, &mut |db| {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                for (d, &gg) in dx.iter_mut().zip(g) {
                    *d += gg * *c;
                }
            }),
            Op::ScaleBy(x, s) => {
                let c = self.value(*s)[0];
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for (d, &gg) in dx.iter_mut().zip(g) {
                        *d += gg * c;
                    }
                });
                acc(*s, &mut |ds| {
                    ds[0] += g.iter().zip(xv).map(|(&gg, &v)| gg * v).sum::<T>();
                });
            }
            Op::Relu(x) => {
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for ((d, &gg), &yy) in dx.iter_mut().zip(g).zip(y.iter()) {
                        if yy > T::zero() {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for ((d, &gg), &yy) in dx.iter_mut().zip(g).zip(y.iter()) {
                        *d += gg * (T::one() - yy * yy);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.shape(*gain)[0];
                let gv = self.value(*gain);
                acc(*gain, &mut |dg| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in g.chunks(cols) {
                        add_into(db, grow);
                    }
                });
                let n = T::from_usize(cols).unwrap();
                acc(*x, &mut |dx| {
                    let mut dh = vec![T::zero(); cols];
                    for (r, ((dxr, grow), hrow)) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            dh[c] = grow[c] * gv[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            dxr[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |dt| {
                    for (row, &i) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[i * d..(i + 1) * d], row);
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(&node.shape);
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for ((dxr, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            dxr[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, shapes, layout, probs } => {
                let (dq, dk, dv) =
                    attention::backward(g, self.value(*q), self.value(*k), self.value(*v), probs, shapes, layout);
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            Op::Dropout { x, keep } => acc(*x, &mut |dx| {
                for ((d, &gg), &m) in dx.iter_mut().zip(g).zip(keep) {
                    *d += gg * m;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(*count).unwrap();
                acc(*logits, &mut |dl| {
                    for (r, drow) in dl.chunks_mut(vocab).enumerate() {
                        if ignore[r] {
                            continue;
                        }
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for c in 0..vocab {
                            drow[c] += scale * p[c];
                        }
                        drow[targets[r]] -= scale;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a || b.is_nan() { b } else { a });
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
