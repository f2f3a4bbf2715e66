//! Dynamic reverse-mode tape. A fresh [`Tape`] is built for every forward
//! pass; [`Tape::backward`] walks it once in reverse insertion order.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatFlat(Vec<Var>),
    Sum(Var),
    Square(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe views that lie inside the given slices;
    // callers derive them from the validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    /// Frozen parameters are bound as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.param(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    fn row_operand(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let (_, cols) = self.value(x).as_matrix_dims();
        if self.value(row).len() != cols {
            return Err(Error::dim(format!(
                "{what}: row vector {:?} against {:?}",
                self.shape(row),
                self.shape(x)
            )));
        }
        Ok(cols)
    }

    /// `x + row` broadcast over every row of `x` (last axis).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += r[i % cols];
        }
        let g = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::AddRow(x, row), g))
    }

    /// `x * row` broadcast over every row of `x` (last axis).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= r[i % cols];
        }
        let g = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::MulRow(x, row), g))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let g = self.needs(x);
        self.push(v, Op::Scale(x, s), g)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul expects matrices, got {sa:?} and {sb:?}")));
        }
        let (n, k) = (sa[0], sa[1]);
        let (kb, m) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(format!("matmul inner dims {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; n * m];
        let bs = if trans_b { (1, k) } else { (m, 1) };
        gemm(n, k, m, self.value(a).data(), (k, 1), self.value(b).data(), bs, &mut out, false);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b, trans_b }, g))
    }

    /// `a · b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let (rows, cols) = v.as_matrix_dims();
        let d = v.data_mut();
        for r in 0..rows {
            let row = &mut d[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        let g = self.needs(x);
        self.push(v, Op::Softmax(x), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()));
        let g = self.needs(x);
        self.push(v, Op::Gelu(x), g)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z / (1.0 + (-z).exp()));
        let g = self.needs(x);
        self.push(v, Op::Silu(x), g)
    }

    /// Standardizes each row over the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        let (rows, cols) = v.as_matrix_dims();
        let mut inv_std = Vec::with_capacity(rows);
        let d = v.data_mut();
        for r in 0..rows {
            let row = &mut d[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|e| *e = (*e - mean) * is);
            inv_std.push(is);
        }
        let g = self.needs(x);
        self.push(v, Op::Normalize { x, inv_std }, g)
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::dim(format!("gather of {} values into {shape:?}", index.len())));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let g = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, index }, g))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x).slice_last(start, width)?;
        let g = self.needs(x);
        Ok(self.push(v, Op::SliceCols { x, start }, g))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_last(&vals)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::stack_first(&vals)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatFlat(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let g = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.needs(x);
        self.push(v, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * z);
        let g = self.needs(x);
        self.push(v, Op::Square(x), g)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                let cols = self.value(*row).len();
                if let Some(gr) = self.acc(grads, *row) {
                    for (i, q) in g.iter().enumerate() {
                        gr[i % cols] += q;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row).data();
                let cols = r.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (p, q)) in gx.iter_mut().zip(g).enumerate() {
                        *p += q * r[i % cols];
                    }
                }
                let xv = self.value(*x).data();
                if let Some(gr) = self.acc(grads, *row) {
                    for (i, q) in g.iter().enumerate() {
                        gr[i % cols] += q * xv[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * s);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (n, k) = (sa[0], sa[1]);
                let m = node.value.shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ  (B = b, or bᵀ when trans_b)
                    let bs = if *trans_b { (k, 1) } else { (1, m) };
                    gemm(n, m, k, g, (m, 1), vb, bs, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // d(b) [m,k] = dCᵀ · A
                        gemm(m, n, k, g, (1, m), va, (k, 1), gb, true);
                    } else {
                        // d(b) [k,m] = Aᵀ · dC
                        gemm(k, n, m, va, (1, k), g, (m, 1), gb, true);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (rows, cols) = node.value.as_matrix_dims();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum();
                        for j in s {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((p, q), &z) in gx.iter_mut().zip(g).zip(xv) {
                        let u = GELU_C * (z + 0.044715 * z * z * z);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                        let d = 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du;
                        *p += q * d;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((p, q), &z) in gx.iter_mut().zip(g).zip(xv) {
                        let s = 1.0 / (1.0 + (-z).exp());
                        *p += q * (s + z * s * (1.0 - s));
                    }
                }
            }
            Op::Normalize { x, inv_std } => {
                let y = node.value.data();
                let (rows, cols) = node.value.as_matrix_dims();
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let mg = g[s.clone()].iter().sum::<f64>() / nf;
                        let mgy = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum::<f64>() / nf;
                        for j in s {
                            gx[j] += inv_std[r] * (g[j] - mg - y[j] * mgy);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&i, q) in index.iter().zip(g) {
                        gx[i] += q;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (_, cols) = self.value(*x).as_matrix_dims();
                let (rows, width) = node.value.as_matrix_dims();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        for c in 0..width {
                            gx[r * cols + start + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_matrix_dims();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).as_matrix_dims();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((p, q), z) in gx.iter_mut().zip(g).zip(xv) {
                        *p += 2.0 * z * q;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is unreachable or constant.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// One gradient per stored parameter, in store order. Unbound, frozen
    /// and unreachable parameters get exact zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                if store.param(id).trainable {
                    out[id.index()].data_mut().copy_from_slice(g);
                }
            }
        }
        out
    }
}
