//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`backward`] walks the nodes in exact reverse order
//! and returns gradients for every leaf registered with `requires_grad`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul_into, softmax_in_place, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
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
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Vec<f64>>),
    Sigmoid(Var),
    Silu(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    RmsNorm(Var, f64),
    Rope(Var, Arc<Vec<usize>>, f64),
    GatherRows(Var, Arc<Vec<usize>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    Nll(Var, Arc<Vec<(usize, usize)>>),
    Kl(Var, Arc<Tensor>, Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_grad(false), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a), self.value(b)));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_tn", self.value(a), self.value(b)));
        }
        let out = mm_tn(self.value(a).data(), self.value(b).data(), k, m, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulTN(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of an `m×n` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(shape_err(op, ta, tr));
        }
        let data = ta
            .data()
            .chunks(n.max(1))
            .flat_map(|r| r.iter().zip(tr.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(contract!(
                "mul_const: {} constants for {} values",
                c.len(),
                self.value(a).len()
            ));
        }
        let t = self.value(a);
        let data = t.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(v, Op::Silu(a), ng)
    }

    /// Row softmax where `allowed[i*cols + j] == false` forces probability 0.
    /// Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if allowed.len() != t.len() {
            return Err(contract!(
                "mask has {} entries for {} scores",
                allowed.len(),
                t.len()
            ));
        }
        let mut data = t.data().to_vec();
        for (row, mask) in data.chunks_mut(c).zip(allowed.chunks(c)) {
            if !mask.iter().any(|&m| m) {
                return Err(contract!("attention row with no visible position"));
            }
            for (x, &m) in row.iter_mut().zip(mask) {
                if !m {
                    *x = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MaskedSoftmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row-wise RMS normalisation without gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let r = rms(row, eps);
            row.iter_mut().for_each(|x| *x /= r);
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(v, Op::RmsNorm(a, eps), ng)
    }

    /// Rotary position encoding over consecutive column pairs; row `i` is
    /// rotated by `positions[i]`.
    pub fn rope(&mut self, a: Var, positions: Arc<Vec<usize>>, base: f64) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if positions.len() != r || c % 2 != 0 {
            return Err(contract!("rope: {} positions for {}x{} input", positions.len(), r, c));
        }
        let mut data = t.data().to_vec();
        for (row, &p) in data.chunks_mut(c).zip(positions.iter()) {
            rotate(row, p, base, false);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Rope(a, positions, base), ng))
    }

    pub fn gather_rows(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids.iter() {
            if id >= t.rows() {
                return Err(contract!("row {} out of range {}", id, t.rows()));
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.ng(&[table]);
        Ok(self.push(v, Op::GatherRows(table, ids), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if start + width > c {
            return Err(contract!("slice_cols {}..{} of {}", start, start + width, c));
        }
        let mut data = Vec::with_capacity(r * width);
        for row in t.data().chunks(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let v = Tensor::new(vec![r, width], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(contract!("concat_cols with differing row counts"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if start + len > r {
            return Err(contract!("slice_rows {}..{} of {}", start, start + len, r));
        }
        let v = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(contract!("concat_rows with differing widths"));
        }
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            r += self.dims(p).0;
        }
        let v = Tensor::new(vec![r, c], data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Frobenius inner product, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), ng))
    }

    /// Mean negative log-likelihood of `(row, target)` picks from a
    /// log-probability matrix.
    pub fn nll(&mut self, logp: Var, picks: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        if picks.is_empty() {
            return Err(contract!("nll over zero positions"));
        }
        let t = self.value(logp);
        let c = t.cols();
        let mut s = 0.0;
        for &(r, y) in picks.iter() {
            if r >= t.rows() || y >= c {
                return Err(contract!("nll pick ({}, {}) out of range", r, y));
            }
            s -= t.data()[r * c + y];
        }
        let v = Tensor::scalar(s / picks.len() as f64);
        let ng = self.ng(&[logp]);
        Ok(self.push(v, Op::Nll(logp, picks), ng))
    }

    /// Mean over `rows` of `KL(p ‖ q)` where `target_logp` holds `log p` and
    /// `logq` is a log-probability node of the same shape.
    pub fn kl(&mut self, target_logp: Arc<Tensor>, logq: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(logq);
        if t.shape() != target_logp.shape() {
            return Err(shape_err("kl", &target_logp, t));
        }
        if rows.is_empty() {
            return Err(contract!("kl over zero positions"));
        }
        let c = t.cols();
        let mut s = 0.0;
        for &r in rows.iter() {
            for j in 0..c {
                let lp = target_logp.data()[r * c + j];
                let p = libm::exp(lp);
                if p > 0.0 {
                    s += p * (lp - t.data()[r * c + j]);
                }
            }
        }
        let v = Tensor::scalar(s / rows.len() as f64);
        let ng = self.ng(&[logq]);
        Ok(self.push(v, Op::Kl(logq, target_logp, rows), ng))
    }
}

fn rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    libm::sqrt(ms + eps)
}

/// Rotates consecutive pairs of `row` by `pos · base^(-2m/len)`.
pub(crate) fn rotate(row: &mut [f64], pos: usize, base: f64, inverse: bool) {
    let half = row.len() / 2;
    for m in 0..half {
        let theta = pos as f64 * libm::pow(base, -2.0 * m as f64 / row.len() as f64);
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        let s = if inverse { -s } else { s };
        let (x0, x1) = (row[2 * m], row[2 * m + 1]);
        row[2 * m] = x0 * c - x1 * s;
        row[2 * m + 1] = x0 * s + x1 * c;
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ[m×k] · b[k×n]` with `a` stored as `k×m`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for (i, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Back-propagates from a scalar `loss` through every recorded node.
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients> {
    if tape.value(loss).len() != 1 {
        return Err(contract!(
            "backward needs a scalar loss, got shape {:?}",
            tape.value(loss).shape()
        ));
    }
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[loss.0] = Some(vec![1.0]);

    for idx in (0..=loss.0).rev() {
        let node = &tape.nodes[idx];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let val = &node.value;
        macro_rules! send {
            ($v:expr, $g:expr) => {{
                let v: Var = $v;
                if tape.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], $g);
                }
            }};
        }
        let wants = |v: Var| tape.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {
                grads[idx] = Some(g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = tape.dims(*a);
                let nn = val.cols();
                if wants(*a) {
                    send!(*a, mm_nt(&g, tape.value(*b).data(), m, nn, k));
                }
                if wants(*b) {
                    send!(*b, mm_tn(tape.value(*a).data(), &g, m, k, nn));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = tape.dims(*a);
                let nn = tape.dims(*b).0;
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(&g, tape.value(*b).data(), &mut ga, m, nn, k);
                    send!(*a, ga);
                }
                if wants(*b) {
                    send!(*b, mm_tn(&g, tape.value(*a).data(), m, nn, k));
                }
            }
            Op::MatMulTN(a, b) => {
                let (k, m) = tape.dims(*a);
                let nn = tape.dims(*b).1;
                if wants(*a) {
                    send!(*a, mm_nt(tape.value(*b).data(), &g, k, nn, m));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * nn];
                    matmul_into(tape.value(*a).data(), &g, &mut gb, k, m, nn);
                    send!(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*b) {
                    send!(*b, g.clone());
                }
                send!(*a, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    send!(*b, g.iter().map(|x| -x).collect());
                }
                send!(*a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (tape.value(*a).data(), tape.value(*b).data());
                if wants(*a) {
                    send!(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    send!(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                let c = val.cols();
                if wants(*row) {
                    let mut gr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                    send!(*row, gr);
                }
                send!(*a, g);
            }
            Op::MulRow(a, row) => {
                let c = val.cols();
                let (va, vr) = (tape.value(*a).data(), tape.value(*row).data());
                if wants(*row) {
                    let mut gr = vec![0.0; c];
                    for (chunk, xa) in g.chunks(c).zip(va.chunks(c)) {
                        for j in 0..c {
                            gr[j] += chunk[j] * xa[j];
                        }
                    }
                    send!(*row, gr);
                }
                if wants(*a) {
                    let ga = g
                        .chunks(c)
                        .flat_map(|chunk| chunk.iter().zip(vr).map(|(x, y)| x * y))
                        .collect();
                    send!(*a, ga);
                }
            }
            Op::Scale(a, s) => send!(*a, g.iter().map(|x| x * s).collect()),
            Op::MulConst(a, c) => send!(*a, g.iter().zip(c.iter()).map(|(x, y)| x * y).collect()),
            Op::Sigmoid(a) => send!(
                *a,
                g.iter()
                    .zip(val.data())
                    .map(|(x, y)| x * y * (1.0 - y))
                    .collect()
            ),
            Op::Silu(a) => send!(
                *a,
                g.iter()
                    .zip(tape.value(*a).data())
                    .map(|(gx, &x)| {
                        let s = sigmoid(x);
                        gx * s * (1.0 + x * (1.0 - s))
                    })
                    .collect()
            ),
            Op::MaskedSoftmax(a) => {
                let c = val.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, pr) in g.chunks(c).zip(val.data().chunks(c)) {
                    let s: f64 = gr.iter().zip(pr).map(|(x, p)| x * p).sum();
                    ga.extend(gr.iter().zip(pr).map(|(x, p)| p * (x - s)));
                }
                send!(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let c = val.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, lr) in g.chunks(c).zip(val.data().chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(lr).map(|(x, l)| x - libm::exp(*l) * s));
                }
                send!(*a, ga);
            }
            Op::RmsNorm(a, eps) => {
                let c = val.cols();
                let mut ga = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g
                    .chunks(c)
                    .zip(val.data().chunks(c))
                    .zip(tape.value(*a).data().chunks(c))
                {
                    let r = rms(xr, *eps);
                    let m: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / c as f64;
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| (x - y * m) / r));
                }
                send!(*a, ga);
            }
            Op::Rope(a, positions, base) => {
                let c = val.cols();
                let mut ga = g;
                for (row, &p) in ga.chunks_mut(c).zip(positions.iter()) {
                    rotate(row, p, *base, true);
                }
                send!(*a, ga);
            }
            Op::GatherRows(table, ids) => {
                let t = tape.value(*table);
                let c = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[i * c + j];
                    }
                }
                send!(*table, gt);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = tape.dims(*a);
                let w = val.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send!(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (val.rows(), val.cols());
                let mut off = 0;
                for &p in parts {
                    let w = tape.dims(p).1;
                    if wants(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        send!(p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = tape.dims(*a);
                let mut ga = vec![0.0; r * c];
                ga[start * c..start * c + g.len()].copy_from_slice(&g);
                send!(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = tape.value(p).len();
                    if wants(p) {
                        send!(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::Sum(a) => send!(*a, vec![g[0]; tape.value(*a).len()]),
            Op::Dot(a, b) => {
                let (va, vb) = (tape.value(*a).data(), tape.value(*b).data());
                if wants(*a) {
                    send!(*a, vb.iter().map(|y| y * g[0]).collect());
                }
                if wants(*b) {
                    send!(*b, va.iter().map(|x| x * g[0]).collect());
                }
            }
            Op::Nll(logp, picks) => {
                let t = tape.value(*logp);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                let w = g[0] / picks.len() as f64;
                for &(r, y) in picks.iter() {
                    ga[r * c + y] -= w;
                }
                send!(*logp, ga);
            }
            Op::Kl(logq, target, rows) => {
                let c = target.cols();
                let mut ga = vec![0.0; target.len()];
                let w = g[0] / rows.len() as f64;
                for &r in rows.iter() {
                    for j in 0..c {
                        ga[r * c + j] -= w * libm::exp(target.data()[r * c + j]);
                    }
                }
                send!(*logq, ga);
            }
        }
    }

    let grads = tape
        .nodes
        .iter()
        .zip(grads)
        .map(|(node, g)| match (&node.op, g) {
            (Op::Leaf, Some(g)) if node.value.requires_grad() => {
                Some(Tensor::new(node.value.shape().to_vec(), g).expect("leaf grad shape"))
            }
            _ => None,
        })
        .collect();
    Ok(Gradients { grads })
}
