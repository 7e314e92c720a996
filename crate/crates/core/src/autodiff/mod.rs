//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever the
//! reverse pass needs. [`Tape::backward`] walks the nodes from the output back
//! to the start, which is a reverse topological order because inputs always
//! precede the nodes that consume them.
//!
//! There is no implicit broadcasting. Shapes must match exactly or be adapted
//! through [`Tape::reshape`].

mod gradcheck;

use std::borrow::Cow;
use std::collections::BTreeMap;

pub use gradcheck::{grad_check, objective, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SqDiff(Var, Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    L2NormalizeRows {
        input: Var,
        eps: T,
        norms: Vec<T>,
    },
    SoftmaxRows {
        input: Var,
    },
    WindowMax {
        input: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        input: Var,
        label: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Gradients of a scalar output with respect to the parameters read on the
/// tape, keyed by parameter handle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adds `scale * self` into the parameters' gradient buffers.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>, scale: T) {
        for (id, g) in &self.grads {
            let dst = params.get_mut(*id).gradient.data_mut();
            for (d, &v) in dst.iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }
}

/// Records operations for one forward evaluation. Parameters are borrowed,
/// never copied, so a tape may not outlive the [`ParamSet`] it reads from.
#[derive(Debug, Default)]
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, set: &'p ParamSet<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(&set.get(id).value),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dimension(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dimension("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the natural layout for `x · Wᵀ` with `W` stored
    /// as `[out × in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dimension("matmul_t", self.shape(a), self.shape(b)));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let out = gemm(self.value(a).data(), &bt, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * c).collect(),
        );
        self.push(out, Op::Scale(a, c))
    }

    /// Element-wise `(a - b)²`.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise_sq_diff")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| {
            let d = x - y;
            d * d
        });
        Ok(self.push(out, Op::SqDiff(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(T::zero())).collect(),
        );
        self.push(out, Op::Relu(a))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Selects rows of a matrix (a vector counts as one row).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        if rows.is_empty() {
            return Err(Error::Logic("gather_rows: empty row selection".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dimension("gather_rows", v.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_parts(vec![rows.len(), c], out);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row-wise `v / max(‖v‖₂, eps)`. A vector is normalized as a whole.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let norm = dot(row, row).sqrt();
            let denom = norm.max(eps);
            out.extend(row.iter().map(|&x| x / denom));
            norms.push(norm);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(
            value,
            Op::L2NormalizeRows {
                input: a,
                eps,
                norms,
            },
        )
    }

    /// Row-wise softmax. `mask`, when given, has one flag per entry; disabled
    /// entries are excluded from the normalization and come out as exactly 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(Error::dimension("softmax_rows", v.shape(), &[m.len()]));
            }
        }
        let enabled = |idx: usize| mask.is_none_or(|m| m[idx]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if enabled(i * c + j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Config(format!(
                    "softmax row {i} has no enabled entries"
                )));
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut total = T::zero();
            for (j, (o, &x)) in orow.iter_mut().zip(row).enumerate() {
                if enabled(i * c + j) {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(value, Op::SoftmaxRows { input: a }))
    }

    /// `out[o] = max(input[w] for w in windows[o])`. The reverse pass routes
    /// each output's gradient to the first maximal index in `windows[o]`.
    pub fn window_max(
        &mut self,
        a: Var,
        windows: &[Vec<usize>],
        out_shape: &[usize],
    ) -> Result<Var> {
        let data = self.value(a).data();
        if out_shape.iter().product::<usize>() != windows.len() {
            return Err(Error::dimension("window_max", out_shape, &[windows.len()]));
        }
        let mut out = Vec::with_capacity(windows.len());
        let mut argmax = Vec::with_capacity(windows.len());
        for (o, w) in windows.iter().enumerate() {
            let (&first, rest) = w
                .split_first()
                .ok_or_else(|| Error::Logic(format!("window_max: window {o} is empty")))?;
            let mut best = first;
            for &idx in std::iter::once(&first).chain(rest) {
                if idx >= data.len() {
                    return Err(Error::dimension("window_max", self.shape(a), &[idx]));
                }
                if data[idx] > data[best] {
                    best = idx;
                }
            }
            out.push(data[best]);
            argmax.push(best);
        }
        let value = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.push(value, Op::WindowMax { input: a, argmax }))
    }

    /// `-log softmax(logits)[label]` for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != 1 {
            return Err(Error::dimension("cross_entropy", v.shape(), &[v.cols()]));
        }
        if label >= v.numel() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                v.numel()
            )));
        }
        let probs = softmax_slice(v.data());
        let max = v
            .data()
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let lse = max
            + v.data()
                .iter()
                .map(|&x| (x - max).exp())
                .sum::<T>()
                .ln();
        let loss = lse - v.data()[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                input: logits,
                label,
                probs,
            },
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::dimension("backward", self.shape(output), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![T::one()]);
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match result.grads.get_mut(id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        result.grads.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let n = self.value(*b).shape()[1];
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    // dA = dC · Bᵀ, dB = Aᵀ · dC
                    accumulate(&mut grads, *a, gemm(&g, &transpose(bd, k, n), m, n, k));
                    accumulate(&mut grads, *b, gemm(&transpose(ad, m, k), &g, k, m, n));
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let n = self.value(*b).shape()[0];
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    // C = A·Bᵀ: dA = dC · B, dB = dCᵀ · A
                    accumulate(&mut grads, *a, gemm(&g, bd, m, n, k));
                    accumulate(&mut grads, *b, gemm(&transpose(&g, m, n), ad, n, m, k));
                }
                Op::Add(a, b) => {
                    with_grad(&mut grads, *a, g.len(), |ga| add_into(ga, &g));
                    with_grad(&mut grads, *b, g.len(), |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    with_grad(&mut grads, *a, g.len(), |ga| add_into(ga, &g));
                    with_grad(&mut grads, *b, g.len(), |gb| {
                        for (d, &v) in gb.iter_mut().zip(&g) {
                            *d -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    with_grad(&mut grads, *a, g.len(), |ga| {
                        for ((d, &gv), &bv) in ga.iter_mut().zip(&g).zip(bd) {
                            *d += gv * bv;
                        }
                    });
                    with_grad(&mut grads, *b, g.len(), |gb| {
                        for ((d, &gv), &av) in gb.iter_mut().zip(&g).zip(ad) {
                            *d += gv * av;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    with_grad(&mut grads, *a, g.len(), |ga| axpy(*c, &g, ga));
                }
                Op::SqDiff(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let two = T::lit(2.0);
                    let local: Vec<T> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(&gv, (&x, &y))| two * (x - y) * gv)
                        .collect();
                    with_grad(&mut grads, *a, g.len(), |ga| add_into(ga, &local));
                    with_grad(&mut grads, *b, g.len(), |gb| {
                        for (d, &v) in gb.iter_mut().zip(&local) {
                            *d -= v;
                        }
                    });
                }
                Op::Relu(a) => {
                    let ad = self.value(*a).data();
                    with_grad(&mut grads, *a, g.len(), |ga| {
                        for ((d, &gv), &x) in ga.iter_mut().zip(&g).zip(ad) {
                            if x > T::zero() {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    with_grad(&mut grads, *a, n, |ga| {
                        for d in ga.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
                Op::Reshape(a) => {
                    with_grad(&mut grads, *a, g.len(), |ga| add_into(ga, &g));
                }
                Op::GatherRows { input, rows } => {
                    let src = self.value(*input);
                    let c = src.cols();
                    with_grad(&mut grads, *input, src.numel(), |gi| {
                        for (o, &r) in rows.iter().enumerate() {
                            add_into(&mut gi[r * c..(r + 1) * c], &g[o * c..(o + 1) * c]);
                        }
                    });
                }
                Op::L2NormalizeRows { input, eps, norms } => {
                    let out = node.value.data();
                    let src = self.value(*input);
                    let c = src.cols();
                    with_grad(&mut grads, *input, src.numel(), |gi| {
                        for (r, &norm) in norms.iter().enumerate() {
                            let span = r * c..(r + 1) * c;
                            let grow = &g[span.clone()];
                            let girow = &mut gi[span.clone()];
                            if norm >= *eps {
                                // (I - u uᵀ) g / ‖v‖
                                let u = &out[span];
                                let ug = dot(u, grow);
                                for ((d, &gv), &uv) in girow.iter_mut().zip(grow).zip(u) {
                                    *d += (gv - uv * ug) / norm;
                                }
                            } else {
                                axpy(T::one() / *eps, grow, girow);
                            }
                        }
                    });
                }
                Op::SoftmaxRows { input } => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let rows = node.value.rows();
                    with_grad(&mut grads, *input, y.len(), |gi| {
                        for r in 0..rows {
                            let span = r * c..(r + 1) * c;
                            let yr = &y[span.clone()];
                            let gr = &g[span.clone()];
                            let inner = dot(yr, gr);
                            for ((d, &yv), &gv) in gi[span].iter_mut().zip(yr).zip(gr) {
                                *d += yv * (gv - inner);
                            }
                        }
                    });
                }
                Op::WindowMax { input, argmax } => {
                    let n = self.value(*input).numel();
                    with_grad(&mut grads, *input, n, |gi| {
                        for (&src, &gv) in argmax.iter().zip(&g) {
                            gi[src] += gv;
                        }
                    });
                }
                Op::CrossEntropy {
                    input,
                    label,
                    probs,
                } => {
                    with_grad(&mut grads, *input, probs.len(), |gi| {
                        for (j, (d, &p)) in gi.iter_mut().zip(probs).enumerate() {
                            let target = if j == *label { T::one() } else { T::zero() };
                            *d += g[0] * (p - target);
                        }
                    });
                }
            }
        }
        Ok(result)
    }
}

/// Adds `delta` to the gradient slot of `v`, taking ownership when empty.
fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(slot) => add_into(slot, &delta),
        empty => *empty = Some(delta),
    }
}

fn with_grad<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

/// Row-major `[r, c]` → `[c, r]`.
pub(crate) fn transpose<T: Scalar>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| x[i * c + j]));
    }
    out
}

/// `x[m, k] · y[k, n]`. Each entry accumulates its `k` products in ascending
/// order; the loop nest runs along whichever output extent is longer, which
/// does not change any entry's value.
pub(crate) fn gemm<T: Scalar>(x: &[T], y: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    fn rows_kernel<T: Scalar>(x: &[T], y: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for (orow, xrow) in out.chunks_exact_mut(n).zip(x.chunks_exact(k)) {
            for (&xv, yrow) in xrow.iter().zip(y.chunks_exact(n)) {
                axpy(xv, yrow, orow);
            }
        }
        out
    }
    if n >= m {
        rows_kernel(x, y, m, k, n)
    } else {
        let t = rows_kernel(&transpose(y, k, n), &transpose(x, m, k), n, k, m);
        transpose(&t, n, m)
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // four independent partial sums, combined in a fixed order
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Max-subtracted softmax of a slice.
pub fn softmax_slice<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Value-level helpers that evaluate a single primitive on a throwaway tape.
pub mod ops {
    use super::*;

    pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let out = tape.matmul(va, vb)?;
        Ok(tape.value(out).clone())
    }

    pub fn elementwise_sq_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let out = tape.sq_diff(va, vb)?;
        Ok(tape.value(out).clone())
    }

    pub fn l2_normalize<T: Scalar>(v: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        if v.shape().len() != 1 {
            return Err(Error::Input(format!(
                "l2_normalize expects a vector, got shape {:?}",
                v.shape()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(v.clone());
        let out = tape.l2_normalize_rows(x, eps);
        Ok(tape.value(out).clone())
    }

    pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone());
        let out = tape.softmax_rows(x, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = tape.relu(v);
        tape.value(out).clone()
    }

    pub fn cross_entropy_with_logits<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let out = tape.cross_entropy(v, label)?;
        Ok(tape.value(out).data()[0])
    }
}
