use super::{Backward, BackwardCtx, FlopCount, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, numel, reduce_to_shape, Tensor,
};

/// Additive logit for excluded attention entries.
pub const MASK_LOGIT: f64 = -1e30;

/// Rows whose largest logit is below this are entirely masked.
const MASKED_ROW: f64 = MASK_LOGIT / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryRule {
    kind: Binary,
}

impl<T: Scalar> Backward<T> for BinaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let out = ctx.output.shape();
        let g = ctx.grad;
        let ga = ctx.needs[0].then(|| match self.kind {
            Binary::Add | Binary::Sub => reduce_to_shape(g, out, a.shape()),
            Binary::Mul => {
                let sb = broadcast_strides(b.shape(), out);
                let zero = vec![0; out.len()];
                let mut full = vec![T::zero(); g.len()];
                let bd = b.data();
                for_each_broadcast(out, &sb, &zero, |o, ib, _| full[o] = g[o] * bd[ib]);
                reduce_to_shape(&full, out, a.shape())
            }
        });
        let gb = ctx.needs[1].then(|| match self.kind {
            Binary::Add => reduce_to_shape(g, out, b.shape()),
            Binary::Sub => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                reduce_to_shape(&neg, out, b.shape())
            }
            Binary::Mul => {
                let sa = broadcast_strides(a.shape(), out);
                let zero = vec![0; out.len()];
                let mut full = vec![T::zero(); g.len()];
                let ad = a.data();
                for_each_broadcast(out, &sa, &zero, |o, ia, _| full[o] = g[o] * ad[ia]);
                reduce_to_shape(&full, out, b.shape())
            }
        });
        vec![ga, gb]
    }
}

struct ScaleRule<T>(T);

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatMulRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let ga = ctx.needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            T::gemm(
                m,
                n,
                k,
                T::one(),
                ctx.grad,
                false,
                b,
                true,
                T::zero(),
                &mut da,
            );
            da
        });
        let gb = ctx.needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            T::gemm(
                k,
                m,
                n,
                T::one(),
                a,
                true,
                ctx.grad,
                false,
                T::zero(),
                &mut db,
            );
            db
        });
        vec![ga, gb]
    }
}

struct TransposeRule {
    rows: usize,
    cols: usize,
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

impl<T: Scalar> Backward<T> for TransposeRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        // grad is cols x rows
        vec![Some(transpose(ctx.grad, self.cols, self.rows))]
    }
}

struct IdentityRule;

impl<T: Scalar> Backward<T> for IdentityRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

struct BroadcastRule;

impl<T: Scalar> Backward<T> for BroadcastRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(reduce_to_shape(
            ctx.grad,
            ctx.output.shape(),
            ctx.inputs[0].shape(),
        ))]
    }
}

struct ReduceRule {
    kind: ReduceKind,
    keep: Vec<usize>,
    count: usize,
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ReduceRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let ins = ctx.inputs[0].shape();
        let mut gx = vec![T::zero(); numel(ins)];
        match self.kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let scale = if self.kind == ReduceKind::Mean {
                    T::one() / T::from_count(self.count)
                } else {
                    T::one()
                };
                let so = broadcast_strides(&self.keep, ins);
                let zero = vec![0; ins.len()];
                for_each_broadcast(ins, &so, &zero, |i, o, _| gx[i] = ctx.grad[o] * scale);
            }
            ReduceKind::Max => {
                for (o, &i) in self.argmax.iter().enumerate() {
                    gx[i] += ctx.grad[o];
                }
            }
        }
        vec![Some(gx)]
    }
}

struct SoftmaxRule {
    outer: usize,
    n: usize,
    inner: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output.data();
        let g = ctx.grad;
        let mut gx = vec![T::zero(); y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.n * self.inner + i;
                let mut dot = T::zero();
                for j in 0..self.n {
                    let p = base + j * self.inner;
                    dot += y[p] * g[p];
                }
                for j in 0..self.n {
                    let p = base + j * self.inner;
                    gx[p] = y[p] * (g[p] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

struct UnaryRule(Unary);

impl<T: Scalar> Backward<T> for UnaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output.data();
        let g = ctx.grad;
        let one = T::one();
        let gx = match self.0 {
            Unary::Sigmoid => y.iter().zip(g).map(|(&s, &g)| g * s * (one - s)).collect(),
            Unary::Tanh => y.iter().zip(g).map(|(&t, &g)| g * (one - t * t)).collect(),
            Unary::Relu => y
                .iter()
                .zip(g)
                .map(|(&r, &g)| if r > T::zero() { g } else { T::zero() })
                .collect(),
        };
        vec![Some(gx)]
    }
}

struct CrossEntropyRule<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Backward<T> for CrossEntropyRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let b = self.labels.len();
        let scale = ctx.grad[0] / T::from_count(b);
        let mut gx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (r, &l) in self.labels.iter().enumerate() {
            gx[r * self.classes + l] -= scale;
        }
        vec![Some(gx)]
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn check_axes(axes: &[usize], rank: usize) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank {
            return dim_err(format!("axis {a} out of range for rank {rank}"));
        }
        if axes[..i].contains(&a) {
            return dim_err(format!("axis {a} repeated"));
        }
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn binary(self, other: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let mut data = vec![T::zero(); numel(&shape)];
            let (ad, bd) = (a.data(), b.data());
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            if a.shape() == b.shape() {
                for ((d, &x), &y) in data.iter_mut().zip(ad).zip(bd) {
                    *d = f(x, y);
                }
            } else {
                let sa = broadcast_strides(a.shape(), &shape);
                let sb = broadcast_strides(b.shape(), &shape);
                for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
            }
            Tensor::new(&shape, data)
        })?;
        let n = FlopCount::pointwise(out.len() as u64);
        Ok(self
            .tape
            .custom(&[self, other], out, Box::new(BinaryRule { kind }), n))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * factor);
        let n = FlopCount::pointwise(out.len() as u64);
        self.tape
            .custom(&[self], out, Box::new(ScaleRule(factor)), n)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (out, m, k, n) = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return dim_err(format!(
                    "matmul of {:?} and {:?}: inner dimensions disagree",
                    a.shape(),
                    b.shape()
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data(),
                false,
                b.data(),
                false,
                T::zero(),
                &mut c,
            );
            Ok((Tensor::new(&[m, n], c)?, m, k, n))
        })?;
        let flops = FlopCount::mac(2 * (m * k * n) as u64);
        Ok(self
            .tape
            .custom(&[self, other], out, Box::new(MatMulRule { m, k, n }), flops))
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (out, rows, cols) = {
            let v = self.value();
            if v.rank() != 2 {
                return dim_err(format!("transpose needs a matrix, got {:?}", v.shape()));
            }
            let (r, c) = (v.shape()[0], v.shape()[1]);
            (Tensor::new(&[c, r], transpose(v.data(), r, c))?, r, c)
        };
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(TransposeRule { rows, cols }),
            FlopCount::ZERO,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let v = self.value();
            let mut t = v.reshape(shape)?;
            t.set_requires_grad(false);
            t
        };
        Ok(self
            .tape
            .custom(&[self], out, Box::new(IdentityRule), FlopCount::ZERO))
    }

    /// Materialises broadcasting to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let v = self.value();
            let full = broadcast_shape(v.shape(), shape)?;
            if full != shape {
                return dim_err(format!("cannot broadcast {:?} to {:?}", v.shape(), shape));
            }
            let s = broadcast_strides(v.shape(), shape);
            let zero = vec![0; shape.len()];
            let mut data = vec![T::zero(); numel(shape)];
            let src = v.data();
            for_each_broadcast(shape, &s, &zero, |o, i, _| data[o] = src[i]);
            Tensor::new(shape, data)?
        };
        Ok(self
            .tape
            .custom(&[self], out, Box::new(BroadcastRule), FlopCount::ZERO))
    }

    /// Reduces over `axes`, dropping them from the shape (a full reduction
    /// yields shape `[1]`).
    pub fn reduce(self, axes: &[usize], kind: ReduceKind) -> Result<Var<'t, T>> {
        let (out, rule, flops) = {
            let v = self.value();
            let ins = v.shape();
            check_axes(axes, ins.len())?;
            let keep: Vec<usize> = ins
                .iter()
                .enumerate()
                .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                .collect();
            let count: usize = axes.iter().map(|&a| ins[a]).product();
            let mut dropped: Vec<usize> = ins
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if dropped.is_empty() {
                dropped.push(1);
            }
            let nout = numel(&keep);
            let so = broadcast_strides(&keep, ins);
            let zero = vec![0; ins.len()];
            let src = v.data();
            let mut argmax = Vec::new();
            let data = match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut acc = vec![T::zero(); nout];
                    if nout == 1 {
                        // full reductions feed losses; keep their rounding small
                        acc[0] = pairwise_sum(src);
                    } else {
                        for_each_broadcast(ins, &so, &zero, |i, o, _| acc[o] += src[i]);
                    }
                    if kind == ReduceKind::Mean {
                        let c = T::from_count(count);
                        acc.iter_mut().for_each(|a| *a /= c);
                    }
                    acc
                }
                ReduceKind::Max => {
                    let mut acc = vec![T::neg_infinity(); nout];
                    argmax = vec![usize::MAX; nout];
                    for_each_broadcast(ins, &so, &zero, |i, o, _| {
                        if argmax[o] == usize::MAX || src[i] > acc[o] {
                            acc[o] = src[i];
                            argmax[o] = i;
                        }
                    });
                    acc
                }
            };
            let rule = ReduceRule {
                kind,
                keep,
                count,
                argmax,
            };
            (
                Tensor::new(&dropped, data)?,
                rule,
                FlopCount::reduce(src.len() as u64),
            )
        };
        Ok(self.tape.custom(&[self], out, Box::new(rule), flops))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(axes, ReduceKind::Mean)
    }

    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(axes, ReduceKind::Sum)
    }

    pub fn max_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(axes, ReduceKind::Max)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(&axes, ReduceKind::Sum).expect("valid axes")
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(&axes, ReduceKind::Mean).expect("valid axes")
    }

    /// Numerically stable softmax along `axis`. Entries carrying
    /// [`MASK_LOGIT`] get zero weight; a row with nothing but masked entries
    /// is an error.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (out, rule) = {
            let v = self.value();
            let shape = v.shape();
            if axis >= shape.len() {
                return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
            }
            let n = shape[axis];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let x = v.data();
            let mut y = vec![T::zero(); x.len()];
            let masked = T::from_f64_lossy(MASKED_ROW);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..n {
                        mx = mx.max(x[base + j * inner]);
                    }
                    if mx <= masked {
                        return Err(Error::EmptyNeighborhood {
                            node: o * inner + i,
                        });
                    }
                    let mut z = T::zero();
                    for j in 0..n {
                        let e = (x[base + j * inner] - mx).exp();
                        y[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..n {
                        y[base + j * inner] /= z;
                    }
                }
            }
            (Tensor::new(shape, y)?, SoftmaxRule { outer, n, inner })
        };
        let flops = FlopCount::pointwise(5 * out.len() as u64);
        Ok(self.tape.custom(&[self], out, Box::new(rule), flops))
    }

    fn unary(self, kind: Unary) -> Var<'t, T> {
        let out = self.value().map(|v| match kind {
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(T::zero()),
        });
        let per = match kind {
            Unary::Sigmoid | Unary::Tanh => 4,
            Unary::Relu => 1,
        };
        let flops = FlopCount::pointwise(per * out.len() as u64);
        self.tape
            .custom(&[self], out, Box::new(UnaryRule(kind)), flops)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Unary::Relu)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let (loss, rule) = {
            let v = self.value();
            let s = v.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return dim_err(format!(
                    "cross entropy of logits {:?} with {} labels",
                    s,
                    labels.len()
                ));
            }
            let (b, k) = (s[0], s[1]);
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Parameter(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            let x = v.data();
            let mut probs = vec![T::zero(); b * k];
            let mut total = T::zero();
            for r in 0..b {
                let row = &x[r * k..(r + 1) * k];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    probs[r * k + j] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[r * k + j] /= z;
                }
                total += mx + z.ln() - row[labels[r]];
            }
            let loss = Tensor::scalar(total / T::from_count(b));
            (
                loss,
                CrossEntropyRule {
                    probs,
                    labels: labels.to_vec(),
                    classes: k,
                },
            )
        };
        let flops = {
            let n = self.len() as u64;
            FlopCount::pointwise(5 * n + 2 * labels.len() as u64)
        };
        Ok(self.tape.custom(&[self], loss, Box::new(rule), flops))
    }
}

impl<T: Scalar> Tape<T> {
    /// Scalar constant broadcastable against anything.
    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }
}

/// Pairwise summation: error grows with `log n` instead of `n`.
fn pairwise_sum<T: Scalar>(v: &[T]) -> T {
    if v.len() <= 16 {
        return v.iter().fold(T::zero(), |a, &b| a + b);
    }
    let (l, r) = v.split_at(v.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}
