//! Multi-head dot-product attention over sparse graph neighborhoods with
//! scalar node features.
//!
//! For head `h` and node `i`, with `k_i = W_K x_i + b_K` and
//! `q_j = W_Q x_j + b_Q` in `R^{d_K}`:
//!
//! ```text
//! logit(i, j) = k_i . q_j / s        s = d_K (or sqrt(d_K))
//! A^h[i, .]   = softmax over the active neighbors of i
//! A           = mean_h A^h
//! x_att       = A x
//! ```
//!
//! There is no value projection; the raw scalar features are aggregated.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, BackwardCtx, FlopCount, Tape, Var, MASK_LOGIT};
use crate::error::{dim_err, param_err, Error, Result};
use crate::graph::{EdgeDropMask, Graph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitScale {
    /// Divide by `d_K`.
    #[default]
    KeyDim,
    /// Divide by `sqrt(d_K)`.
    SqrtKeyDim,
}

impl LogitScale {
    pub fn from_sqrt_flag(sqrt_scaling: bool) -> Self {
        if sqrt_scaling {
            Self::SqrtKeyDim
        } else {
            Self::KeyDim
        }
    }

    fn divisor<T: Scalar>(self, key_dim: usize) -> T {
        let dk = T::from_count(key_dim);
        match self {
            Self::KeyDim => dk,
            Self::SqrtKeyDim => dk.sqrt(),
        }
    }
}

/// Key and query projections for every head, each stored as `[H, d_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAttentionParams<T: Scalar> {
    heads: usize,
    key_dim: usize,
    pub scale: LogitScale,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
}

impl<T: Scalar> GraphAttentionParams<T> {
    /// Weights drawn from `Normal(0, 1/sqrt(d_K))`, biases zero.
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return param_err(format!("head count {heads} must divide hidden dim {d}"));
        }
        let key_dim = d / heads;
        let std = 1.0 / (key_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut draw =
            || Tensor::from_fn(&[heads, key_dim], |_| T::from_f64_lossy(normal.sample(rng)));
        let wk = draw()?;
        let wq = draw()?;
        let zeros = Tensor::zeros(&[heads, key_dim])?;
        Ok(Self {
            heads,
            key_dim,
            scale: LogitScale::KeyDim,
            wk,
            bk: zeros.clone(),
            wq,
            bq: zeros,
        })
    }

    /// Builds from explicit `[H, d_K]` tensors.
    pub fn from_parts(
        wk: Tensor<T>,
        bk: Tensor<T>,
        wq: Tensor<T>,
        bq: Tensor<T>,
        scale: LogitScale,
    ) -> Result<Self> {
        let shape = wk.shape().to_vec();
        if shape.len() != 2 {
            return dim_err(format!(
                "projection weights must be [H, d_K], got {shape:?}"
            ));
        }
        for (name, t) in [("b_K", &bk), ("W_Q", &wq), ("b_Q", &bq)] {
            if t.shape() != shape.as_slice() {
                return dim_err(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
        }
        Ok(Self {
            heads: shape[0],
            key_dim: shape[1],
            scale,
            wk,
            bk,
            wq,
            bq,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.heads * self.key_dim
    }

    /// Trainable scalars: `4 d`.
    pub fn param_count(&self) -> usize {
        4 * self.hidden_dim()
    }

    /// The four tensors in canonical order `W_K, b_K, W_Q, b_Q`.
    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.wk, &self.bk, &self.wq, &self.bq]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.wk, &mut self.bk, &mut self.wq, &mut self.bq]
    }

    /// Records the parameters on `tape` as gradient-tracking leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> AttentionVars<'t, T> {
        AttentionVars {
            wk: tape.param(&self.wk),
            bk: tape.param(&self.bk),
            wq: tape.param(&self.wq),
            bq: tape.param(&self.bq),
            scale: self.scale,
        }
    }

    /// Records the parameters on `tape` without gradient tracking.
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> AttentionVars<'t, T> {
        AttentionVars {
            wk: tape.constant(self.wk.clone()),
            bk: tape.constant(self.bk.clone()),
            wq: tape.constant(self.wq.clone()),
            bq: tape.constant(self.bq.clone()),
            scale: self.scale,
        }
    }
}

/// Attention parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars<'t, T: Scalar> {
    pub wk: Var<'t, T>,
    pub bk: Var<'t, T>,
    pub wq: Var<'t, T>,
    pub bq: Var<'t, T>,
    pub scale: LogitScale,
}

impl<'t, T: Scalar> AttentionVars<'t, T> {
    pub fn as_array(&self) -> [Var<'t, T>; 4] {
        [self.wk, self.bk, self.wq, self.bq]
    }
}

/// Active neighborhoods in compressed row form: the neighbors of node `i`
/// are `cols[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl Neighborhoods {
    /// Neighbor lists of `g` minus the neighbors dropped by `mask`.
    pub fn new(g: &Graph, mask: &EdgeDropMask) -> Result<Self> {
        let n = g.num_nodes();
        if mask.num_nodes() != n {
            return dim_err(format!(
                "edge-drop mask covers {} nodes, graph has {n}",
                mask.num_nodes()
            ));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(g.directed_edge_count());
        offsets.push(0);
        for i in 0..n {
            let drop = mask.dropped(i);
            let before = cols.len();
            cols.extend(g.neighbors(i).iter().copied().filter(|&j| Some(j) != drop));
            if cols.len() == before {
                return Err(Error::EmptyNeighborhood { node: i });
            }
            offsets.push(cols.len());
        }
        Ok(Self { offsets, cols })
    }

    /// Full neighborhoods of `g`.
    pub fn full(g: &Graph) -> Result<Self> {
        Self::new(g, &EdgeDropMask::inactive(g.num_nodes()))
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// FLOPs of one attention pass over `nodes` nodes and `edges` active
/// directed edges: `4d` per node for the projections and, per edge, the
/// `d_K`-dot product, scaling and softmax for each head, the head average,
/// and the aggregation multiply-add.
pub fn attention_flops(nodes: usize, edges: usize, heads: usize, key_dim: usize) -> FlopCount {
    let d = (heads * key_dim) as u64;
    let (h, e) = (heads as u64, edges as u64);
    FlopCount::mac(4 * d * nodes as u64 + e * (2 * h * key_dim as u64 + 2))
        + FlopCount::pointwise(e * (h * (1 + 5) + h))
}

/// Sums the per-head values pairwise so that `H` identical heads average to
/// exactly the single-head value when `H` is a power of two.
fn head_mean<T: Scalar>(vals: &mut [T]) -> T {
    let n = vals.len();
    let mut len = n;
    while len > 1 {
        let half = len.div_ceil(2);
        for i in 0..len / 2 {
            vals[i] = vals[2 * i] + vals[2 * i + 1];
        }
        if len % 2 == 1 {
            vals[len / 2] = vals[len - 1];
        }
        len = half;
    }
    vals[0] / T::from_count(n)
}

struct Shapes {
    heads: usize,
    key_dim: usize,
    nodes: usize,
    edges: usize,
}

/// Per-head softmax weights `p[h * E + e]` and head-averaged weights `a[e]`
/// for one sample, plus the aggregated output.
fn forward_sample<T: Scalar>(
    x: &[T],
    w: [&[T]; 4],
    inv: T,
    nb: &Neighborhoods,
    s: &Shapes,
    kq: &mut [T],
    p: &mut [T],
    a: &mut [T],
    y: &mut [T],
) {
    let d = s.heads * s.key_dim;
    let (k, q) = kq.split_at_mut(s.nodes * d);
    for i in 0..s.nodes {
        for c in 0..d {
            k[i * d + c] = w[0][c] * x[i] + w[1][c];
            q[i * d + c] = w[2][c] * x[i] + w[3][c];
        }
    }
    let mut tmp = vec![T::zero(); s.heads];
    for i in 0..nb.num_nodes() {
        let r = nb.range(i);
        for h in 0..s.heads {
            let ki = &k[i * d + h * s.key_dim..i * d + (h + 1) * s.key_dim];
            let row = &mut p[h * s.edges + r.start..h * s.edges + r.end];
            let mut mx = T::neg_infinity();
            for (slot, &j) in row.iter_mut().zip(nb.row(i)) {
                let qj = &q[j * d + h * s.key_dim..j * d + (h + 1) * s.key_dim];
                let dot: T = ki.iter().zip(qj).map(|(&u, &v)| u * v).sum();
                *slot = dot * inv;
                mx = mx.max(*slot);
            }
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let mut acc = T::zero();
        for (e, &j) in r.clone().zip(nb.row(i)) {
            for (h, t) in tmp.iter_mut().enumerate() {
                *t = p[h * s.edges + e];
            }
            a[e] = head_mean(&mut tmp);
            acc += a[e] * x[j];
        }
        y[i] = acc;
    }
}

struct SparseAttentionRule<T> {
    nb: Neighborhoods,
    batch: usize,
    heads: usize,
    key_dim: usize,
    inv: T,
    /// Per-sample softmax weights, `[B, H, E]`.
    p: Vec<T>,
    /// Per-sample head-averaged weights, `[B, E]`.
    a: Vec<T>,
}

impl<T: Scalar> Backward<T> for SparseAttentionRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (h_n, dk) = (self.heads, self.key_dim);
        let d = h_n * dk;
        let n = self.nb.num_nodes();
        let e_n = self.nb.num_edges();
        let x = ctx.inputs[0].data();
        let w: Vec<&[T]> = ctx.inputs[1..].iter().map(|t| t.data()).collect();
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![vec![T::zero(); d]; 4];
        let mut k = vec![T::zero(); n * d];
        let mut q = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gq = vec![T::zero(); n * d];
        let mut gl = vec![T::zero(); h_n * e_n];
        let inv_h = T::one() / T::from_count(h_n);
        for b in 0..self.batch {
            let xs = &x[b * n..(b + 1) * n];
            let gy = &ctx.grad[b * n..(b + 1) * n];
            let p = &self.p[b * h_n * e_n..(b + 1) * h_n * e_n];
            let a = &self.a[b * e_n..(b + 1) * e_n];
            let gxs = &mut gx[b * n..(b + 1) * n];
            for i in 0..n {
                for c in 0..d {
                    k[i * d + c] = w[0][c] * xs[i] + w[1][c];
                    q[i * d + c] = w[2][c] * xs[i] + w[3][c];
                }
            }
            // aggregation y_i = sum_e a_e x_j, then softmax Jacobian per head
            for i in 0..n {
                let r = self.nb.range(i);
                for (e, &j) in r.clone().zip(self.nb.row(i)) {
                    gxs[j] += a[e] * gy[i];
                }
                for h in 0..h_n {
                    let base = h * e_n;
                    // d loss / d p^h_e = gy_i x_j / H
                    let dot: T = r
                        .clone()
                        .zip(self.nb.row(i))
                        .map(|(e, &j)| p[base + e] * gy[i] * xs[j] * inv_h)
                        .sum();
                    for (e, &j) in r.clone().zip(self.nb.row(i)) {
                        gl[base + e] = p[base + e] * (gy[i] * xs[j] * inv_h - dot) * self.inv;
                    }
                }
            }
            gk.iter_mut().for_each(|v| *v = T::zero());
            gq.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..n {
                for (e, &j) in self.nb.range(i).zip(self.nb.row(i)) {
                    for h in 0..h_n {
                        let g = gl[h * e_n + e];
                        for c in h * dk..(h + 1) * dk {
                            gk[i * d + c] += g * q[j * d + c];
                            gq[j * d + c] += g * k[i * d + c];
                        }
                    }
                }
            }
            for i in 0..n {
                for c in 0..d {
                    let (u, v) = (gk[i * d + c], gq[i * d + c]);
                    gw[0][c] += u * xs[i];
                    gw[1][c] += u;
                    gw[2][c] += v * xs[i];
                    gw[3][c] += v;
                    gxs[i] += u * w[0][c] + v * w[2][c];
                }
            }
        }
        let mut out = vec![ctx.needs[0].then_some(gx)];
        for (need, g) in ctx.needs[1..].iter().zip(gw) {
            out.push(need.then_some(g));
        }
        out
    }
}

/// Output of [`sparse_attention`]: the recorded aggregate and the per-head
/// and head-averaged edge weights of every sample.
pub struct SparseAttention<'t, T: Scalar> {
    /// `[B, N]` (or `[N]`, `[N, 1]`, matching the input).
    pub updated: Var<'t, T>,
    /// `[B, H, E]` softmax weights in neighborhood order.
    pub head_weights: Vec<T>,
    /// `[B, E]` head-averaged weights.
    pub weights: Vec<T>,
}

/// Graph attention as a single tape operation on scalar node features.
///
/// `x` is `[N]`, `[N, 1]` or `[B, N]`; every sample shares the neighborhood
/// structure and the parameters. Backward yields gradients for `x` and all
/// four projection tensors.
pub fn sparse_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &AttentionVars<'t, T>,
    nb: &Neighborhoods,
) -> Result<SparseAttention<'t, T>> {
    let tape = x.tape();
    let xshape = x.shape();
    let n = nb.num_nodes();
    let batch = match xshape.as_slice() {
        [len] if *len == n => 1,
        [len, 1] if *len == n => 1,
        [b, len] if *len == n => *b,
        _ => {
            return dim_err(format!(
                "attention input {xshape:?} does not hold scalar features for {n} nodes"
            ))
        }
    };
    let wshape = params.wk.shape();
    if wshape.len() != 2 {
        return dim_err(format!(
            "projection weights must be [H, d_K], got {wshape:?}"
        ));
    }
    for v in &params.as_array()[1..] {
        if v.shape() != wshape {
            return dim_err(format!(
                "projection tensors disagree: {:?} vs {wshape:?}",
                v.shape()
            ));
        }
    }
    let s = Shapes {
        heads: wshape[0],
        key_dim: wshape[1],
        nodes: n,
        edges: nb.num_edges(),
    };
    let inv = T::one() / params.scale.divisor::<T>(s.key_dim);
    let mut p = vec![T::zero(); batch * s.heads * s.edges];
    let mut a = vec![T::zero(); batch * s.edges];
    let mut y = vec![T::zero(); batch * n];
    let d = s.heads * s.key_dim;
    let mut kq = vec![T::zero(); 2 * n * d];
    let ids: Vec<usize> = std::iter::once(x.id())
        .chain(params.as_array().iter().map(|v| v.id()))
        .collect();
    tape.with_values(&ids, |vals| {
        let xd = vals[0].data();
        let w = [
            vals[1].data(),
            vals[2].data(),
            vals[3].data(),
            vals[4].data(),
        ];
        for b in 0..batch {
            forward_sample(
                &xd[b * n..(b + 1) * n],
                w,
                inv,
                nb,
                &s,
                &mut kq,
                &mut p[b * s.heads * s.edges..(b + 1) * s.heads * s.edges],
                &mut a[b * s.edges..(b + 1) * s.edges],
                &mut y[b * n..(b + 1) * n],
            );
        }
    });
    let value = Tensor::new(&xshape, y)?;
    let rule = SparseAttentionRule {
        nb: nb.clone(),
        batch,
        heads: s.heads,
        key_dim: s.key_dim,
        inv,
        p: p.clone(),
        a: a.clone(),
    };
    let flops = attention_flops(n, s.edges, s.heads, s.key_dim) * batch as u64;
    let mut inputs = vec![x];
    inputs.extend(params.as_array());
    let updated = tape.custom(&inputs, value, Box::new(rule), flops);
    Ok(SparseAttention {
        updated,
        head_weights: p,
        weights: a,
    })
}

/// Dense attention result for a single feature vector.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Scalar> {
    /// `[N, 1]`
    pub updated: Tensor<T>,
    /// `[H, N, N]` per-head weights, zero off the active neighborhoods.
    pub heads: Tensor<T>,
    /// `[N, N]` head-averaged weights, zero off the active neighborhoods.
    pub attn: Tensor<T>,
}

fn check_input<T: Scalar>(x: &Tensor<T>, g: &Graph) -> Result<()> {
    let n = g.num_nodes();
    match x.shape() {
        [len, 1] | [len] if *len == n => Ok(()),
        s => dim_err(format!("expected [{n}, 1] node features, got {s:?}")),
    }
}

/// Graph attention on `[N, 1]` features, returning dense weight matrices.
pub fn graph_attention<T: Scalar>(
    x: &Tensor<T>,
    g: &Graph,
    mask: &EdgeDropMask,
    p: &GraphAttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    check_input(x, g)?;
    let nb = Neighborhoods::new(g, mask)?;
    let tape = Tape::new();
    let xv = tape.constant(x.reshape(&[g.num_nodes(), 1])?);
    let res = sparse_attention(xv, &p.bind_constant(&tape), &nb)?;
    let n = g.num_nodes();
    let (h_n, e_n) = (p.heads(), nb.num_edges());
    let mut heads = vec![T::zero(); h_n * n * n];
    let mut attn = vec![T::zero(); n * n];
    for i in 0..n {
        for (e, &j) in nb.range(i).zip(nb.row(i)) {
            for h in 0..h_n {
                heads[(h * n + i) * n + j] = res.head_weights[h * e_n + e];
            }
            attn[i * n + j] = res.weights[e];
        }
    }
    Ok(AttentionOutput {
        updated: res.updated.to_tensor(),
        heads: Tensor::new(&[h_n, n, n], heads)?,
        attn: Tensor::new(&[n, n], attn)?,
    })
}

/// Additive `[N, N]` mask: 0 on active edges, [`MASK_LOGIT`] elsewhere.
pub fn dense_mask<T: Scalar>(g: &Graph, mask: &EdgeDropMask) -> Result<Tensor<T>> {
    let n = g.num_nodes();
    let mut m = vec![T::from_f64_lossy(MASK_LOGIT); n * n];
    for i in 0..n {
        let drop = mask.dropped(i);
        for &j in g.neighbors(i) {
            if Some(j) != drop {
                m[i * n + j] = T::zero();
            }
        }
    }
    Tensor::new(&[n, n], m)
}

/// Dense reference: full `N x N` logits per head from tape primitives, the
/// additive mask, softmax, head average, then `A x`. Differentiable in every
/// input, so it doubles as a gradient oracle.
pub fn dense_attention_vars<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &AttentionVars<'t, T>,
    mask: Var<'t, T>,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let tape = x.tape();
    let wshape = params.wk.shape();
    let (h_n, dk) = (wshape[0], wshape[1]);
    let inv = T::one() / params.scale.divisor::<T>(dk);
    let mut per_head = Vec::with_capacity(h_n);
    for h in 0..h_n {
        let pick = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let mut sel = vec![T::zero(); h_n];
            sel[h] = T::one();
            let sel = tape.constant(Tensor::new(&[1, h_n], sel)?);
            sel.matmul(v)
        };
        let keys = x.matmul(pick(params.wk)?)?.add(pick(params.bk)?)?;
        let queries = x.matmul(pick(params.wq)?)?.add(pick(params.bq)?)?;
        let logits = keys.matmul(queries.transpose()?)?.scale(inv).add(mask)?;
        per_head.push(logits.softmax(1)?);
    }
    let mut sum = per_head[0];
    for &a in &per_head[1..] {
        sum = sum.add(a)?;
    }
    let attn = sum.scale(T::one() / T::from_count(h_n));
    Ok((attn, per_head))
}

/// Dense counterpart of [`graph_attention`], for cross-checking.
pub fn dense_attention_oracle<T: Scalar>(
    x: &Tensor<T>,
    g: &Graph,
    mask: &EdgeDropMask,
    p: &GraphAttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    check_input(x, g)?;
    let n = g.num_nodes();
    let tape = Tape::new();
    let xv = tape.constant(x.reshape(&[n, 1])?);
    let mv = tape.constant(dense_mask(g, mask)?);
    let (attn, per_head) = dense_attention_vars(xv, &p.bind_constant(&tape), mv)?;
    let updated = attn.matmul(xv)?;
    let mut heads = Vec::with_capacity(p.heads() * n * n);
    for h in per_head {
        heads.extend_from_slice(h.value().data());
    }
    Ok(AttentionOutput {
        updated: updated.to_tensor(),
        heads: Tensor::new(&[p.heads(), n, n], heads)?,
        attn: attn.to_tensor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_cyclic_channel_graph, build_grid_spatial_graph, sample_edge_drop};
    use crate::rng::Xoshiro256;

    fn unit_params(h: usize, dk: usize) -> GraphAttentionParams<f64> {
        let ones = Tensor::ones(&[h, dk]).unwrap();
        let zeros = Tensor::zeros(&[h, dk]).unwrap();
        GraphAttentionParams::from_parts(
            ones.clone(),
            zeros.clone(),
            ones,
            zeros,
            LogitScale::KeyDim,
        )
        .unwrap()
    }

    #[test]
    fn init_counts_and_determinism() {
        let mut rng = Xoshiro256::seed_from_u64(1);
        let p = GraphAttentionParams::<f64>::init(8, 4, &mut rng).unwrap();
        assert_eq!((p.key_dim(), p.param_count()), (2, 32));
        let q = GraphAttentionParams::<f64>::init(4, 1, &mut rng).unwrap();
        assert_eq!(q.param_count(), 16);
        let a = GraphAttentionParams::<f64>::init(8, 4, &mut Xoshiro256::seed_from_u64(5)).unwrap();
        let b = GraphAttentionParams::<f64>::init(8, 4, &mut Xoshiro256::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.bk.data().iter().all(|&v| v == 0.0));
        assert!(GraphAttentionParams::<f64>::init(8, 3, &mut rng).is_err());
    }

    #[test]
    fn three_cycle_example() {
        let g = build_cyclic_channel_graph(3, 1).unwrap();
        let x = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let out = graph_attention(&x, &g, &EdgeDropMask::inactive(3), &unit_params(1, 1)).unwrap();
        let e2 = 2f64.exp();
        let e3 = 3f64.exp();
        let want = (2.0 * e2 + 3.0 * e3) / (e2 + e3);
        assert!((out.updated.data()[0] - want).abs() < 1e-12);
        assert!((out.updated.data()[0] - 2.73106).abs() < 1e-5);
        assert!((out.attn.get(&[0, 1]) - 0.26894).abs() < 1e-5);
        assert_eq!(out.attn.get(&[0, 0]), 0.0);
    }

    #[test]
    fn constant_features_give_uniform_rows() {
        let g = build_grid_spatial_graph(4).unwrap();
        let mut rng = Xoshiro256::seed_from_u64(2);
        let p = GraphAttentionParams::<f64>::init(8, 4, &mut rng).unwrap();
        let x = Tensor::full(&[16, 1], 0.7).unwrap();
        let out = graph_attention(&x, &g, &EdgeDropMask::inactive(16), &p).unwrap();
        for i in 0..16 {
            let deg = g.degree(i) as f64;
            for &j in g.neighbors(i) {
                assert!((out.attn.get(&[i, j]) - 1.0 / deg).abs() < 1e-14);
            }
            assert!((out.updated.data()[i] - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn sparse_matches_dense_with_mask() {
        let g = build_grid_spatial_graph(5).unwrap();
        let mut rng = Xoshiro256::seed_from_u64(11);
        let mask = sample_edge_drop(&g, 5, &mut rng).unwrap();
        let p = GraphAttentionParams::<f64>::init(8, 4, &mut rng).unwrap();
        let x = Tensor::from_fn(&[25, 1], |i| (i as f64 * 0.37).cos()).unwrap();
        let s = graph_attention(&x, &g, &mask, &p).unwrap();
        let d = dense_attention_oracle(&x, &g, &mask, &p).unwrap();
        assert!(s.updated.max_abs_diff(&d.updated).unwrap() < 1e-12);
        assert!(s.attn.max_abs_diff(&d.attn).unwrap() < 1e-12);
        assert!(s.heads.max_abs_diff(&d.heads).unwrap() < 1e-12);
        for (i, j) in mask.entries() {
            assert_eq!(s.attn.get(&[i, j]), 0.0);
        }
    }

    #[test]
    fn empty_neighborhood_is_reported() {
        let g = Graph::from_neighbors(vec![vec![1], vec![0]]).unwrap();
        let mask = EdgeDropMask::from_entries(&g, vec![Some(1), None]).unwrap();
        let x = Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let p = unit_params(1, 1);
        assert!(matches!(
            graph_attention(&x, &g, &mask, &p),
            Err(Error::EmptyNeighborhood { node: 0 })
        ));
        assert!(matches!(
            dense_attention_oracle(&x, &g, &mask, &p),
            Err(Error::EmptyNeighborhood { node: 0 })
        ));
    }

    #[test]
    fn wrong_node_count_is_dimension_error() {
        let g = build_cyclic_channel_graph(4, 1).unwrap();
        let x = Tensor::<f64>::zeros(&[3, 1]).unwrap();
        let r = graph_attention(&x, &g, &EdgeDropMask::inactive(4), &unit_params(1, 1));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_rows_match_single_calls() {
        let g = build_cyclic_channel_graph(6, 2).unwrap();
        let nb = Neighborhoods::full(&g).unwrap();
        let mut rng = Xoshiro256::seed_from_u64(4);
        let p = GraphAttentionParams::<f64>::init(4, 2, &mut rng).unwrap();
        let xs = Tensor::from_fn(&[3, 6], |i| ((i * 7) % 5) as f64 - 2.0).unwrap();
        let tape = Tape::new();
        let vars = p.bind_constant(&tape);
        let batched = sparse_attention(tape.constant(xs.clone()), &vars, &nb).unwrap();
        for b in 0..3 {
            let row = Tensor::new(&[6, 1], xs.data()[b * 6..(b + 1) * 6].to_vec()).unwrap();
            let single = graph_attention(&row, &g, &EdgeDropMask::inactive(6), &p).unwrap();
            assert_eq!(
                &batched.updated.value().data()[b * 6..(b + 1) * 6],
                single.updated.data()
            );
        }
    }

    #[test]
    fn flop_count_matches_formula() {
        let g = build_grid_spatial_graph(7).unwrap();
        let nb = Neighborhoods::full(&g).unwrap();
        let p = GraphAttentionParams::<f64>::init(8, 4, &mut Xoshiro256::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 49]).unwrap());
        sparse_attention(x, &p.bind_constant(&tape), &nb).unwrap();
        // 49 nodes * 32 + 168 edges * (2*8 + 7*4 + 2)
        assert_eq!(tape.flops(), 2 * (49 * 32 + 168 * 46));
    }

    #[test]
    fn head_mean_is_exact_for_copies() {
        let v = 0.1f64 + 0.2;
        for h in [1, 2, 4, 8] {
            let mut vals = vec![v; h];
            assert_eq!(head_mean(&mut vals), v);
        }
    }
}
