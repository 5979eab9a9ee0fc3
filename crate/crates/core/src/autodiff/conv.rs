//! 2-D cross-correlation via im2col and GEMM.

use super::{Backward, BackwardCtx, FlopCount, Var};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn out_size(len: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let span = len + 2 * pad;
    if span < k || !(span - k).is_multiple_of(stride) {
        return dim_err(format!(
            "conv2d {axis}: ({len} + 2*{pad} - {k}) / {stride} + 1 is not a positive integer"
        ));
    }
    Ok((span - k) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dx[base + xx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvRule {
    g: Geometry,
}

impl<T: Scalar> Backward<T> for ConvRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.g;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_len = g.c * g.h * g.w;
        let out_len = g.o * cols;
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); w.len()]);
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
        let mut dcol = vec![T::zero(); rows * cols];
        for s in 0..g.n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let gs = &ctx.grad[s * out_len..(s + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                let colv: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut col);
                    &col
                };
                T::gemm(
                    g.o,
                    cols,
                    rows,
                    T::one(),
                    gs,
                    false,
                    colv,
                    true,
                    T::one(),
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                if g.is_pointwise() {
                    T::gemm(rows, g.o, cols, T::one(), w, true, gs, false, T::one(), dxs);
                } else {
                    T::gemm(
                        rows,
                        g.o,
                        cols,
                        T::one(),
                        w,
                        true,
                        gs,
                        false,
                        T::zero(),
                        &mut dcol,
                    );
                    col2im(&dcol, g, dxs);
                }
            }
        }
        vec![dx, dw]
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cross-correlation of `[N, C, H, W]` (or `[C, H, W]`) input with
    /// `[O, C, kh, kw]` weights. Output spatial size must come out exact.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        if stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        let (out, g) = self.tape.with_values(&[self.id, weight.id], |v| {
            let (x, w) = (v[0], v[1]);
            let (batched, xs) = match x.rank() {
                4 => (true, x.shape().to_vec()),
                3 => (false, [&[1], x.shape()].concat()),
                _ => {
                    return dim_err(format!(
                        "conv2d input must be 3-D or 4-D, got {:?}",
                        x.shape()
                    ))
                }
            };
            let ws = w.shape();
            if ws.len() != 4 || ws[1] != xs[1] {
                return dim_err(format!(
                    "conv2d weight {:?} does not match input {:?}",
                    ws,
                    x.shape()
                ));
            }
            let oh = out_size(xs[2], ws[2], stride, pad, "height")?;
            let ow = out_size(xs[3], ws[3], stride, pad, "width")?;
            let g = Geometry {
                n: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                o: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride,
                pad,
                oh,
                ow,
            };
            let (rows, cols) = (g.col_rows(), g.col_cols());
            let mut data = vec![T::zero(); g.n * g.o * cols];
            let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
            let in_len = g.c * g.h * g.w;
            for s in 0..g.n {
                let xs = &x.data()[s * in_len..(s + 1) * in_len];
                let colv: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut col);
                    &col
                };
                let dst = &mut data[s * g.o * cols..(s + 1) * g.o * cols];
                T::gemm(
                    g.o,
                    rows,
                    cols,
                    T::one(),
                    w.data(),
                    false,
                    colv,
                    false,
                    T::zero(),
                    dst,
                );
            }
            let shape = if batched {
                vec![g.n, g.o, oh, ow]
            } else {
                vec![g.o, oh, ow]
            };
            Ok((Tensor::new(&shape, data)?, g))
        })?;
        let flops = FlopCount::mac(2 * (g.n * g.o * g.oh * g.ow * g.col_rows()) as u64);
        Ok(self
            .tape
            .custom(&[self, weight], out, Box::new(ConvRule { g }), flops))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn constant_kernel_scales_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]).unwrap());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0).unwrap());
        let y = x.conv2d(w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let xt = Tensor::from_fn(&[2, 5, 5], |i| (i as f64 * 0.3).sin()).unwrap();
        let x = tape.constant(xt.clone());
        let mut k = vec![0.0; 2 * 2 * 9];
        // out channel o reads in channel o at the centre tap
        k[4] = 1.0;
        k[(2 + 1) * 9 + 4] = 1.0;
        let w = tape.constant(Tensor::from_f64(&[2, 2, 3, 3], &k).unwrap());
        let y = x.conv2d(w, 1, 1).unwrap();
        assert_eq!(y.value().data(), xt.data());
    }

    #[test]
    fn rejects_fractional_output_size() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 28, 28]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        assert!(x.conv2d(w, 2, 1).is_err());
        assert!(x.conv2d(w, 2, 0).is_err());
        let w2 = tape.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        assert_eq!(x.conv2d(w2, 2, 0).unwrap().shape(), vec![1, 1, 14, 14]);
    }
}
