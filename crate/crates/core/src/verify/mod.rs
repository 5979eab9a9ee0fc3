//! Independent oracles: finite-difference gradient checking and
//! straightforward loop reimplementations that share no code with the
//! production kernels.

mod suite;

pub use suite::{run_suite, CheckResult, SuiteOptions, SuiteReport};

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference settings.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
        }
    }
}

/// Coordinate with the largest relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} coords (tol {:.0e})",
            self.max_rel_err, self.coordinates, self.tol
        )?;
        if let Some(w) = self.worst {
            write!(
                f,
                "; worst input {} [{}]: analytic {:.6e}, numeric {:.6e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences at every coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        tol: opts.tol,
    };
    for (input, a) in analytic.iter().enumerate() {
        for (index, &ag) in a.iter().enumerate() {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + opts.step;
            let up = eval_scalar(&f, &work)?;
            work[input].data_mut()[index] = orig - opts.step;
            let down = eval_scalar(&f, &work)?;
            work[input].data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(ag, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoordinate {
                    input,
                    index,
                    analytic: ag,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Raw CIA parameters for [`brute_force_cia`], each `[H * d_K]` laid out
/// head-major.
#[derive(Debug, Clone)]
pub struct CiaOracleParams<'a> {
    pub heads: usize,
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub sqrt_scaling: bool,
}

/// Channel scores recomputed with plain loops: channel means, `hops`-cycle
/// neighborhoods, per-head softmax over dot-product logits, head mean,
/// aggregation, sigmoid. `x` is `[C, H, W]` flattened.
pub fn brute_force_cia(
    x: &[f64],
    c: usize,
    hw: usize,
    hops: usize,
    p: &CiaOracleParams<'_>,
) -> Vec<f64> {
    let dk = p.wk.len() / p.heads;
    let denom = if p.sqrt_scaling {
        (dk as f64).sqrt()
    } else {
        dk as f64
    };
    let mut feat = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..hw {
            s += x[ch * hw + i];
        }
        feat[ch] = s / hw as f64;
    }
    let mut alpha = vec![0.0; c];
    for i in 0..c {
        let mut nbrs = Vec::new();
        for h in 1..=hops {
            for j in [(i + c - h) % c, (i + h) % c] {
                if j != i && !nbrs.contains(&j) {
                    nbrs.push(j);
                }
            }
        }
        let mut avg = vec![0.0; nbrs.len()];
        for head in 0..p.heads {
            let mut logits = Vec::with_capacity(nbrs.len());
            for &j in &nbrs {
                let mut dot = 0.0;
                for a in head * dk..(head + 1) * dk {
                    let key = p.wk[a] * feat[i] + p.bk[a];
                    let query = p.wq[a] * feat[j] + p.bq[a];
                    dot += key * query;
                }
                logits.push(dot / denom);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                avg[k] += (l - mx).exp() / z / p.heads as f64;
            }
        }
        let mut att = 0.0;
        for (k, &j) in nbrs.iter().enumerate() {
            att += avg[k] * feat[j];
        }
        alpha[i] = 1.0 / (1.0 + (-att).exp());
    }
    alpha
}

/// Direct six-deep loop cross-correlation. `x` is `[N, C, H, W]` and `w`
/// is `[O, C, kh, kw]`; returns `[N, O, oh, ow]` and the output size.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + y as usize) * w + xx as usize]
                                    * wt[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Backward, BackwardCtx};

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 3.0]).unwrap();
        let r = gradcheck(
            |_, v| Ok(v[0].mul(v[0])?.sum_all()),
            &[x],
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let r = gradcheck(|_, v| Ok(v[0]), &[x], GradcheckOptions::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    struct DoubledSquare;

    impl Backward<f64> for DoubledSquare {
        fn backward(&self, ctx: &BackwardCtx<'_, f64>) -> Vec<Option<Vec<f64>>> {
            // deliberately twice the true derivative
            let x = ctx.inputs[0].data();
            vec![Some(
                x.iter().zip(ctx.grad).map(|(v, g)| 4.0 * v * g).collect(),
            )]
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.8, 1.1]).unwrap();
        let r = gradcheck(
            |tape, v| {
                let sq = v[0].value().map(|a| a * a);
                Ok(tape
                    .custom(&[v[0]], sq, Box::new(DoubledSquare), crate::FlopCount::ZERO)
                    .sum_all())
            },
            &[x],
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn brute_force_cia_uniform_input() {
        let x = vec![0.25; 5 * 4];
        let w = [0.3, -0.7, 1.1, 0.2];
        let z = [0.0; 4];
        let p = CiaOracleParams {
            heads: 2,
            wk: &w,
            bk: &z,
            wq: &w,
            bq: &z,
            sqrt_scaling: false,
        };
        let a = brute_force_cia(&x, 5, 4, 1, &p);
        assert!(a.iter().all(|&v| v == a[0]));
    }

    #[test]
    fn naive_conv_identity_kernel() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let (y, oh, ow) = naive_conv2d(&x, (1, 1, 4, 4), &k, (1, 3, 3), 1, 1);
        assert_eq!((oh, ow), (4, 4));
        assert_eq!(y, x);
    }
}
