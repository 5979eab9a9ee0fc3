//! The full oracle, gradient and invariant suite behind `steam verify`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;

use super::{brute_force_cia, gradcheck, naive_conv2d, CiaOracleParams, GradcheckOptions};
use crate::attention::{dense_attention_oracle, graph_attention, GraphAttentionParams, LogitScale};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::graph::{
    build_cyclic_channel_graph, build_grid_spatial_graph, sample_edge_drop, EdgeDropMask, Graph,
};
use crate::rng::Xoshiro256;
use crate::steam::{ogp, upsample_repeat, Arrangement, Phase, SteamConfig, SteamUnit, SteamVars};
use crate::tensor::Tensor;
use crate::zoo::{count_flops, count_params, measure_flops, plan_for_blocks, StageSpec};

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Instances per randomized check.
    pub instances: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            instances: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "[{}] {:<40} {:>8.2}s  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.elapsed.as_secs_f64(),
                c.detail
            );
        }
        let _ = writeln!(
            out,
            "{} checks, {} failed",
            self.checks.len(),
            self.failures()
        );
        out
    }
}

fn run(report: &mut SuiteReport, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    report.checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    });
}

fn random_tensor(rng: &mut Xoshiro256, shape: &[usize], scale: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_params(
    rng: &mut Xoshiro256,
    d: usize,
    heads: usize,
) -> Result<GraphAttentionParams<f64>> {
    let dk = d / heads;
    let mut draw = || random_tensor(rng, &[heads, dk], 1.0);
    let (wk, bk, wq, bq) = (draw()?, draw()?, draw()?, draw()?);
    GraphAttentionParams::from_parts(wk, bk, wq, bq, LogitScale::KeyDim)
}

/// Random attention instance alternating between channel cycles and
/// masked grids.
fn attention_instance(
    rng: &mut Xoshiro256,
    i: usize,
) -> Result<(Graph, EdgeDropMask, GraphAttentionParams<f64>, Tensor<f64>)> {
    let heads = [1, 2, 4, 8][i % 4];
    let d = heads * rng.random_range(1..=3);
    let (g, mask) = if i.is_multiple_of(2) {
        let c = rng.random_range(3..=64);
        let hops = if c >= 5 && rng.random_bool(0.5) { 2 } else { 1 };
        let g = build_cyclic_channel_graph(c, hops)?;
        let n = g.num_nodes();
        (g, EdgeDropMask::inactive(n))
    } else {
        let m = rng.random_range(2..=9);
        let g = build_grid_spatial_graph(m)?;
        let mask = sample_edge_drop(&g, m, rng)?;
        (g, mask)
    };
    let p = random_params(rng, d, heads)?;
    let x = random_tensor(rng, &[g.num_nodes(), 1], 2.0)?;
    Ok((g, mask, p, x))
}

fn grad_ok<F>(f: F, inputs: &[Tensor<f64>]) -> Result<(bool, f64, String)>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let r = gradcheck(f, inputs, GradcheckOptions::default())?;
    Ok((r.passed(), r.max_rel_err, r.to_string()))
}

/// Fixed random weights in `[-scale, scale)` for reducing outputs to a
/// scalar.
fn weights_like<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, scale: f64) -> Result<Var<'t, f64>> {
    let mut rng = Xoshiro256::seed_from_u64(99);
    let t = Tensor::from_fn(&v.shape(), |_| rng.random_range(-scale..scale))?;
    Ok(tape.constant(t))
}

fn weighted_mean<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    Ok(v.mul(weights_like(tape, v, 1.0)?)?.mean_all())
}

/// Weights in `[0.5, 1.5)` times 1e-2. Positive weights make a
/// whole-channel or whole-block rescale move the loss coherently, keeping
/// score-parameter gradients above rounding noise; the small scale keeps
/// that noise under the error floor for the query bias, whose gradient is
/// exactly zero.
fn steam_loss<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = weights_like(tape, v, 0.5)?.add(tape.scalar(1.0))?;
    Ok(v.mul(w)?.mean_all().scale(1e-2))
}

/// Small-magnitude loss for attention checks. The query bias has an
/// identically zero gradient (it shifts a whole softmax row), so its
/// numeric derivative is pure rounding noise proportional to the loss.
fn attention_loss<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    Ok(v.mul(weights_like(tape, v, 1e-2)?)?.mean_all())
}

/// `[C, H, W]` input with per-channel offsets plus a shared spatial
/// pattern, so both pooled descriptors spread out and each branch carries
/// real signal.
fn steam_input(rng: &mut Xoshiro256, c: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pattern: Vec<f64> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_fn(&[c, h, w], |i| {
        offsets[i / (h * w)] + pattern[i % (h * w)] + rng.random_range(-0.3..0.3)
    })
}

/// Runs every check and collects pass/fail lines.
pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    let mut report = SuiteReport::default();
    let n = opts.instances.max(1);

    run(&mut report, "sparse attention == dense oracle", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed);
        let mut worst = 0.0f64;
        for i in 0..n {
            let (g, mask, p, x) = attention_instance(&mut rng, i)?;
            let s = graph_attention(&x, &g, &mask, &p)?;
            let d = dense_attention_oracle(&x, &g, &mask, &p)?;
            worst = worst
                .max(s.updated.max_abs_diff(&d.updated)?)
                .max(s.attn.max_abs_diff(&d.attn)?);
        }
        Ok((
            worst <= 1e-10,
            format!("{n} instances, max |diff| {worst:.2e}"),
        ))
    });

    run(&mut report, "attention rows stochastic", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 1);
        let mut worst = 0.0f64;
        let mut outside = 0usize;
        for i in 0..n {
            let (g, mask, p, x) = attention_instance(&mut rng, i)?;
            let out = graph_attention(&x, &g, &mask, &p)?;
            let nn = g.num_nodes();
            for r in 0..nn {
                let row = &out.attn.data()[r * nn..(r + 1) * nn];
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                let drop = mask.dropped(r);
                for (j, &a) in row.iter().enumerate() {
                    let active = g.neighbors(r).contains(&j) && Some(j) != drop;
                    if !active && a != 0.0 {
                        outside += 1;
                    }
                }
            }
        }
        Ok((
            worst <= 1e-9 && outside == 0,
            format!("max |row sum - 1| {worst:.2e}, {outside} nonzero outside"),
        ))
    });

    run(&mut report, "brute-force CIA == cia", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 2);
        let mut worst = 0.0f64;
        for i in 0..2 * n {
            let heads = [1, 2, 4, 8][i % 4];
            let cfg = SteamConfig {
                d: heads * 2,
                heads,
                channel_hops: 1 + i % 2,
                ..SteamConfig::default()
            };
            let c = rng.random_range(5..=64);
            let unit = SteamUnit::<f64>::from_params(
                cfg.clone(),
                random_params(&mut rng, cfg.d, heads)?,
                random_params(&mut rng, cfg.d, heads)?,
            )?;
            let x = random_tensor(&mut rng, &[c, 7, 7], 1.5)?;
            let (_, alpha) = unit.cia(&x)?;
            let p = CiaOracleParams {
                heads,
                wk: unit.cia.wk.data(),
                bk: unit.cia.bk.data(),
                wq: unit.cia.wq.data(),
                bq: unit.cia.bq.data(),
                sqrt_scaling: false,
            };
            let oracle = brute_force_cia(x.data(), c, 49, cfg.channel_hops, &p);
            for (a, b) in alpha.data().iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((
            worst <= 1e-10,
            format!("{} instances, max |diff| {worst:.2e}", 2 * n),
        ))
    });

    run(&mut report, "conv2d == naive loops", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 3);
        let mut worst = 0.0f64;
        for (stride, pad, k) in [(1, 1, 3), (2, 0, 2), (1, 0, 1), (2, 1, 3)] {
            let x = random_tensor(&mut rng, &[2, 3, 8, 8], 1.0)?;
            let w = random_tensor(&mut rng, &[4, 3, k, k], 1.0)?;
            if (8 + 2 * pad - k) % stride != 0 {
                continue;
            }
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), stride, pad)?;
            let (want, _, _) =
                naive_conv2d(x.data(), (2, 3, 8, 8), w.data(), (4, k, k), stride, pad);
            for (a, b) in y.value().data().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst <= 1e-10, format!("max |diff| {worst:.2e}")))
    });

    run(&mut report, "gradcheck primitives", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 4);
        let mut worst = 0.0f64;
        let mut ok = true;
        let mut note = |r: (bool, f64, String)| {
            ok &= r.0;
            worst = worst.max(r.1);
        };
        let a = random_tensor(&mut rng, &[3, 4], 1.0)?;
        let b = random_tensor(&mut rng, &[4, 2], 1.0)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].matmul(v[1])?),
            &[a.clone(), b],
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].softmax(1)?),
            std::slice::from_ref(&a),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].softmax(0)?),
            std::slice::from_ref(&a),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].sigmoid()),
            std::slice::from_ref(&a),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].tanh()),
            std::slice::from_ref(&a),
        )?);
        let away = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        note(grad_ok(|t, v| weighted_mean(t, v[0].relu()), &[away])?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].transpose()?.scale(1.5)),
            std::slice::from_ref(&a),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].reshape(&[2, 6])?),
            std::slice::from_ref(&a),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].sum_axes(&[0])?),
            std::slice::from_ref(&a),
        )?);
        note(grad_ok(
            |t, v| Ok(v[0].mul(weights_like(t, v[0], 1.0)?)?.sum_all()),
            std::slice::from_ref(&a),
        )?);
        let row = random_tensor(&mut rng, &[1, 4], 1.0)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].broadcast_to(&[3, 4])?),
            &[row],
        )?);
        let col = random_tensor(&mut rng, &[3, 1], 1.0)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].mul(v[1])?.add(v[1])?.sub(v[0])?),
            &[a.clone(), col],
        )?);
        let x4 = random_tensor(&mut rng, &[2, 3, 4, 4], 1.0)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].mean_axes(&[2, 3])?),
            std::slice::from_ref(&x4),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].max_axes(&[1])?),
            std::slice::from_ref(&x4),
        )?);
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].block_mean(2)?),
            std::slice::from_ref(&x4),
        )?);
        let s = random_tensor(&mut rng, &[2, 2, 2], 1.0)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].block_repeat(4, 6)?),
            &[s],
        )?);
        let w = random_tensor(&mut rng, &[2, 3, 3, 3], 0.5)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].conv2d(v[1], 1, 1)?),
            &[x4.clone(), w],
        )?);
        let w2 = random_tensor(&mut rng, &[2, 3, 2, 2], 0.5)?;
        note(grad_ok(
            |t, v| weighted_mean(t, v[0].conv2d(v[1], 2, 0)?),
            &[x4, w2],
        )?);
        let logits = random_tensor(&mut rng, &[4, 5], 2.0)?;
        note(grad_ok(
            |_, v| v[0].cross_entropy(&[0, 3, 1, 4]),
            &[logits],
        )?);
        Ok((ok, format!("19 ops, max rel err {worst:.2e}")))
    });

    run(&mut report, "gradcheck graph attention", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 5);
        let mut worst = 0.0f64;
        let mut ok = true;
        for i in 0..4 {
            let (g, mask, p, x) = attention_instance(&mut rng, i + 1)?;
            let nb = crate::attention::Neighborhoods::new(&g, &mask)?;
            let inputs = [x, p.wk.clone(), p.bk.clone(), p.wq.clone(), p.bq.clone()];
            let r = grad_ok(
                |t, v| {
                    let vars = crate::attention::AttentionVars {
                        wk: v[1],
                        bk: v[2],
                        wq: v[3],
                        bq: v[4],
                        scale: LogitScale::KeyDim,
                    };
                    attention_loss(
                        t,
                        crate::attention::sparse_attention(v[0], &vars, &nb)?.updated,
                    )
                },
                &inputs,
            )?;
            ok &= r.0;
            worst = worst.max(r.1);
        }
        Ok((ok, format!("4 instances, max rel err {worst:.2e}")))
    });

    for &arrangement in Arrangement::ALL {
        run(
            &mut report,
            &format!("gradcheck steam_forward {arrangement}"),
            || {
                let mut rng = Xoshiro256::seed_from_u64(opts.seed + 6);
                let cfg = SteamConfig {
                    arrangement,
                    ..SteamConfig::default()
                };
                let unit = SteamUnit::<f64>::from_params(
                    cfg,
                    random_params(&mut rng, 8, 4)?,
                    random_params(&mut rng, 8, 4)?,
                )?;
                let x = steam_input(&mut rng, 4, 14, 14)?;
                let mut inputs = vec![x];
                for (_, t) in unit.named_params() {
                    inputs.push(t.clone());
                }
                let (ok, worst, detail) = grad_ok(
                    |t, v| {
                        let vars = SteamVars::from_slice(&v[1..], &unit);
                        steam_loss(t, unit.forward_vars(v[0], &vars, Phase::Eval)?.output)
                    },
                    &inputs,
                )?;
                Ok((ok && worst < 1e-4, detail))
            },
        );
    }

    run(&mut report, "graph structure invariants", || {
        let mut bad = Vec::new();
        for m in 2..=16 {
            let g = build_grid_spatial_graph(m)?;
            if g.undirected_edge_count() != 2 * m * (m - 1) || !g.is_symmetric() {
                bad.push(format!("grid m={m}"));
            }
        }
        for c in 3..=64 {
            for hops in [1, 2] {
                if hops == 2 && c < 5 {
                    continue;
                }
                let g = build_cyclic_channel_graph(c, hops)?;
                let deg = 2 * hops;
                if (0..c).any(|i| g.degree(i) != deg) || !g.is_symmetric() || !g.is_connected() {
                    bad.push(format!("cycle C={c} hops={hops}"));
                }
            }
        }
        Ok((
            bad.is_empty(),
            if bad.is_empty() {
                "grids m=2..16, cycles C=3..64".into()
            } else {
                bad.join(", ")
            },
        ))
    });

    run(&mut report, "STEAM invariants", || {
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 7);
        let unit = SteamUnit::<f64>::new(SteamConfig::default(), &mut rng)?;
        let mut counts = Vec::new();
        let mut in_range = true;
        for c in [16, 64, 256] {
            let x = random_tensor(&mut rng, &[2, c, 7, 7], 3.0)?;
            let tape = Tape::new();
            let tr =
                unit.forward_vars(tape.constant(x), &unit.bind_constant(&tape), Phase::Eval)?;
            for a in [tr.alpha_c, tr.alpha_init] {
                in_range &= a.value().data().iter().all(|&v| v > 0.0 && v < 1.0);
            }
            counts.push(unit.param_count());
        }
        let s = random_tensor(&mut rng, &[7, 7], 1.0)?;
        let up = upsample_repeat(&s, 56, 56)?;
        let back = ogp(&up.reshape(&[1, 56, 56])?, 7)?;
        let round_trip = back.data() == s.data();
        let ok = counts.iter().all(|&c| c == 64) && in_range && round_trip;
        Ok((
            ok,
            format!(
                "params {counts:?}, scores in (0,1): {in_range}, round trip exact: {round_trip}"
            ),
        ))
    });

    run(&mut report, "edge drop behaviour", || {
        let g = build_grid_spatial_graph(7)?;
        let mut rng = Xoshiro256::seed_from_u64(opts.seed + 8);
        let mut valid = true;
        for _ in 0..n {
            let mask = sample_edge_drop(&g, 7, &mut rng)?;
            valid &= mask.count() == 25;
            valid &= mask.entries().all(|(i, j)| g.neighbors(i).contains(&j));
        }
        let unit = SteamUnit::<f64>::new(SteamConfig::default(), &mut rng)?;
        let x = random_tensor(&mut rng, &[8, 14, 14], 1.0)?;
        let e1 = unit.forward(&x, Phase::Eval)?;
        let e2 = unit.forward(&x, Phase::Eval)?;
        let t1 = unit.forward(&x, Phase::Train(&mut Xoshiro256::seed_from_u64(1)))?;
        let t2 = unit.forward(&x, Phase::Train(&mut Xoshiro256::seed_from_u64(2)))?;
        let ok = valid && e1 == e2 && t1 != t2;
        Ok((
            ok,
            format!(
                "masks valid: {valid}, eval identical: {}, train differs: {}",
                e1 == e2,
                t1 != t2
            ),
        ))
    });

    run(&mut report, "parameter accounting", || {
        let cases = [
            (vec![2, 2, 2, 2], 256),
            (vec![3, 4, 6, 3], 320),
            (vec![3, 4, 23, 3], 576),
            (vec![4, 8, 4], 256),
        ];
        let got: Vec<usize> = cases
            .iter()
            .map(|(b, _)| count_params(&plan_for_blocks(b), 8))
            .collect();
        let ok = cases.iter().zip(&got).all(|((_, w), g)| w == g);
        Ok((ok, format!("{got:?}")))
    });

    run(&mut report, "analytic flops == instrumented", || {
        let cfg = SteamConfig::default();
        let mut detail = Vec::new();
        let mut ok = true;
        for spec in [
            StageSpec::resnet18(),
            StageSpec::resnet50(),
            StageSpec::shufflenet_v2(),
        ] {
            let plan = plan_for_blocks(&spec.blocks);
            let a = count_flops(&plan, &spec, &cfg)?;
            let m = measure_flops(&plan, &spec, &cfg)?;
            ok &= a == m;
            detail.push(format!("{:?}: {} vs {}", spec.blocks, a.total(), m.total()));
        }
        Ok((ok, detail.join("; ")))
    });

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(&SuiteOptions {
            seed: 7,
            instances: 4,
        });
        assert!(report.all_passed(), "{}", report.to_text());
    }
}
