//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Criteria 7 and 8 train on MNIST from `STEAM_DATA_DIR`, falling back to
//! `data/mnist` at the workspace root.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use steam_core::attention::{dense_attention_oracle, graph_attention};
use steam_core::graph::{build_cyclic_channel_graph, build_grid_spatial_graph, sample_edge_drop};
use steam_core::steam::{ogp, upsample_repeat};
use steam_core::verify::{run_suite, SuiteOptions};
use steam_core::zoo::{build_desk_cnn, count_flops, measure_flops, plan_for_blocks, StageSpec};
use steam_core::{
    EdgeDropMask, GraphAttentionParams, Phase, SteamConfig, SteamUnit, Tape, Tensor, Xoshiro256,
};

const PAPER_R50_GFLOPS: f64 = 3.57e-3;

type Verdict = Result<(bool, String), String>;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

/// Written straight to stdout so the lines show without `--nocapture`.
fn emit(o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "[{}] criterion {} {:<28} {:>8.2}s  {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.elapsed.as_secs_f64(),
        o.detail
    );
    let _ = out.flush();
}

fn criterion(
    id: usize,
    name: &'static str,
    budget: Duration,
    f: impl FnOnce() -> Verdict,
) -> Outcome {
    let start = Instant::now();
    let r = f();
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    if elapsed > budget {
        passed = false;
        detail.push_str(&format!(" (over the {:.0}s budget)", budget.as_secs_f64()));
    }
    let o = Outcome {
        id,
        name,
        passed,
        detail,
        elapsed,
    };
    emit(&o);
    o
}

fn steam(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_steam"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "steam {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn field<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(str::trim)
}

fn data_dir() -> PathBuf {
    std::env::var_os("STEAM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Row {
    loss: f64,
    val: f64,
}

fn read_metrics(path: &Path) -> Result<Vec<Row>, String> {
    let text = fs::read_to_string(path).map_err(s)?;
    text.lines()
        .skip(2)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| {
                f.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or(format!("bad row {l:?}"))
            };
            Ok(Row {
                loss: num(2)?,
                val: num(4)?,
            })
        })
        .collect()
}

fn accounting() -> Verdict {
    let mut got = Vec::new();
    let mut ok = true;
    for (blocks, want) in [
        ("2,2,2,2", 256),
        ("3,4,6,3", 320),
        ("3,4,23,3", 576),
        ("4,8,4", 256),
    ] {
        let out = steam(&["account", "--blocks", blocks, "--d", "8"])?;
        let n: usize = field(&out, "added params:")
            .and_then(|v| v.parse().ok())
            .ok_or("no added params line")?;
        ok &= n == want;
        got.push(format!("[{blocks}] {n}"));
    }
    let plan = steam(&["plan", "--blocks", "4,8,4"])?;
    let shuffle_ok = plan.starts_with("units: [1,2,1]");
    Ok((
        ok && shuffle_ok,
        format!("{}; shufflenet plan [1,2,1]: {shuffle_ok}", got.join(", ")),
    ))
}

fn placement() -> Verdict {
    let cases = [
        (
            "2,2,2,2",
            "units: [1,1,1,1]",
            &[
                "stage-1 insertions after blocks 2",
                "stage-4 insertions after blocks 2",
            ][..],
        ),
        (
            "3,4,6,3",
            "units: [1,1,2,1]",
            &[
                "stage-3 insertions after blocks 3,6",
                "stage-1 insertions after blocks 3",
            ][..],
        ),
        (
            "3,4,23,3",
            "units: [1,1,6,1]",
            &["stage-3 insertions after blocks"][..],
        ),
    ];
    let mut ok = true;
    let mut seen = Vec::new();
    for (blocks, units, parts) in cases {
        let out = steam(&["plan", "--blocks", blocks])?;
        ok &= out.starts_with(units) && parts.iter().all(|p| out.contains(p));
        seen.push(units.trim_start_matches("units: ").to_string());
    }
    Ok((ok, seen.join(" ")))
}

fn flops() -> Verdict {
    let spec = StageSpec::resnet50();
    let plan = plan_for_blocks(&spec.blocks);
    let cfg = SteamConfig::default();
    let a = count_flops(&plan, &spec, &cfg).map_err(s)?;
    let m = measure_flops(&plan, &spec, &cfg).map_err(s)?;
    let g = a.profiler() as f64 / 1e9;
    let ratio = g / PAPER_R50_GFLOPS;
    let within = (0.5..=2.0).contains(&ratio);
    Ok((
        within && a == m,
        format!(
            "profiler convention {g:.3e} GFLOPs ({ratio:.2}x paper), full convention {:.3e} ({:.2}x); \
             analytic == instrumented: {}",
            a.total() as f64 / 1e9,
            a.total() as f64 / 1e9 / PAPER_R50_GFLOPS,
            a == m
        ),
    ))
}

/// Channel cycles for even `i`, masked grids for odd `i`; heads cycle
/// through 1, 2, 4, 8.
fn attention_case(
    rng: &mut Xoshiro256,
    i: usize,
) -> Result<
    (
        steam_core::Graph,
        EdgeDropMask,
        GraphAttentionParams<f64>,
        Tensor<f64>,
    ),
    String,
> {
    let heads = [1, 2, 4, 8][i % 4];
    let d = heads * (1 + i % 3);
    let (g, mask) = if i.is_multiple_of(2) {
        let c = 3 + (i / 2) * 61 / 31;
        let hops = if c >= 5 && i.is_multiple_of(6) { 2 } else { 1 };
        let g = build_cyclic_channel_graph(c, hops).map_err(s)?;
        let n = g.num_nodes();
        (g, EdgeDropMask::inactive(n))
    } else {
        let m = 2 + (i / 2) % 8;
        let g = build_grid_spatial_graph(m).map_err(s)?;
        let mask = sample_edge_drop(&g, m, rng).map_err(s)?;
        (g, mask)
    };
    let p = GraphAttentionParams::init(d, heads, rng).map_err(s)?;
    let x = Tensor::from_fn(&[g.num_nodes(), 1], |_| rng.random_range(-2.0..2.0)).map_err(s)?;
    Ok((g, mask, p, x))
}

fn oracle() -> Verdict {
    let mut rng = Xoshiro256::seed_from_u64(404);
    let mut worst = 0.0f64;
    let n = 64;
    for i in 0..n {
        let (g, mask, p, x) = attention_case(&mut rng, i)?;
        let sp = graph_attention(&x, &g, &mask, &p).map_err(s)?;
        let de = dense_attention_oracle(&x, &g, &mask, &p).map_err(s)?;
        worst = worst
            .max(sp.updated.max_abs_diff(&de.updated).map_err(s)?)
            .max(sp.attn.max_abs_diff(&de.attn).map_err(s)?);
    }
    Ok((
        worst <= 1e-10,
        format!("{n} instances (C 3..64, m 2..9, H 1/2/4/8), max |diff| {worst:.2e}"),
    ))
}

fn gradients() -> Verdict {
    let mut ok = true;
    let mut worst = Vec::new();
    let seeds = 20;
    for seed in 0..seeds {
        let report = run_suite(&SuiteOptions { seed, instances: 4 });
        for c in report
            .checks
            .iter()
            .filter(|c| c.name.starts_with("gradcheck"))
        {
            if !c.passed {
                ok = false;
                worst.push(format!("seed {seed} {}: {}", c.name, c.detail));
            }
        }
    }
    let detail = if ok {
        format!("primitives, graph attention and steam_forward (ca-sa, sa-ca, ca+sa) over {seeds} seeds, all < 1e-4")
    } else {
        worst.join("; ")
    };
    Ok((ok, detail))
}

fn invariants() -> Verdict {
    let mut bad = Vec::new();
    let mut rng = Xoshiro256::seed_from_u64(606);
    let mut row_err = 0.0f64;
    for i in 0..64 {
        let (g, mask, p, x) = attention_case(&mut rng, i)?;
        let out = graph_attention(&x, &g, &mask, &p).map_err(s)?;
        let n = g.num_nodes();
        for r in out.attn.data().chunks(n) {
            row_err = row_err.max((r.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if row_err > 1e-9 {
        bad.push(format!("row sums off by {row_err:.1e}"));
    }

    let unit = SteamUnit::<f64>::new(SteamConfig::default(), &mut rng).map_err(s)?;
    for c in [8, 16, 64] {
        let x = Tensor::from_fn(&[2, c, 14, 14], |_| rng.random_range(-4.0..4.0)).map_err(s)?;
        let tape = Tape::new();
        let tr = unit
            .forward_vars(tape.constant(x), &unit.bind_constant(&tape), Phase::Eval)
            .map_err(s)?;
        for a in [tr.alpha_c, tr.alpha_init] {
            if !a.value().data().iter().all(|&v| v > 0.0 && v < 1.0) {
                bad.push(format!("score outside (0,1) at C={c}"));
            }
        }
    }

    for m in 2..=16 {
        let g = build_grid_spatial_graph(m).map_err(s)?;
        if g.undirected_edge_count() != 2 * m * (m - 1) {
            bad.push(format!(
                "grid m={m} has {} edges",
                g.undirected_edge_count()
            ));
        }
    }
    for c in 5..=64 {
        for (hops, deg) in [(1, 2), (2, 4)] {
            let g = build_cyclic_channel_graph(c, hops).map_err(s)?;
            if (0..c).any(|i| g.degree(i) != deg) {
                bad.push(format!("cycle C={c} hops={hops}"));
            }
        }
    }

    let cfg = SteamConfig::default();
    let mut added = Vec::new();
    for c in [16, 64, 256] {
        let spec = StageSpec::new(vec![1], vec![c], vec![(7, 7)]).map_err(s)?;
        let with = build_desk_cnn::<f64, _>(&spec, Some(&cfg), 1, 10, &mut rng).map_err(s)?;
        let without = build_desk_cnn::<f64, _>(&spec, None, 1, 10, &mut rng).map_err(s)?;
        added.push(with.param_count() - without.param_count());
    }
    if added.iter().any(|&a| a != 64) {
        bad.push(format!("added params per unit {added:?}"));
    }

    for m in 1..=9 {
        for k in [1, 2, 3, 8] {
            let sm = Tensor::from_fn(&[m, m], |_| rng.random_range(-1.0..1.0)).map_err(s)?;
            let up = upsample_repeat(&sm, m * k, m * k).map_err(s)?;
            let back = ogp(&up.reshape(&[1, m * k, m * k]).map_err(s)?, m).map_err(s)?;
            if back.data() != sm.data() {
                bad.push(format!("OGP round trip m={m} k={k}"));
            }
        }
    }

    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            format!("rows within {row_err:.1e}, scores in (0,1), grid/cycle counts, params {added:?}, OGP exact")
        } else {
            bad.join("; ")
        },
    ))
}

fn determinism(data: &Path, tmp: &Path) -> Verdict {
    if !data.is_dir() {
        return Ok((false, format!("no MNIST at {}", data.display())));
    }
    let run = |name: &str, resume: Option<&Path>| -> Result<PathBuf, String> {
        let out = tmp.join(name);
        let mut args = vec![
            "train".to_string(),
            "--data".into(),
            data.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--epochs".into(),
            "2".into(),
            "--train-subset".into(),
            "1000".into(),
            "--val-subset".into(),
            "200".into(),
            "--seed".into(),
            "11".into(),
        ];
        if let Some(r) = resume {
            args.extend(["--resume".into(), r.display().to_string()]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        steam(&refs)?;
        Ok(out)
    };
    let a = run("det-a", None)?;
    let b = run("det-b", None)?;
    let csv_a = fs::read(a.join("metrics.csv")).map_err(s)?;
    let same = csv_a == fs::read(b.join("metrics.csv")).map_err(s)?;
    let c = run("det-c", Some(&a.join("epoch-001.ckpt")))?;
    let resumed = fs::read(c.join("metrics.csv")).map_err(s)? == csv_a
        && fs::read(c.join("last.ckpt")).map_err(s)? == fs::read(a.join("last.ckpt")).map_err(s)?;
    Ok((
        same && resumed,
        format!("two runs bitwise identical: {same}; resume from epoch 1 matches: {resumed}"),
    ))
}

fn smoke(data: &Path, tmp: &Path) -> Verdict {
    if !data.is_dir() {
        return Ok((false, format!("no MNIST at {}", data.display())));
    }
    let train = |name: &str, extra: &[&str]| -> Result<Vec<Row>, String> {
        let out = tmp.join(name);
        let d = data.display().to_string();
        let o = out.display().to_string();
        let mut args = vec!["train", "--data", &d, "--out", &o];
        args.extend(extra);
        steam(&args)?;
        read_metrics(&out.join("metrics.csv"))
    };
    let start = Instant::now();
    let rows = train("smoke", &[])?;
    let took = start.elapsed();
    let (first, last) = (
        rows.first().ok_or("empty metrics")?,
        rows.last().ok_or("empty metrics")?,
    );
    let ok = rows.len() <= 10
        && last.val >= 0.95
        && last.loss.is_finite()
        && last.loss <= first.loss
        && took < Duration::from_secs(900);
    let base = train("smoke-baseline", &["--no-steam"])?;
    let base_val = base.last().map_or(f64::NAN, |r| r.val);
    Ok((
        ok,
        format!(
            "{} epochs in {:.0}s, val top-1 {:.1}%, loss {:.4} -> {:.4}; without STEAM {:.1}% (not binding)",
            rows.len(),
            took.as_secs_f64(),
            100.0 * last.val,
            first.loss,
            last.loss,
            100.0 * base_val
        ),
    ))
}

fn edge_drop() -> Verdict {
    let cfg = SteamConfig::default();
    let mut rng = Xoshiro256::seed_from_u64(909);
    let unit = SteamUnit::<f64>::new(cfg, &mut rng).map_err(s)?;
    let g = unit.spatial_graph().clone();
    let mut valid = true;
    for seed in 0..200 {
        let mask = unit
            .sample_mask(Phase::Train(&mut Xoshiro256::seed_from_u64(seed)))
            .map_err(s)?;
        valid &= mask.count() == 25 && mask.entries().all(|(i, j)| g.neighbors(i).contains(&j));
    }
    let x = Tensor::from_fn(&[2, 8, 14, 14], |_| rng.random_range(-1.0..1.0)).map_err(s)?;
    let e1 = unit.forward(&x, Phase::Eval).map_err(s)?;
    let e2 = unit.forward(&x, Phase::Eval).map_err(s)?;
    let train: Vec<Tensor<f64>> = (1..=4)
        .map(|seed| unit.forward(&x, Phase::Train(&mut Xoshiro256::seed_from_u64(seed))))
        .collect::<Result<_, _>>()
        .map_err(s)?;
    let differ = (0..train.len()).all(|i| (i + 1..train.len()).all(|j| train[i] != train[j]));
    Ok((
        valid && e1 == e2 && differ,
        format!(
            "200 masks with 25 valid entries: {valid}; eval identical: {}; train seeds differ: {differ}",
            e1 == e2
        ),
    ))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let data = data_dir();
    let secs = Duration::from_secs;
    let outcomes = [
        criterion(1, "parameter accounting", secs(1), accounting),
        criterion(2, "placement", secs(1), placement),
        criterion(3, "flop sanity", secs(10), flops),
        criterion(4, "oracle equivalence", secs(60), oracle),
        criterion(5, "gradient correctness", secs(300), gradients),
        criterion(6, "structural invariants", secs(30), invariants),
        criterion(7, "determinism", secs(300), || {
            determinism(&data, tmp.path())
        }),
        // the budget covers the STEAM run plus the reported baseline
        criterion(8, "smoke training", secs(1800), || smoke(&data, tmp.path())),
        criterion(9, "edge drop", secs(10), edge_drop),
    ];
    let failed: Vec<usize> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.id)
        .collect();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{} criteria, {} failed {failed:?}",
        outcomes.len(),
        failed.len()
    );
    drop(out);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
