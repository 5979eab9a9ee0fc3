use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use steam_core::config::{hex, ExperimentConfig};
use steam_core::data::{load_dir, subsample, Dataset};
use steam_core::train::{
    evaluate, load_checkpoint, metrics_csv, save_checkpoint, train_epochs, EpochMetrics, Trainer,
    METRICS_HEADER,
};
use steam_core::verify::{run_suite, SuiteOptions};
use steam_core::zoo::{plan_for_blocks, AccountingReport, StageSpec};
use steam_core::{Arrangement, Pool, SteamConfig, Xoshiro256};

#[derive(Parser)]
#[command(
    name = "steam",
    version,
    about = "Graph-attention recalibration units: training, accounting and verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the desk CNN; writes metrics.csv, checkpoints and the effective config.
    Train(TrainArgs),
    /// Top-1 / top-5 accuracy of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print the adaptive placement for per-stage block counts.
    Plan(PlanArgs),
    /// Added parameters and FLOPs for a backbone, with reference rows.
    Account(AccountArgs),
    /// Run the oracle, gradient and invariant suite.
    Verify(VerifyArgs),
    /// Train variants along one design axis and compare them.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct RecipeArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with MNIST IDX or CIFAR-10 binary files.
    #[arg(long, env = "STEAM_DATA_DIR")]
    data: PathBuf,
    /// Epoch budget; learning-rate milestones scale with it.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization, shuffling and edge drop.
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stratified training subset size (0 keeps all).
    #[arg(long)]
    train_subset: Option<usize>,
    /// Held-out subset size drawn from the test split (0 keeps all).
    #[arg(long)]
    val_subset: Option<usize>,
    /// Train without STEAM units.
    #[arg(long)]
    no_steam: bool,
    /// ca-sa, sa-ca or ca+sa.
    #[arg(long)]
    arrangement: Option<Arrangement>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "STEAM_DATA_DIR")]
    data: PathBuf,
    /// Evaluate on at most this many stratified test samples.
    #[arg(long)]
    subset: Option<usize>,
}

fn parse_hw(t: &str) -> Result<(usize, usize), String> {
    let t = t.trim();
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match t.split_once('x') {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(t).map(|v| (v, v)),
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Blocks per stage, e.g. 3,4,6,3.
    #[arg(long, value_delimiter = ',', required = true)]
    blocks: Vec<usize>,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    blocks: Vec<usize>,
    /// Channels per stage; defaults to the matching preset.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Map size per stage as HxW or H, e.g. 56,28,14,7.
    #[arg(long, value_delimiter = ',', value_parser = parse_hw)]
    spatial: Option<Vec<(usize, usize)>>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 7)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    hops: usize,
    #[arg(long, default_value = "ca-sa")]
    arrangement: Arrangement,
    /// SE / GCT-style reduction ratio for the reference rows.
    #[arg(long)]
    r: Option<f64>,
    /// CBAM spatial kernel size for the reference rows.
    #[arg(long)]
    k: Option<usize>,
    /// Also count FLOPs by running each unit on the tape.
    #[arg(long)]
    measure: bool,
    /// Print CSV instead of the text table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Instances per randomized check.
    #[arg(long, default_value_t = 50)]
    instances: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Arrangement,
    Degree,
    Heads,
    Pool,
    Edgedrop,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Also train a baseline without STEAM.
    #[arg(long)]
    baseline: bool,
}

fn effective_config(r: &RecipeArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &r.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = r.epochs {
        t.epochs = v;
    }
    if let Some(v) = r.seed {
        t.seed = v;
    }
    if let Some(v) = r.lr {
        t.lr = v;
    }
    if let Some(v) = r.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = r.train_subset {
        t.train_subset = (v > 0).then_some(v);
    }
    if let Some(v) = r.val_subset {
        t.val_subset = (v > 0).then_some(v);
    }
    if r.no_steam {
        cfg.model.use_steam = false;
    }
    if let Some(a) = r.arrangement {
        cfg.steam.arrangement = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training and held-out sets per the config; subsets come from a
/// generator seeded independently of model initialization.
fn load_splits(dir: &Path, cfg: &ExperimentConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let s = load_dir::<f64>(dir).with_context(|| format!("loading data from {}", dir.display()))?;
    let [c, h, w] = s.train.image_shape();
    let m = &cfg.model;
    if c != m.in_channels || (h, w) != m.spatial[0] || s.train.class_count != m.num_classes {
        bail!(
            "data is {c}x{h}x{w} with {} classes but the model expects {}x{}x{} with {}",
            s.train.class_count,
            m.in_channels,
            m.spatial[0].0,
            m.spatial[0].1,
            m.num_classes
        );
    }
    let mut rng = Xoshiro256::seed_from_u64(cfg.train.seed ^ 0x5eed_da7a);
    let train = match cfg.train.train_subset {
        Some(n) => subsample(&s.train, n, &mut rng)?,
        None => s.train,
    };
    let val = match cfg.train.val_subset {
        Some(n) => subsample(&s.test, n, &mut rng)?,
        None => s.test,
    };
    Ok((train, val))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = effective_config(&a.recipe)?;
    println!("# effective config\n{}", cfg.to_toml());
    println!("# model digest {}", hex(&cfg.model_digest()));
    let (train, val) = load_splits(&a.recipe.data, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;

    let (mut trainer, mut history) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p, Some(&cfg))?;
            let t = ck.restore::<f64>(&cfg)?;
            println!("resumed from {} at epoch {}", p.display(), t.epoch);
            // a fresh output dir inherits the rows logged beside the checkpoint
            let mut csv = a.out.join("metrics.csv");
            if !csv.exists() {
                csv = p.with_file_name("metrics.csv");
            }
            (t, read_history(&csv, ck.epoch as usize)?)
        }
        None => (Trainer::<f64>::new(&cfg)?, Vec::new()),
    };
    println!(
        "model: {} params ({} in STEAM units, plan {}); train {} / val {}",
        trainer.model.param_count(),
        trainer.model.steam_param_count(),
        trainer.model.plan(),
        train.len(),
        val.len()
    );
    let remaining = cfg.train.epochs.saturating_sub(trainer.epoch);
    let csv_path = a.out.join("metrics.csv");
    let out = a.out.clone();
    let start = Instant::now();
    train_epochs(&mut trainer, &train, &val, remaining, |t, m| {
        history.push(*m);
        println!("{}  ({:.1}s)", m.log_line(), start.elapsed().as_secs_f64());
        fs::write(&csv_path, metrics_csv(&history))?;
        save_checkpoint(t, &out.join(format!("epoch-{:03}.ckpt", m.epoch)))?;
        save_checkpoint(t, &out.join("last.ckpt"))?;
        Ok(())
    })?;
    fs::write(&csv_path, metrics_csv(&history))?;
    let ev = evaluate(&trainer.model, &val, 256)?;
    println!(
        "final: val top-1 {:.2}%, top-5 {:.2}% over {} samples",
        100.0 * ev.top1,
        100.0 * ev.top5,
        ev.samples
    );
    Ok(())
}

/// Rows of an existing metrics file up to `epochs`, for resumed runs.
fn read_history(path: &Path, epochs: usize) -> Result<Vec<EpochMetrics>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let header_lines = METRICS_HEADER.lines().count();
    let mut out = Vec::new();
    for line in text.lines().skip(header_lines) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            bail!("malformed metrics row {line:?} in {}", path.display());
        }
        let m = EpochMetrics {
            epoch: f[0].parse()?,
            lr: f[1].parse()?,
            train_loss: f[2].parse()?,
            train_acc: f[3].parse()?,
            val_acc: f[4].parse()?,
            steps: 0,
        };
        if m.epoch <= epochs {
            out.push(m);
        }
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let cfg = ck.config()?;
    let t = ck.restore::<f64>(&cfg)?;
    let s = load_dir::<f64>(&a.data)
        .with_context(|| format!("loading data from {}", a.data.display()))?;
    let test = match a.subset {
        Some(n) => subsample(
            &s.test,
            n.min(s.test.len()),
            &mut Xoshiro256::seed_from_u64(0),
        )?,
        None => s.test,
    };
    let ev = evaluate(&t.model, &test, 256)?;
    println!(
        "checkpoint: {} (epoch {})",
        a.checkpoint.display(),
        ck.epoch
    );
    println!("samples: {}", ev.samples);
    println!("top-1: {:.4}", ev.top1);
    println!("top-5: {:.4}", ev.top5);
    println!("loss: {:.6}", ev.loss);
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    if a.blocks.is_empty() || a.blocks.contains(&0) {
        bail!("--blocks needs positive per-stage counts");
    }
    let plan = plan_for_blocks(&a.blocks);
    println!("{plan}");
    println!("total units: {}", plan.total_units());
    Ok(())
}

fn cmd_account(a: AccountArgs) -> Result<()> {
    let preset = StageSpec::preset_for_blocks(&a.blocks);
    let channels = match (a.channels, &preset) {
        (Some(c), _) => c,
        (None, Some(p)) => p.channels.clone(),
        (None, None) => bail!(
            "no preset has blocks {:?}; pass --channels and --spatial",
            a.blocks
        ),
    };
    let spatial = match (a.spatial, &preset) {
        (Some(s), _) => s,
        (None, Some(p)) => p.spatial.clone(),
        (None, None) => bail!("no preset has blocks {:?}; pass --spatial", a.blocks),
    };
    let spec = StageSpec::new(a.blocks, channels, spatial)?;
    let cfg = SteamConfig {
        d: a.d,
        heads: a.heads,
        m: a.m,
        channel_hops: a.hops,
        arrangement: a.arrangement,
        ..SteamConfig::default()
    };
    cfg.validate()?;
    let mut report = AccountingReport::build(&spec, &cfg)?;
    if a.measure {
        report = report.with_measurement()?;
    }
    if a.r.is_some() || a.k.is_some() {
        report = report.with_reference(a.r, a.k)?;
    }
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let report = run_suite(&SuiteOptions {
        seed: a.seed,
        instances: a.instances,
    });
    print!("{}", report.to_text());
    if !report.all_passed() {
        bail!("{} verification checks failed", report.failures());
    }
    Ok(())
}

fn variants(axis: Axis, base: &SteamConfig) -> Vec<(String, SteamConfig)> {
    let with = |f: &dyn Fn(&mut SteamConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Arrangement => Arrangement::ALL
            .iter()
            .map(|&a| (a.to_string(), with(&|c| c.arrangement = a)))
            .collect(),
        Axis::Degree => [1, 2]
            .iter()
            .map(|&h| (format!("degree {}", 2 * h), with(&|c| c.channel_hops = h)))
            .collect(),
        Axis::Heads => [1, 2, 4, 8]
            .iter()
            .map(|&h| (format!("heads {h}"), with(&|c| c.heads = h)))
            .collect(),
        Axis::Pool => Pool::ALL
            .iter()
            .map(|&p| {
                (
                    format!("pool {p}"),
                    with(&|c| {
                        c.channel_pool = p;
                        c.spatial_pool = p;
                    }),
                )
            })
            .collect(),
        Axis::Edgedrop => [true, false]
            .iter()
            .map(|&e| {
                (
                    format!("edge drop {}", if e { "on" } else { "off" }),
                    with(&|c| c.edge_drop = e),
                )
            })
            .collect(),
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = effective_config(&a.recipe)?;
    println!("# effective config\n{}", base.to_toml());
    let (train, val) = load_splits(&a.recipe.data, &base)?;
    let mut runs: Vec<(String, ExperimentConfig)> = Vec::new();
    if a.baseline {
        let mut c = base.clone();
        c.model.use_steam = false;
        runs.push(("no STEAM".into(), c));
    }
    for (name, steam) in variants(a.axis, &base.steam) {
        let mut c = base.clone();
        c.model.use_steam = true;
        c.steam = steam;
        runs.push((name, c));
    }
    let mut rows = Vec::new();
    for (name, cfg) in runs {
        cfg.validate()?;
        let mut t = Trainer::<f64>::new(&cfg)?;
        let start = Instant::now();
        let hist = train_epochs(&mut t, &train, &val, cfg.train.epochs, |_, m| {
            println!("[{name}] {}", m.log_line());
            Ok(())
        })?;
        let ev = evaluate(&t.model, &val, 256)?;
        let loss = hist.last().map_or(f64::NAN, |m| m.train_loss);
        rows.push((
            name,
            t.model.param_count(),
            t.model.steam_param_count(),
            loss,
            ev,
            start.elapsed(),
        ));
    }
    println!(
        "\n{:<18} {:>8} {:>7} {:>11} {:>8} {:>8} {:>8}",
        "variant", "params", "steam", "train loss", "top-1", "top-5", "time"
    );
    for (name, p, sp, loss, ev, dt) in rows {
        println!(
            "{name:<18} {p:>8} {sp:>7} {loss:>11.5} {:>7.2}% {:>7.2}% {:>7.1}s",
            100.0 * ev.top1,
            100.0 * ev.top5,
            dt.as_secs_f64()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Account(a) => cmd_account(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
