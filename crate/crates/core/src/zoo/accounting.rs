use std::fmt::Write as _;

use super::{plan_placement, PlacementPlan, StageSpec};
use crate::attention::attention_flops;
use crate::autodiff::{FlopCount, Tape};
use crate::error::{dim_err, param_err, Result};
use crate::rng::Xoshiro256;
use crate::steam::{Phase, SteamConfig, SteamUnit};
use crate::tensor::Tensor;

/// Counting rules shared by the analytic model and the tape.
pub const FLOP_CONVENTIONS: &str = "1 MAC = 2 FLOPs; add/sub/mul 1 per output element; \
     mean/max pooling 1 per input element; softmax 5, sigmoid/tanh 4, relu 1 per element; \
     reshape/broadcast/upsample 0; inference mode (no edge drop)";

/// The layer-profiler reading of the same count: only multiply-accumulates
/// and pooling reductions.
pub const PROFILER_CONVENTIONS: &str = "1 MAC = 2 FLOPs; mean/max pooling 1 per input element; \
     elementwise arithmetic, activations and softmax 0";

/// Trainable parameters added by `plan`: `8d` per unit.
pub fn count_params(plan: &PlacementPlan, d: usize) -> usize {
    plan.total_units() * 8 * d
}

/// FLOPs of one unit on a `c x h x w` map in inference mode.
///
/// Every arrangement performs the same operations: channel pooling,
/// channel attention and sigmoid, the activation feeding OGP, OGP itself,
/// spatial attention and sigmoid, two broadcast products and the residual
/// sum.
pub fn unit_flops(cfg: &SteamConfig, c: usize, h: usize, w: usize) -> Result<FlopCount> {
    cfg.validate()?;
    let m = cfg.m;
    if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return dim_err(format!(
            "spatial size {h}x{w} (H={h}, W={w}) is not divisible by m={m}"
        ));
    }
    let loops = usize::from(cfg.include_self_loops);
    let (chw, hw, c64) = ((c * h * w) as u64, (h * w) as u64, c as u64);
    let edges_c = c * (2 * cfg.channel_hops + loops);
    let edges_s = 4 * m * (m - 1) + loops * m * m;
    let dk = cfg.key_dim();
    let pw = FlopCount::pointwise;
    let channel =
        cfg.channel_pool.flops(chw, c64) + attention_flops(c, edges_c, cfg.heads, dk) + pw(4 * c64);
    let spatial = pw(cfg.inter_activation.flops_per_element() * chw)
        + cfg.spatial_pool.flops(chw, hw)
        + FlopCount::reduce(hw)
        + attention_flops(m * m, edges_s, cfg.heads, dk)
        + pw(4 * (m * m) as u64);
    Ok(channel + spatial + pw(3 * chw))
}

/// Analytic FLOPs added by the units of `plan` placed in `spec`.
pub fn count_flops(plan: &PlacementPlan, spec: &StageSpec, cfg: &SteamConfig) -> Result<FlopCount> {
    let mut total = FlopCount::ZERO;
    for (s, &u) in plan.units_per_stage.iter().enumerate() {
        if u == 0 {
            continue;
        }
        let (h, w) = spec.spatial[s];
        total += unit_flops(cfg, spec.channels[s], h, w)? * u as u64;
    }
    Ok(total)
}

/// FLOPs counted by the tape while running every unit of `plan` once on a
/// generic input of each stage's size.
pub fn measure_flops(
    plan: &PlacementPlan,
    spec: &StageSpec,
    cfg: &SteamConfig,
) -> Result<FlopCount> {
    let mut rng = Xoshiro256::seed_from_u64(0x57EA);
    let mut total = FlopCount::ZERO;
    for (s, &u) in plan.units_per_stage.iter().enumerate() {
        let (c, (h, w)) = (spec.channels[s], spec.spatial[s]);
        for _ in 0..u {
            let unit = SteamUnit::<f64>::new(cfg.clone(), &mut rng)?;
            let x = Tensor::from_fn(&[c, h, w], |i| ((i % 97) as f64 * 0.013).sin())?;
            let tape = Tape::new();
            let xv = tape.constant(x);
            let vars = unit.bind_constant(&tape);
            let before = tape.flop_count();
            unit.forward_vars(xv, &vars, Phase::Eval)?;
            total += tape.flop_count() - before;
        }
    }
    Ok(total)
}

/// One row of the parameter comparison against other attention modules.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub module: &'static str,
    pub formula: &'static str,
    pub params: f64,
}

/// Nearest odd kernel size `|(log2 C + 1) / 2|_odd`.
fn eca_kernel(c: usize) -> usize {
    let t = (((c as f64).log2() + 1.0) / 2.0).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Closed-form parameter counts of related modules for `spec`, with the
/// STEAM row from the adaptive placement. `r` is the SE/CBAM reduction
/// ratio and `k` the CBAM spatial kernel size.
pub fn reference_param_table(
    spec: &StageSpec,
    d: usize,
    r: Option<f64>,
    k: Option<usize>,
) -> Result<Vec<ReferenceRow>> {
    spec.validate()?;
    let Some(r) = r else {
        return param_err("reduction ratio r is required for the SE and CBAM rows");
    };
    let Some(k) = k else {
        return param_err("kernel size k is required for the CBAM row");
    };
    if !(r > 0.0) {
        return param_err(format!("reduction ratio must be positive, got {r}"));
    }
    let stages = || {
        spec.blocks
            .iter()
            .zip(&spec.channels)
            .map(|(&n, &c)| (n as f64, c))
    };
    let se: f64 = 2.0 / r * stages().map(|(n, c)| n * (c * c) as f64).sum::<f64>();
    let gct: f64 = stages().map(|(n, _)| n).sum();
    let eca: f64 = stages().map(|(n, c)| n * eca_kernel(c) as f64).sum();
    let cbam: f64 = stages()
        .map(|(n, c)| n * ((c * c) as f64 * 2.0 / r + (k * k) as f64))
        .sum();
    let mca: f64 = stages().map(|(n, c)| n * c as f64 * 2.0).sum();
    let steam = count_params(&plan_placement(spec), d) as f64;
    Ok(vec![
        ReferenceRow {
            module: "SE",
            formula: "2/r * sum N_s C_s^2",
            params: se,
        },
        ReferenceRow {
            module: "GCT",
            formula: "sum N_s",
            params: gct,
        },
        ReferenceRow {
            module: "ECA",
            formula: "sum N_s |(log2 C_s + 1)/2|_odd",
            params: eca,
        },
        ReferenceRow {
            module: "CBAM",
            formula: "sum N_s (2 C_s^2 / r + k^2)",
            params: cbam,
        },
        ReferenceRow {
            module: "MCA",
            formula: "sum N_s 2 C_s",
            params: mca,
        },
        ReferenceRow {
            module: "STEAM",
            formula: "sum 8d ceil(N_s / 4) (independent of C)",
            params: steam,
        },
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageAccount {
    pub stage: usize,
    pub blocks: usize,
    pub units: usize,
    pub channels: usize,
    pub spatial: (usize, usize),
    pub params: usize,
    pub flops: FlopCount,
}

/// Added parameters and FLOPs of a placement, with a per-stage breakdown.
#[derive(Debug, Clone)]
pub struct AccountingReport {
    pub spec: StageSpec,
    pub cfg: SteamConfig,
    pub plan: PlacementPlan,
    pub added_params: usize,
    pub added_flops: FlopCount,
    pub stages: Vec<StageAccount>,
    /// Tape-instrumented count, when requested.
    pub measured_flops: Option<FlopCount>,
    pub reference: Vec<ReferenceRow>,
}

impl AccountingReport {
    pub fn build(spec: &StageSpec, cfg: &SteamConfig) -> Result<Self> {
        spec.validate()?;
        let plan = plan_placement(spec);
        let mut stages = Vec::with_capacity(spec.num_stages());
        for s in 0..spec.num_stages() {
            let units = plan.units_per_stage[s];
            let (h, w) = spec.spatial[s];
            let flops = if units == 0 {
                FlopCount::ZERO
            } else {
                unit_flops(cfg, spec.channels[s], h, w)? * units as u64
            };
            stages.push(StageAccount {
                stage: s + 1,
                blocks: spec.blocks[s],
                units,
                channels: spec.channels[s],
                spatial: (h, w),
                params: units * 8 * cfg.d,
                flops,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            cfg: cfg.clone(),
            added_params: count_params(&plan, cfg.d),
            added_flops: stages.iter().fold(FlopCount::ZERO, |a, s| a + s.flops),
            plan,
            stages,
            measured_flops: None,
            reference: Vec::new(),
        })
    }

    pub fn with_measurement(mut self) -> Result<Self> {
        self.measured_flops = Some(measure_flops(&self.plan, &self.spec, &self.cfg)?);
        Ok(self)
    }

    pub fn with_reference(mut self, r: Option<f64>, k: Option<usize>) -> Result<Self> {
        self.reference = reference_param_table(&self.spec, self.cfg.d, r, k)?;
        Ok(self)
    }

    /// Added GFLOPs with every operation counted.
    pub fn added_gflops(&self) -> f64 {
        self.added_flops.total() as f64 / 1e9
    }

    /// Added GFLOPs under the profiler convention.
    pub fn profiler_gflops(&self) -> f64 {
        self.added_flops.profiler() as f64 / 1e9
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# conventions: {FLOP_CONVENTIONS}");
        let _ = writeln!(out, "# profiler conventions: {PROFILER_CONVENTIONS}");
        let _ = writeln!(
            out,
            "config: d={} heads={} m={} arrangement={} hops={}",
            self.cfg.d, self.cfg.heads, self.cfg.m, self.cfg.arrangement, self.cfg.channel_hops
        );
        let _ = writeln!(out, "{}", self.plan);
        let _ = writeln!(
            out,
            "{:>5}  {:>6}  {:>5}  {:>8}  {:>9}  {:>6}  {:>12}  {:>12}",
            "stage", "blocks", "units", "channels", "spatial", "params", "flops", "profiler"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:>5}  {:>6}  {:>5}  {:>8}  {:>9}  {:>6}  {:>12}  {:>12}",
                s.stage,
                s.blocks,
                s.units,
                s.channels,
                format!("{}x{}", s.spatial.0, s.spatial.1),
                s.params,
                s.flops.total(),
                s.flops.profiler()
            );
        }
        let _ = writeln!(out, "added params: {}", self.added_params);
        let _ = writeln!(
            out,
            "added flops: {} ({:.4e} GFLOPs, {:.4e} GMACs)",
            self.added_flops.total(),
            self.added_gflops(),
            self.added_gflops() / 2.0
        );
        let _ = writeln!(
            out,
            "added flops, profiler convention: {} ({:.4e} GFLOPs)",
            self.added_flops.profiler(),
            self.profiler_gflops()
        );
        if let Some(m) = self.measured_flops {
            let verdict = if m == self.added_flops {
                "match"
            } else {
                "MISMATCH"
            };
            let _ = writeln!(
                out,
                "instrumented flops: {} / profiler {} ({verdict})",
                m.total(),
                m.profiler()
            );
        }
        if !self.reference.is_empty() {
            let _ = writeln!(out, "reference parameter counts:");
            for r in &self.reference {
                let _ = writeln!(
                    out,
                    "  {:<6} {:<42} {:>14.1}",
                    r.module, r.formula, r.params
                );
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,name,blocks,units,channels,height,width,params,flops,profiler_flops\n",
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "stage,{},{},{},{},{},{},{},{},{}",
                s.stage,
                s.blocks,
                s.units,
                s.channels,
                s.spatial.0,
                s.spatial.1,
                s.params,
                s.flops.total(),
                s.flops.profiler()
            );
        }
        let _ = writeln!(
            out,
            "total,steam,{},{},,,,{},{},{}",
            self.spec.blocks.iter().sum::<usize>(),
            self.plan.total_units(),
            self.added_params,
            self.added_flops.total(),
            self.added_flops.profiler()
        );
        if let Some(m) = self.measured_flops {
            let _ = writeln!(out, "measured,steam,,,,,,,{},{}", m.total(), m.profiler());
        }
        for r in &self.reference {
            let _ = writeln!(out, "reference,{},,,,,,{},,", r.module, r.params);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::plan_for_blocks;

    #[test]
    fn parameter_totals() {
        for (blocks, want) in [
            (vec![2, 2, 2, 2], 256),
            (vec![3, 4, 6, 3], 320),
            (vec![3, 4, 23, 3], 576),
            (vec![4, 8, 4], 256),
        ] {
            assert_eq!(count_params(&plan_for_blocks(&blocks), 8), want);
        }
    }

    #[test]
    fn zero_units_zero_flops() {
        let spec = StageSpec::resnet50();
        let plan = PlacementPlan::empty(4);
        assert_eq!(
            count_flops(&plan, &spec, &SteamConfig::default()).unwrap(),
            FlopCount::ZERO
        );
    }

    #[test]
    fn flops_grow_with_resolution() {
        let cfg = SteamConfig::default();
        let spec = StageSpec::resnet18();
        let mut big = spec.clone();
        big.spatial.iter_mut().for_each(|s| *s = (s.0 * 2, s.1 * 2));
        let plan = plan_placement(&spec);
        assert!(
            count_flops(&plan, &big, &cfg).unwrap().total()
                > count_flops(&plan, &spec, &cfg).unwrap().total()
        );
    }

    #[test]
    fn analytic_matches_tape_on_small_spec() {
        for hops in [1, 2] {
            let cfg = SteamConfig {
                channel_hops: hops,
                ..SteamConfig::default()
            };
            let spec = StageSpec::desk();
            let plan = plan_placement(&spec);
            assert_eq!(
                count_flops(&plan, &spec, &cfg).unwrap(),
                measure_flops(&plan, &spec, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn gct_and_se_limits() {
        let spec = StageSpec::resnet18();
        let rows = reference_param_table(&spec, 8, Some(1e300), Some(7)).unwrap();
        let get = |m: &str| rows.iter().find(|r| r.module == m).unwrap().params;
        assert_eq!(get("GCT"), 8.0);
        assert!(get("SE") < 1e-290);
        assert!(reference_param_table(&spec, 8, None, Some(7)).is_err());
        assert!(reference_param_table(&spec, 8, Some(16.0), None).is_err());
        let r50 = reference_param_table(&StageSpec::resnet50(), 8, Some(16.0), Some(7)).unwrap();
        assert_eq!(r50.last().unwrap().params, 320.0);
    }

    #[test]
    fn eca_kernel_sizes() {
        // t = int((log2 C + 1) / 2), bumped to the next odd number
        assert_eq!(eca_kernel(64), 3);
        assert_eq!(eca_kernel(256), 5);
        assert_eq!(eca_kernel(512), 5);
        assert_eq!(eca_kernel(2048), 7);
    }

    #[test]
    fn report_mentions_totals() {
        let rep = AccountingReport::build(&StageSpec::resnet50(), &SteamConfig::default())
            .unwrap()
            .with_reference(Some(16.0), Some(7))
            .unwrap();
        let text = rep.to_text();
        assert!(text.contains("added params: 320"));
        assert!(text.contains("conventions"));
        assert!(rep
            .to_csv()
            .lines()
            .any(|l| l.starts_with("total,steam,16,5,,,,320,")));
    }
}
