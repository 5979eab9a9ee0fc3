use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{plan_placement, PlacementPlan, StageSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::steam::{Phase, SteamConfig, SteamUnit, SteamVars};
use crate::tensor::Tensor;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Convolution weight `[O, C, kh, kw]` and bias `[O]`.
#[derive(Debug, Clone)]
struct Conv<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    /// He-normal weights, zero bias.
    fn new<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: he_normal(&[out, inp, k, k], inp * k * k, rng)?,
            b: Tensor::zeros(&[out])?,
        })
    }

    /// All-zero weights, so a residual branch starts as the identity.
    fn zeroed(out: usize, inp: usize, k: usize) -> Result<Self> {
        Ok(Self {
            w: Tensor::zeros(&[out, inp, k, k])?,
            b: Tensor::zeros(&[out])?,
        })
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

fn conv_bias<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    let c = b.len();
    x.conv2d(w, stride, pad)?.add(b.reshape(&[1, c, 1, 1])?)
}

#[derive(Debug, Clone)]
struct BasicBlock<T: Scalar> {
    conv1: Conv<T>,
    conv2: Conv<T>,
    steam: Option<SteamUnit<T>>,
}

/// Residual CNN: 3x3 stem, stages of basic blocks
/// `relu(x + [steam](conv(relu(conv(x)))))`, 2x2 stride-2 convolutions
/// between stages, global average pooling and a linear classifier. The
/// second convolution of every block starts at zero.
#[derive(Debug, Clone)]
pub struct DeskCnn<T: Scalar> {
    spec: StageSpec,
    in_channels: usize,
    num_classes: usize,
    plan: PlacementPlan,
    steam_cfg: Option<SteamConfig>,
    stem: Conv<T>,
    downs: Vec<Conv<T>>,
    blocks: Vec<Vec<BasicBlock<T>>>,
    fc_w: Tensor<T>,
    fc_b: Tensor<T>,
}

/// Logits and the parameter leaves they were computed from.
pub struct ModelOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub params: Vec<Var<'t, T>>,
}

/// Builds the desk-scale network for `in_channels x H x W` inputs with
/// `(H, W) == spec.spatial[0]`; each later stage halves the map. With a
/// STEAM config, units follow the blocks chosen by the adaptive placement.
pub fn build_desk_cnn<T: Scalar, R: Rng + ?Sized>(
    spec: &StageSpec,
    steam: Option<&SteamConfig>,
    in_channels: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<DeskCnn<T>> {
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    if in_channels == 0 || num_classes < 2 {
        return config_err("need at least one input channel and two classes");
    }
    for s in 1..spec.num_stages() {
        let (ph, pw) = spec.spatial[s - 1];
        if ph % 2 != 0 || pw % 2 != 0 || spec.spatial[s] != (ph / 2, pw / 2) {
            return config_err(format!(
                "stage {} map {:?} must be half of stage {} map {:?}",
                s + 1,
                spec.spatial[s],
                s,
                spec.spatial[s - 1]
            ));
        }
    }
    let plan = match steam {
        Some(cfg) => {
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
            let plan = plan_placement(spec);
            let min_c = if cfg.channel_hops == 2 { 5 } else { 3 };
            for (s, &u) in plan.units_per_stage.iter().enumerate() {
                let (h, w) = spec.spatial[s];
                if u > 0 && (h % cfg.m != 0 || w % cfg.m != 0) {
                    return config_err(format!(
                        "stage {} map {h}x{w} is not divisible by m={}",
                        s + 1,
                        cfg.m
                    ));
                }
                if u > 0 && spec.channels[s] < min_c {
                    return config_err(format!(
                        "stage {} has {} channels; the channel graph needs at least {min_c}",
                        s + 1,
                        spec.channels[s]
                    ));
                }
            }
            plan
        }
        None => PlacementPlan::empty(spec.num_stages()),
    };
    let c0 = spec.channels[0];
    let stem = Conv::new(c0, in_channels, 3, rng)?;
    let mut downs = Vec::new();
    let mut blocks = Vec::new();
    for s in 0..spec.num_stages() {
        let c = spec.channels[s];
        if s > 0 {
            let cp = spec.channels[s - 1];
            downs.push(Conv::new(c, cp, 2, rng)?);
        }
        let mut stage = Vec::new();
        for b in 1..=spec.blocks[s] {
            let conv1 = Conv::new(c, c, 3, rng)?;
            let conv2 = Conv::zeroed(c, c, 3)?;
            let unit = match steam {
                Some(cfg) if plan.has_unit(s, b) => Some(SteamUnit::new(cfg.clone(), rng)?),
                _ => None,
            };
            stage.push(BasicBlock {
                conv1,
                conv2,
                steam: unit,
            });
        }
        blocks.push(stage);
    }
    let cl = *spec.channels.last().expect("non-empty");
    let normal = Normal::new(0.0, (1.0 / cl as f64).sqrt()).expect("positive std");
    let fc_w = Tensor::from_fn(&[num_classes, cl], |_| {
        T::from_f64_lossy(normal.sample(rng))
    })?;
    let fc_b = Tensor::zeros(&[num_classes])?;
    Ok(DeskCnn {
        spec: spec.clone(),
        in_channels,
        num_classes,
        plan,
        steam_cfg: steam.cloned(),
        stem,
        downs,
        blocks,
        fc_w,
        fc_b,
    })
}

impl<T: Scalar> DeskCnn<T> {
    pub fn spec(&self) -> &StageSpec {
        &self.spec
    }

    pub fn plan(&self) -> &PlacementPlan {
        &self.plan
    }

    pub fn steam_config(&self) -> Option<&SteamConfig> {
        self.steam_cfg.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Every trainable tensor with a stable name, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.named("stem", &mut out);
        for (s, stage) in self.blocks.iter().enumerate() {
            if s > 0 {
                self.downs[s - 1].named(&format!("s{}.down", s + 1), &mut out);
            }
            for (b, blk) in stage.iter().enumerate() {
                let p = format!("s{}.b{}", s + 1, b + 1);
                blk.conv1.named(&format!("{p}.conv1"), &mut out);
                blk.conv2.named(&format!("{p}.conv2"), &mut out);
                if let Some(u) = &blk.steam {
                    for (n, t) in u.named_params() {
                        out.push((format!("{p}.steam.{n}"), t));
                    }
                }
            }
        }
        out.push(("fc.w".to_string(), &self.fc_w));
        out.push(("fc.b".to_string(), &self.fc_b));
        out
    }

    /// Mutable tensors in the order of [`DeskCnn::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.stem.tensors_mut(&mut out);
        let mut downs = self.downs.iter_mut();
        for (s, stage) in self.blocks.iter_mut().enumerate() {
            if s > 0 {
                downs
                    .next()
                    .expect("one downsample per later stage")
                    .tensors_mut(&mut out);
            }
            for blk in stage {
                blk.conv1.tensors_mut(&mut out);
                blk.conv2.tensors_mut(&mut out);
                if let Some(u) = &mut blk.steam {
                    out.extend(u.params_mut());
                }
            }
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn steam_param_count(&self) -> usize {
        self.blocks
            .iter()
            .flatten()
            .filter_map(|b| b.steam.as_ref())
            .map(SteamUnit::param_count)
            .sum()
    }

    pub fn steam_units(&self) -> impl Iterator<Item = &SteamUnit<T>> {
        self.blocks
            .iter()
            .flatten()
            .filter_map(|b| b.steam.as_ref())
    }

    /// Records the parameters on `tape`, tracking gradients if `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Logits `[B, classes]` for a `[B, C, H, W]` batch using bound params.
    pub fn forward_bound<'t>(
        &self,
        x: Var<'t, T>,
        params: &[Var<'t, T>],
        mut phase: Phase<'_>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (h0, w0) = self.spec.spatial[0];
        if shape.len() != 4 || shape[1] != self.in_channels || (shape[2], shape[3]) != (h0, w0) {
            return Err(Error::Dimension(format!(
                "model expects [B, {}, {h0}, {w0}] input, got {shape:?}",
                self.in_channels
            )));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter list matches the model");
        let mut h = conv_bias(x, take(), take(), 1, 1)?.relu();
        for (s, stage) in self.blocks.iter().enumerate() {
            if s > 0 {
                h = conv_bias(h, take(), take(), 2, 0)?.relu();
            }
            for blk in stage {
                let a = conv_bias(h, take(), take(), 1, 1)?.relu();
                let mut y = conv_bias(a, take(), take(), 1, 1)?;
                if let Some(u) = &blk.steam {
                    let vals: Vec<Var<'t, T>> = (0..8).map(|_| take()).collect();
                    let vars = SteamVars::from_slice(&vals, u);
                    y = u.forward_vars(y, &vars, phase.reborrow())?.output;
                }
                h = h.add(y)?.relu();
            }
        }
        let pooled = h.mean_axes(&[2, 3])?;
        let (fw, fb) = (take(), take());
        pooled.matmul(fw.transpose()?)?.add(fb)
    }

    /// Binds the parameters and runs a forward pass.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Tensor<T>,
        phase: Phase<'_>,
        trainable: bool,
    ) -> Result<ModelOutput<'t, T>> {
        let params = self.bind(tape, trainable);
        let xv = tape.constant(x);
        let logits = self.forward_bound(xv, &params, phase)?;
        Ok(ModelOutput { logits, params })
    }
}
