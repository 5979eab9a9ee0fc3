//! The STEAM unit: channel interaction attention (CIA) and spatial
//! interaction attention (SIA) over output guided pooling (OGP), combined
//! with a residual connection.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{
    sparse_attention, AttentionVars, GraphAttentionParams, LogitScale, Neighborhoods,
};
use crate::autodiff::{Backward, BackwardCtx, FlopCount, Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::graph::{
    build_cyclic_channel_graph, build_grid_spatial_graph, build_knn_correlation_graph,
    sample_edge_drop, EdgeDropMask, Graph,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of {}"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

/// Order in which the channel and spatial scores are computed and applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Arrangement {
    /// Channel first, spatial scores from the channel-refined map.
    #[default]
    #[serde(rename = "ca-sa")]
    ChannelSpatial,
    /// Spatial first, channel scores from the spatially refined map.
    #[serde(rename = "sa-ca")]
    SpatialChannel,
    /// Both score sets from the input, applied together.
    #[serde(rename = "ca+sa")]
    Parallel,
}

string_enum!(Arrangement {
    ChannelSpatial => "ca-sa",
    SpatialChannel => "sa-ca",
    Parallel => "ca+sa",
});

/// Non-linearity applied to the map the spatial scores are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
    None,
}

string_enum!(Activation {
    Tanh => "tanh",
    Relu => "relu",
    Sigmoid => "sigmoid",
    None => "none",
});

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.relu(),
            Self::Sigmoid => x.sigmoid(),
            Self::None => x,
        }
    }

    /// Pointwise FLOPs per element under the crate's counting conventions.
    pub fn flops_per_element(self) -> u64 {
        match self {
            Self::Tanh | Self::Sigmoid => 4,
            Self::Relu => 1,
            Self::None => 0,
        }
    }
}

/// Pooling used to form node features.
///
/// `AvgMax` combines both pools by summation so that node features stay
/// scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pool {
    #[default]
    #[serde(rename = "avg")]
    Avg,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "avg+max")]
    AvgMax,
}

string_enum!(Pool {
    Avg => "avg",
    Max => "max",
    AvgMax => "avg+max",
});

impl Pool {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>, axes: &[usize]) -> Result<Var<'t, T>> {
        match self {
            Self::Avg => x.mean_axes(axes),
            Self::Max => x.max_axes(axes),
            Self::AvgMax => x.mean_axes(axes)?.add(x.max_axes(axes)?),
        }
    }

    /// FLOPs to pool `inputs` elements down to `outputs`.
    pub fn flops(self, inputs: u64, outputs: u64) -> FlopCount {
        match self {
            Self::Avg | Self::Max => FlopCount::reduce(inputs),
            Self::AvgMax => FlopCount::reduce(2 * inputs) + FlopCount::pointwise(outputs),
        }
    }
}

fn default_d() -> usize {
    8
}
fn default_heads() -> usize {
    4
}
fn default_m() -> usize {
    7
}
fn default_hops() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteamConfig {
    /// Hidden dimension `d = H * d_K`.
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub arrangement: Arrangement,
    /// OGP output side length.
    #[serde(default = "default_m")]
    pub m: usize,
    /// 1 for a degree-2 channel cycle, 2 for degree 4.
    #[serde(default = "default_hops")]
    pub channel_hops: usize,
    #[serde(default = "default_true")]
    pub edge_drop: bool,
    #[serde(default)]
    pub inter_activation: Activation,
    #[serde(default)]
    pub channel_pool: Pool,
    #[serde(default)]
    pub spatial_pool: Pool,
    #[serde(default)]
    pub sqrt_scaling: bool,
    #[serde(default)]
    pub include_self_loops: bool,
}

impl Default for SteamConfig {
    fn default() -> Self {
        Self {
            d: 8,
            heads: 4,
            arrangement: Arrangement::default(),
            m: 7,
            channel_hops: 1,
            edge_drop: true,
            inter_activation: Activation::default(),
            channel_pool: Pool::default(),
            spatial_pool: Pool::default(),
            sqrt_scaling: false,
            include_self_loops: false,
        }
    }
}

impl SteamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return param_err(format!(
                "heads ({}) must divide the hidden dim d ({})",
                self.heads, self.d
            ));
        }
        if self.m < 2 {
            return param_err(format!("OGP side m must be at least 2, got {}", self.m));
        }
        if !(1..=2).contains(&self.channel_hops) {
            return param_err(format!(
                "channel_hops must be 1 or 2, got {}",
                self.channel_hops
            ));
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Trainable parameters of one unit: `8d`.
    pub fn unit_params(&self) -> usize {
        8 * self.d
    }

    pub fn logit_scale(&self) -> LogitScale {
        LogitScale::from_sqrt_flag(self.sqrt_scaling)
    }
}

/// Whether a forward pass trains (and so samples an edge-drop mask).
pub enum Phase<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    /// Shorter-lived copy, for passing to several units in turn.
    pub fn reborrow(&mut self) -> Phase<'_> {
        match self {
            Phase::Eval => Phase::Eval,
            Phase::Train(rng) => Phase::Train(&mut **rng),
        }
    }
}

/// Block averaging of the two trailing axes `[.., H, W] -> [.., m, m]`.
struct BlockMeanRule {
    lead: usize,
    h: usize,
    w: usize,
    m: usize,
}

impl<T: Scalar> Backward<T> for BlockMeanRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (bh, bw) = (self.h / self.m, self.w / self.m);
        let inv = T::one() / T::from_count(bh * bw);
        let mut gx = vec![T::zero(); self.lead * self.h * self.w];
        for l in 0..self.lead {
            for y in 0..self.h {
                for x in 0..self.w {
                    let g = ctx.grad[(l * self.m + y / bh) * self.m + x / bw];
                    gx[(l * self.h + y) * self.w + x] = g * inv;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Replication of each cell of `[.., m, m]` into an `(H/m) x (W/m)` block.
struct BlockRepeatRule {
    lead: usize,
    h: usize,
    w: usize,
    m: usize,
}

impl<T: Scalar> Backward<T> for BlockRepeatRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (bh, bw) = (self.h / self.m, self.w / self.m);
        let mut gs = vec![T::zero(); self.lead * self.m * self.m];
        for l in 0..self.lead {
            for y in 0..self.h {
                for x in 0..self.w {
                    gs[(l * self.m + y / bh) * self.m + x / bw] +=
                        ctx.grad[(l * self.h + y) * self.w + x];
                }
            }
        }
        vec![Some(gs)]
    }
}

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return dim_err(format!(
            "spatial size {h}x{w} (H={h}, W={w}) is not divisible by m={m}"
        ));
    }
    Ok(())
}

fn split_trailing(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return dim_err(format!("expected at least 2 axes, got {shape:?}"));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Non-overlapping `(H/m) x (W/m)` block average of the two trailing
    /// axes. Each block mean is taken relative to the block's first entry,
    /// so constant blocks reproduce their value exactly.
    pub fn block_mean(self, m: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (lead, h, w) = split_trailing(&shape)?;
        check_divisible(h, w, m)?;
        let (bh, bw) = (h / m, w / m);
        let n = T::from_count(bh * bw);
        let out = {
            let v = self.value();
            let x = v.data();
            let mut out = vec![T::zero(); lead * m * m];
            for l in 0..lead {
                for by in 0..m {
                    for bx in 0..m {
                        let at = |y: usize, xx: usize| x[(l * h + by * bh + y) * w + bx * bw + xx];
                        let first = at(0, 0);
                        let mut acc = T::zero();
                        for y in 0..bh {
                            for xx in 0..bw {
                                acc += at(y, xx) - first;
                            }
                        }
                        out[(l * m + by) * m + bx] = first + acc / n;
                    }
                }
            }
            let mut oshape = shape[..shape.len() - 2].to_vec();
            oshape.extend([m, m]);
            Tensor::new(&oshape, out)?
        };
        let rule = BlockMeanRule { lead, h, w, m };
        Ok(self.tape().custom(
            &[self],
            out,
            Box::new(rule),
            FlopCount::reduce((lead * h * w) as u64),
        ))
    }

    /// Nearest-neighbour block replication `[.., m, m] -> [.., H, W]`.
    pub fn block_repeat(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (lead, mh, mw) = split_trailing(&shape)?;
        if mh != mw {
            return dim_err(format!("block_repeat needs a square map, got {shape:?}"));
        }
        let m = mh;
        check_divisible(h, w, m)?;
        let (bh, bw) = (h / m, w / m);
        let out = {
            let v = self.value();
            let s = v.data();
            let mut out = vec![T::zero(); lead * h * w];
            for l in 0..lead {
                for y in 0..h {
                    for x in 0..w {
                        out[(l * h + y) * w + x] = s[(l * m + y / bh) * m + x / bw];
                    }
                }
            }
            let mut oshape = shape[..shape.len() - 2].to_vec();
            oshape.extend([h, w]);
            Tensor::new(&oshape, out)?
        };
        let rule = BlockRepeatRule { lead, h, w, m };
        Ok(self
            .tape()
            .custom(&[self], out, Box::new(rule), FlopCount::ZERO))
    }
}

/// Output guided pooling on the tape: pool over channels then block-average
/// to `m x m`. Accepts `[C, H, W]` or `[B, C, H, W]`.
pub fn ogp_var<'t, T: Scalar>(x: Var<'t, T>, m: usize, pool: Pool) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let axis = match shape.len() {
        3 => 0,
        4 => 1,
        _ => {
            return dim_err(format!(
                "OGP input must be [C,H,W] or [B,C,H,W], got {shape:?}"
            ))
        }
    };
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    check_divisible(h, w, m)?;
    pool.apply(x, &[axis])?.block_mean(m)
}

/// Output guided pooling of a `[C, H, W]` map to `[m, m]` (channel mean,
/// then block average).
pub fn ogp<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return dim_err(format!("OGP input must be [C,H,W], got {:?}", x.shape()));
    }
    let tape = Tape::new();
    Ok(ogp_var(tape.constant(x.clone()), m, Pool::Avg)?.to_tensor())
}

/// Repeats each entry of an `[m, m]` map into an `(H/m) x (W/m)` block.
pub fn upsample_repeat<T: Scalar>(s: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if s.rank() != 2 {
        return dim_err(format!("upsample input must be [m,m], got {:?}", s.shape()));
    }
    let tape = Tape::new();
    Ok(tape.constant(s.clone()).block_repeat(h, w)?.to_tensor())
}

/// Parameters of one unit recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SteamVars<'t, T: Scalar> {
    pub cia: AttentionVars<'t, T>,
    pub sia: AttentionVars<'t, T>,
}

impl<'t, T: Scalar> SteamVars<'t, T> {
    /// Rebuilds from eight leaves in canonical order, taking the logit
    /// scaling from `unit`.
    pub fn from_slice(v: &[Var<'t, T>], unit: &SteamUnit<T>) -> Self {
        assert_eq!(v.len(), 8, "a unit has eight parameter tensors");
        let attn = |o: usize, scale| AttentionVars {
            wk: v[o],
            bk: v[o + 1],
            wq: v[o + 2],
            bq: v[o + 3],
            scale,
        };
        Self {
            cia: attn(0, unit.cia.scale),
            sia: attn(4, unit.sia.scale),
        }
    }

    /// The eight tensors in canonical order (CIA then SIA).
    pub fn as_vec(&self) -> Vec<Var<'t, T>> {
        let mut v = self.cia.as_array().to_vec();
        v.extend(self.sia.as_array());
        v
    }
}

/// Intermediate results of one forward pass.
pub struct SteamTrace<'t, T: Scalar> {
    /// Same shape as the input.
    pub output: Var<'t, T>,
    /// `[B, C]` channel scores.
    pub alpha_c: Var<'t, T>,
    /// `[B, m, m]` spatial scores before upsampling.
    pub alpha_init: Var<'t, T>,
    /// Edge-drop mask used by the spatial attention.
    pub mask: EdgeDropMask,
}

/// One STEAM unit: `8d` trainable scalars regardless of the feature map size.
pub struct SteamUnit<T: Scalar> {
    cfg: SteamConfig,
    pub cia: GraphAttentionParams<T>,
    pub sia: GraphAttentionParams<T>,
    spatial: Graph,
    channel: Mutex<HashMap<usize, Arc<Neighborhoods>>>,
}

impl<T: Scalar> Clone for SteamUnit<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            cia: self.cia.clone(),
            sia: self.sia.clone(),
            spatial: self.spatial.clone(),
            channel: Mutex::new(self.channel.lock().expect("graph cache").clone()),
        }
    }
}

impl<T: Scalar> fmt::Debug for SteamUnit<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SteamUnit")
            .field("cfg", &self.cfg)
            .field("params", &self.param_count())
            .finish()
    }
}

impl<T: Scalar> SteamUnit<T> {
    pub fn new<R: Rng + ?Sized>(cfg: SteamConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cia = GraphAttentionParams::init(cfg.d, cfg.heads, rng)?;
        let mut sia = GraphAttentionParams::init(cfg.d, cfg.heads, rng)?;
        cia.scale = cfg.logit_scale();
        sia.scale = cfg.logit_scale();
        Self::from_params(cfg, cia, sia)
    }

    pub fn from_params(
        cfg: SteamConfig,
        cia: GraphAttentionParams<T>,
        sia: GraphAttentionParams<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        for p in [&cia, &sia] {
            if p.heads() != cfg.heads || p.hidden_dim() != cfg.d {
                return param_err(format!(
                    "attention params with {} heads and d={} do not match the config",
                    p.heads(),
                    p.hidden_dim()
                ));
            }
        }
        let mut spatial = build_grid_spatial_graph(cfg.m)?;
        if cfg.include_self_loops {
            spatial = spatial.with_self_loops();
        }
        Ok(Self {
            cfg,
            cia,
            sia,
            spatial,
            channel: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &SteamConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.cia.param_count() + self.sia.param_count()
    }

    pub fn spatial_graph(&self) -> &Graph {
        &self.spatial
    }

    /// Channel graph for `c` channels, without edge drop.
    pub fn channel_graph(&self, c: usize) -> Result<Graph> {
        let g = build_cyclic_channel_graph(c, self.cfg.channel_hops)?;
        Ok(if self.cfg.include_self_loops {
            g.with_self_loops()
        } else {
            g
        })
    }

    fn channel_neighborhoods(&self, c: usize) -> Result<Arc<Neighborhoods>> {
        let mut cache = self.channel.lock().expect("graph cache");
        if let Some(nb) = cache.get(&c) {
            return Ok(nb.clone());
        }
        let nb = Arc::new(Neighborhoods::full(&self.channel_graph(c)?)?);
        cache.insert(c, nb.clone());
        Ok(nb)
    }

    /// Parameter tensors in canonical order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let names = ["wk", "bk", "wq", "bq"];
        let mut out = Vec::with_capacity(8);
        for (prefix, p) in [("cia", &self.cia), ("sia", &self.sia)] {
            for (n, t) in names.iter().zip(p.tensors()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.cia.tensors_mut().into_iter().collect();
        v.extend(self.sia.tensors_mut());
        v
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> SteamVars<'t, T> {
        SteamVars {
            cia: self.cia.bind(tape),
            sia: self.sia.bind(tape),
        }
    }

    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> SteamVars<'t, T> {
        SteamVars {
            cia: self.cia.bind_constant(tape),
            sia: self.sia.bind_constant(tape),
        }
    }

    /// Edge-drop mask for one forward pass.
    pub fn sample_mask(&self, phase: Phase<'_>) -> Result<EdgeDropMask> {
        let n = self.spatial.num_nodes();
        match phase {
            Phase::Train(rng) if self.cfg.edge_drop && self.cfg.m >= 3 => {
                sample_edge_drop(&self.spatial, self.cfg.m, rng)
            }
            _ => Ok(EdgeDropMask::inactive(n)),
        }
    }

    /// `[B, C, H, W] -> [B, C]` channel scores `sigmoid(attention(pool(x)))`.
    pub fn channel_scores<'t>(
        &self,
        x: Var<'t, T>,
        vars: &AttentionVars<'t, T>,
    ) -> Result<Var<'t, T>> {
        let c = x.shape()[1];
        let nb = self.channel_neighborhoods(c)?;
        let pooled = self.cfg.channel_pool.apply(x, &[2, 3])?;
        Ok(sparse_attention(pooled, vars, &nb)?.updated.sigmoid())
    }

    /// `[B, C, H, W] -> [B, m, m]` spatial scores from OGP of the activated
    /// map, attended over the grid with `mask` applied.
    pub fn spatial_scores<'t>(
        &self,
        x: Var<'t, T>,
        vars: &AttentionVars<'t, T>,
        mask: &EdgeDropMask,
    ) -> Result<Var<'t, T>> {
        let b = x.shape()[0];
        let m = self.cfg.m;
        let s_in = self.cfg.inter_activation.apply(x);
        let pooled = ogp_var(s_in, m, self.cfg.spatial_pool)?.reshape(&[b, m * m])?;
        let nb = Neighborhoods::new(&self.spatial, mask)?;
        sparse_attention(pooled, vars, &nb)?
            .updated
            .sigmoid()
            .reshape(&[b, m, m])
    }

    /// Forward pass recorded on `x`'s tape. `x` is `[C, H, W]` or
    /// `[B, C, H, W]`; one edge-drop mask is shared by the whole batch.
    pub fn forward_vars<'t>(
        &self,
        x: Var<'t, T>,
        vars: &SteamVars<'t, T>,
        phase: Phase<'_>,
    ) -> Result<SteamTrace<'t, T>> {
        let shape = x.shape();
        let x4 = match shape.len() {
            3 => x.reshape(&[1, shape[0], shape[1], shape[2]])?,
            4 => x,
            _ => {
                return dim_err(format!(
                    "STEAM input must be [C,H,W] or [B,C,H,W], got {shape:?}"
                ))
            }
        };
        let s4 = x4.shape();
        let (b, h, w) = (s4[0], s4[2], s4[3]);
        check_divisible(h, w, self.cfg.m)?;
        let mask = self.sample_mask(phase)?;
        let as_channel = |a: Var<'t, T>| a.reshape(&[b, s4[1], 1, 1]);
        let as_spatial = |a: Var<'t, T>| a.block_repeat(h, w)?.reshape(&[b, 1, h, w]);
        let (output, alpha_c, alpha_init) = match self.cfg.arrangement {
            Arrangement::ChannelSpatial => {
                let alpha_c = self.channel_scores(x4, &vars.cia)?;
                let x_ref = x4.mul(as_channel(alpha_c)?)?;
                let alpha_init = self.spatial_scores(x_ref, &vars.sia, &mask)?;
                let out = x4.add(as_spatial(alpha_init)?.mul(x_ref)?)?;
                (out, alpha_c, alpha_init)
            }
            Arrangement::SpatialChannel => {
                let alpha_init = self.spatial_scores(x4, &vars.sia, &mask)?;
                let x_ref = x4.mul(as_spatial(alpha_init)?)?;
                let alpha_c = self.channel_scores(x_ref, &vars.cia)?;
                let out = x4.add(as_channel(alpha_c)?.mul(x_ref)?)?;
                (out, alpha_c, alpha_init)
            }
            Arrangement::Parallel => {
                let alpha_c = self.channel_scores(x4, &vars.cia)?;
                let alpha_init = self.spatial_scores(x4, &vars.sia, &mask)?;
                let x_ref = x4.mul(as_channel(alpha_c)?)?;
                let out = x4.add(as_spatial(alpha_init)?.mul(x_ref)?)?;
                (out, alpha_c, alpha_init)
            }
        };
        let output = if shape.len() == 3 {
            output.reshape(&shape)?
        } else {
            output
        };
        Ok(SteamTrace {
            output,
            alpha_c,
            alpha_init,
            mask,
        })
    }

    /// Channel interaction attention on `[C, H, W]`: returns the refined map
    /// `alpha_c * x` and the scores `alpha_c` (`[C]`).
    pub fn cia(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let x4 = lift(x)?;
        let tape = Tape::new();
        let xv = tape.constant(x4);
        let vars = self.cia.bind_constant(&tape);
        let alpha = self.channel_scores(xv, &vars)?;
        let c = x.shape()[0];
        let x_ref = xv.mul(alpha.reshape(&[1, c, 1, 1])?)?;
        Ok((
            x_ref.to_tensor().reshape(x.shape())?,
            alpha.to_tensor().reshape(&[c])?,
        ))
    }

    /// Spatial interaction attention: `x_orig + upsample(alpha_init) * x_ref`
    /// with scores computed from `x_ref`.
    pub fn sia(
        &self,
        x_ref: &Tensor<T>,
        x_orig: &Tensor<T>,
        phase: Phase<'_>,
    ) -> Result<Tensor<T>> {
        if x_ref.shape() != x_orig.shape() {
            return dim_err(format!(
                "refined map {:?} and input {:?} differ in shape",
                x_ref.shape(),
                x_orig.shape()
            ));
        }
        let (r4, o4) = (lift(x_ref)?, lift(x_orig)?);
        let (h, w) = (r4.shape()[2], r4.shape()[3]);
        check_divisible(h, w, self.cfg.m)?;
        let tape = Tape::new();
        let (rv, ov) = (tape.constant(r4), tape.constant(o4));
        let vars = self.sia.bind_constant(&tape);
        let mask = self.sample_mask(phase)?;
        let alpha = self.spatial_scores(rv, &vars, &mask)?;
        let up = alpha.block_repeat(h, w)?.reshape(&[1, 1, h, w])?;
        let out = ov.add(up.mul(rv)?)?;
        out.to_tensor().reshape(x_orig.shape())
    }

    /// Full unit on a plain tensor.
    pub fn forward(&self, x: &Tensor<T>, phase: Phase<'_>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind_constant(&tape);
        Ok(self.forward_vars(xv, &vars, phase)?.output.to_tensor())
    }
}

fn lift<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape() {
        [c, h, w] => x.reshape(&[1, *c, *h, *w]),
        s => dim_err(format!("expected a [C,H,W] map, got {s:?}")),
    }
}

/// Channel scores of the correlation k-NN baseline: node features are the
/// channel means, the graph links each channel to its `k` most correlated
/// channels (rows of `X X^T`), and scores are `sigmoid(attention)`.
pub fn kcam_scores<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    params: &GraphAttentionParams<T>,
) -> Result<Tensor<T>> {
    let [c, h, w] = *x.shape() else {
        return dim_err(format!("expected a [C,H,W] map, got {:?}", x.shape()));
    };
    let g = build_knn_correlation_graph(&x.reshape(&[c, h * w])?, k)?;
    let nb = Neighborhoods::full(&g)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pooled = xv.mean_axes(&[1, 2])?;
    let vars = params.bind_constant(&tape);
    Ok(sparse_attention(pooled, &vars, &nb)?
        .updated
        .sigmoid()
        .to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn unit(cfg: SteamConfig, seed: u64) -> SteamUnit<f64> {
        SteamUnit::new(cfg, &mut Xoshiro256::seed_from_u64(seed)).unwrap()
    }

    fn wavy(shape: &[usize], k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            (i as f64 * k).sin() + 0.3 * (i as f64 * 0.11).cos()
        })
        .unwrap()
    }

    #[test]
    fn ogp_examples() {
        let x = Tensor::full(&[1, 14, 14], 3.0).unwrap();
        assert!(ogp(&x, 7).unwrap().data().iter().all(|&v| v == 3.0));
        let mut planes = vec![1.5; 16];
        planes.extend(vec![-0.25; 16]);
        let y = ogp(&t(&[2, 4, 4], &planes), 2).unwrap();
        assert!(y.data().iter().all(|&v| v == (1.5 - 0.25) / 2.0));
        let grid: Vec<f64> = (1..=16).map(f64::from).collect();
        let z = ogp(&t(&[1, 4, 4], &grid), 2).unwrap();
        assert_eq!(z.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn ogp_rejects_indivisible() {
        let e = ogp(&Tensor::<f64>::zeros(&[1, 10, 14]).unwrap(), 7).unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("H=10") && msg.contains("W=14") && msg.contains("m=7"),
            "{msg}"
        );
    }

    #[test]
    fn upsample_examples() {
        let s = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let u = upsample_repeat(&s, 4, 4).unwrap();
        assert_eq!(
            u.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(upsample_repeat(&s, 2, 2).unwrap().data(), s.data());
        assert!(upsample_repeat(&s, 5, 4).is_err());
    }

    #[test]
    fn ogp_upsample_round_trip_is_exact() {
        let s = wavy(&[7, 7], 1.37);
        let up = upsample_repeat(&s, 56, 56).unwrap();
        let back = ogp(&up.reshape(&[1, 56, 56]).unwrap(), 7).unwrap();
        assert_eq!(back.data(), s.data());
    }

    #[test]
    fn parameter_count_is_eight_d() {
        let u = unit(SteamConfig::default(), 0);
        assert_eq!(u.param_count(), 64);
        let x16 = wavy(&[16, 7, 7], 0.3);
        let x64 = wavy(&[64, 14, 14], 0.3);
        u.forward(&x16, Phase::Eval).unwrap();
        u.forward(&x64, Phase::Eval).unwrap();
        assert_eq!(u.param_count(), 64);
    }

    #[test]
    fn cia_on_constant_input() {
        let u = unit(SteamConfig::default(), 1);
        let x = Tensor::full(&[5, 7, 7], 0.4).unwrap();
        let (x_ref, a) = u.cia(&x).unwrap();
        let first = a.data()[0];
        assert!(a.data().iter().all(|&v| (v - first).abs() < 1e-15));
        assert!(first > 0.0 && first < 1.0);
        assert!(x_ref
            .data()
            .iter()
            .all(|&v| (v - first * 0.4).abs() < 1e-15));
    }

    #[test]
    fn cia_derived_example() {
        let cfg = SteamConfig {
            d: 1,
            heads: 1,
            ..SteamConfig::default()
        };
        let one = t(&[1, 1], &[1.0]);
        let zero = t(&[1, 1], &[0.0]);
        let p = GraphAttentionParams::from_parts(
            one.clone(),
            zero.clone(),
            one,
            zero,
            LogitScale::KeyDim,
        )
        .unwrap();
        let u = SteamUnit::from_params(cfg, p.clone(), p).unwrap();
        let x = t(&[3, 1, 1], &[1.0, 2.0, 3.0]);
        let (_, a) = u.cia(&x).unwrap();
        let (e2, e3) = (2f64.exp(), 3f64.exp());
        let att = (2.0 * e2 + 3.0 * e3) / (e2 + e3);
        let want = 1.0 / (1.0 + (-att).exp());
        assert!((a.data()[0] - want).abs() < 1e-14);
        assert!((a.data()[0] - 0.93887).abs() < 1e-4);
        assert!(u.cia(&Tensor::zeros(&[2, 7, 7]).unwrap()).is_err());
    }

    #[test]
    fn sia_with_zero_refinement_returns_input() {
        let u = unit(SteamConfig::default(), 2);
        let x = wavy(&[4, 14, 14], 0.7);
        let zero = Tensor::zeros(&[4, 14, 14]).unwrap();
        let out = u.sia(&zero, &x, Phase::Eval).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn arrangements_preserve_shape() {
        for &arrangement in Arrangement::ALL {
            let cfg = SteamConfig {
                arrangement,
                ..SteamConfig::default()
            };
            let u = unit(cfg, 3);
            let x = wavy(&[6, 14, 14], 0.21);
            assert_eq!(u.forward(&x, Phase::Eval).unwrap().shape(), x.shape());
            let xb = wavy(&[2, 6, 14, 14], 0.21);
            assert_eq!(u.forward(&xb, Phase::Eval).unwrap().shape(), xb.shape());
        }
    }

    #[test]
    fn ca_sa_composes_cia_then_sia() {
        let u = unit(SteamConfig::default(), 4);
        let x = wavy(&[5, 14, 14], 0.9);
        let (x_ref, _) = u.cia(&x).unwrap();
        let via_parts = u.sia(&x_ref, &x, Phase::Eval).unwrap();
        let whole = u.forward(&x, Phase::Eval).unwrap();
        assert!(whole.max_abs_diff(&via_parts).unwrap() < 1e-14);
    }

    #[test]
    fn batch_matches_per_sample() {
        let u = unit(SteamConfig::default(), 5);
        let xb = wavy(&[3, 4, 7, 7], 0.5);
        let out = u.forward(&xb, Phase::Eval).unwrap();
        let per = 4 * 49;
        for b in 0..3 {
            let xs = Tensor::new(&[4, 7, 7], xb.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            let o = u.forward(&xs, Phase::Eval).unwrap();
            assert_eq!(o.data(), &out.data()[b * per..(b + 1) * per]);
        }
    }

    #[test]
    fn edge_drop_changes_training_outputs_only() {
        let u = unit(SteamConfig::default(), 6);
        let x = wavy(&[4, 7, 7], 1.3);
        let e1 = u.forward(&x, Phase::Eval).unwrap();
        let e2 = u.forward(&x, Phase::Eval).unwrap();
        assert_eq!(e1, e2);
        let mut r1 = Xoshiro256::seed_from_u64(1);
        let mut r2 = Xoshiro256::seed_from_u64(2);
        let t1 = u.forward(&x, Phase::Train(&mut r1)).unwrap();
        let t2 = u.forward(&x, Phase::Train(&mut r2)).unwrap();
        assert_ne!(t1, t2);
        let mut r1b = Xoshiro256::seed_from_u64(1);
        assert_eq!(t1, u.forward(&x, Phase::Train(&mut r1b)).unwrap());
    }

    #[test]
    fn scores_lie_in_open_unit_interval() {
        let u = unit(SteamConfig::default(), 7);
        let tape = Tape::new();
        let x = tape.constant(wavy(&[2, 8, 14, 14], 2.1));
        let tr = u
            .forward_vars(x, &u.bind_constant(&tape), Phase::Eval)
            .unwrap();
        for v in [tr.alpha_c, tr.alpha_init] {
            assert!(v.value().data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
        assert_eq!(tr.alpha_init.shape(), vec![2, 7, 7]);
    }

    #[test]
    fn config_parses_names() {
        assert_eq!(
            "ca+sa".parse::<Arrangement>().unwrap(),
            Arrangement::Parallel
        );
        assert_eq!("avg+max".parse::<Pool>().unwrap(), Pool::AvgMax);
        assert!("diagonal".parse::<Arrangement>().is_err());
        let bad = SteamConfig {
            heads: 3,
            ..SteamConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kcam_on_uniform_input_is_uniform() {
        let p = GraphAttentionParams::init(8, 4, &mut Xoshiro256::seed_from_u64(8)).unwrap();
        let x = Tensor::<f64>::full(&[6, 3, 3], 0.2).unwrap();
        let a = kcam_scores(&x, 2, &p).unwrap();
        let first = a.data()[0];
        assert!(a.data().iter().all(|&v| v == first));
    }
}
