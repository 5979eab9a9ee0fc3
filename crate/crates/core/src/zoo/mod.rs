//! Backbone stage specifications, STEAM placement, parameter and FLOP
//! accounting, and a small trainable residual CNN.

mod accounting;
mod desk;

pub use accounting::{
    count_flops, count_params, measure_flops, reference_param_table, unit_flops, AccountingReport,
    ReferenceRow, StageAccount, FLOP_CONVENTIONS, PROFILER_CONVENTIONS,
};
pub use desk::{build_desk_cnn, DeskCnn, ModelOutput};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Per-stage block counts, channel widths and feature-map sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    /// `(H, W)` of each stage's output.
    pub spatial: Vec<(usize, usize)>,
}

impl StageSpec {
    pub fn new(
        blocks: Vec<usize>,
        channels: Vec<usize>,
        spatial: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let s = Self {
            blocks,
            channels,
            spatial,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 {
            return param_err("stage spec needs at least one stage");
        }
        if self.channels.len() != n || self.spatial.len() != n {
            return param_err(format!(
                "stage spec lists {} block counts, {} channel widths and {} spatial sizes",
                n,
                self.channels.len(),
                self.spatial.len()
            ));
        }
        if self.blocks.contains(&0)
            || self.channels.contains(&0)
            || self.spatial.iter().any(|&(h, w)| h == 0 || w == 0)
        {
            return param_err("stage spec entries must be positive");
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.blocks.len()
    }

    /// ResNet-18: basic blocks `[2, 2, 2, 2]`.
    pub fn resnet18() -> Self {
        Self {
            blocks: vec![2, 2, 2, 2],
            channels: vec![64, 128, 256, 512],
            spatial: vec![(56, 56), (28, 28), (14, 14), (7, 7)],
        }
    }

    /// ResNet-50: bottleneck blocks `[3, 4, 6, 3]`.
    pub fn resnet50() -> Self {
        Self {
            blocks: vec![3, 4, 6, 3],
            channels: vec![256, 512, 1024, 2048],
            spatial: vec![(56, 56), (28, 28), (14, 14), (7, 7)],
        }
    }

    /// ResNet-101: bottleneck blocks `[3, 4, 23, 3]`.
    pub fn resnet101() -> Self {
        Self {
            blocks: vec![3, 4, 23, 3],
            channels: vec![256, 512, 1024, 2048],
            spatial: vec![(56, 56), (28, 28), (14, 14), (7, 7)],
        }
    }

    /// ShuffleNet-V2 1x: units `[4, 8, 4]`.
    pub fn shufflenet_v2() -> Self {
        Self {
            blocks: vec![4, 8, 4],
            channels: vec![116, 232, 464],
            spatial: vec![(28, 28), (14, 14), (7, 7)],
        }
    }

    /// Three-stage MNIST-sized network: one block per stage, widths
    /// `[8, 16, 32]`, maps 28/14/7.
    pub fn desk() -> Self {
        Self {
            blocks: vec![1, 1, 1],
            channels: vec![8, 16, 32],
            spatial: vec![(28, 28), (14, 14), (7, 7)],
        }
    }

    /// Named preset, for the command line.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet18" => Some(Self::resnet18()),
            "resnet50" => Some(Self::resnet50()),
            "resnet101" => Some(Self::resnet101()),
            "shufflenet-v2" | "shufflenetv2" => Some(Self::shufflenet_v2()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// Preset whose block counts equal `blocks`, if any.
    pub fn preset_for_blocks(blocks: &[usize]) -> Option<Self> {
        [
            Self::resnet18(),
            Self::resnet50(),
            Self::resnet101(),
            Self::shufflenet_v2(),
        ]
        .into_iter()
        .find(|s| s.blocks == blocks)
    }
}

/// Number and position of STEAM units in every stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub units_per_stage: Vec<usize>,
    /// 1-based block indices after which a unit sits, per stage.
    pub insertion_indices: Vec<Vec<usize>>,
}

impl PlacementPlan {
    pub fn total_units(&self) -> usize {
        self.units_per_stage.iter().sum()
    }

    /// Plan with no units anywhere.
    pub fn empty(stages: usize) -> Self {
        Self {
            units_per_stage: vec![0; stages],
            insertion_indices: vec![Vec::new(); stages],
        }
    }

    /// Whether a unit follows block `block` (1-based) of `stage`.
    pub fn has_unit(&self, stage: usize, block: usize) -> bool {
        self.insertion_indices[stage].contains(&block)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl fmt::Display for PlacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "units: [{}]", join(&self.units_per_stage))?;
        for (s, idx) in self.insertion_indices.iter().enumerate() {
            write!(f, "; stage-{} insertions after blocks {}", s + 1, join(idx))?;
        }
        Ok(())
    }
}

/// `ceil(N_bs / 4)` units per stage: one after the last block, the others
/// after blocks `ceil(j N_bs / u)` for `j = 1..u-1`.
pub fn plan_for_blocks(blocks: &[usize]) -> PlacementPlan {
    let mut units = Vec::with_capacity(blocks.len());
    let mut idx = Vec::with_capacity(blocks.len());
    for &n in blocks {
        let u = n.div_ceil(4);
        let mut at: Vec<usize> = (1..u).map(|j| (j * n).div_ceil(u)).collect();
        if u > 0 {
            at.push(n);
        }
        units.push(u);
        idx.push(at);
    }
    PlacementPlan {
        units_per_stage: units,
        insertion_indices: idx,
    }
}

pub fn plan_placement(spec: &StageSpec) -> PlacementPlan {
    plan_for_blocks(&spec.blocks)
}
