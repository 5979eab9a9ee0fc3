//! TOML experiment configuration: model, STEAM unit and training recipe.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::steam::SteamConfig;
use crate::zoo::StageSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub spatial: Vec<(usize, usize)>,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Insert STEAM units at the adaptive placement.
    pub use_steam: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = StageSpec::desk();
        Self {
            blocks: d.blocks,
            channels: d.channels,
            spatial: d.spatial,
            in_channels: 1,
            num_classes: 10,
            use_steam: true,
        }
    }
}

impl ModelConfig {
    pub fn stage_spec(&self) -> Result<StageSpec> {
        StageSpec::new(
            self.blocks.clone(),
            self.channels.clone(),
            self.spatial.clone(),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stratified training subset size; `None` keeps everything.
    pub train_subset: Option<usize>,
    /// Held-out subset drawn from the test split.
    pub val_subset: Option<usize>,
    /// Random horizontal flips.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            train_subset: Some(5000),
            val_subset: Some(1000),
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub steam: SteamConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.stage_spec()?;
        if self.model.use_steam {
            self.steam
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.lr >= 0.0 && t.momentum >= 0.0 && t.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr, momentum and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the architecture sections; training knobs do not
    /// change it, so a checkpoint stays loadable under a new recipe.
    pub fn model_digest(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Arch<'a> {
            model: &'a ModelConfig,
            steam: Option<&'a SteamConfig>,
        }
        let arch = Arch {
            model: &self.model,
            steam: self.model.use_steam.then_some(&self.steam),
        };
        let text = toml::to_string(&arch).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn steam_config(&self) -> Option<&SteamConfig> {
        self.model.use_steam.then_some(&self.steam)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
