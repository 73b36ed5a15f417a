use std::path::Path;

use serde::{Deserialize, Serialize};

use segcap_core::model::ModelConfig;
use segcap_core::ptgformer::PtgVariant;
use segcap_core::train::TrainConfig;

use crate::dataset::DataConfig;
use crate::error::{Error, Result};

/// Everything a command needs besides paths. Missing fields take defaults,
/// so a config file only has to list what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Seeds of `ablate`; single runs use `train.seed`.
    pub seeds: Vec<u64>,
    /// Steps between checkpoint writes during `train`; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            seeds: vec![0, 1, 2],
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.train.steps == 0 {
            return Err(Error::Invalid("train.steps must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Invalid("seeds must not be empty".into()));
        }
        if self.model.dim != self.data.gen.feature_dim {
            return Err(Error::Invalid("model.dim must equal data.gen.feature_dim".into()));
        }
        if self.model.caption_positions != self.data.gen.caption_positions {
            return Err(Error::Invalid("model and data disagree on caption_positions".into()));
        }
        Ok(())
    }

    /// One seed drives both initialisation and sample order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.init_seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Names accepted by `--variant`.
pub fn parse_variant(s: &str) -> Result<PtgVariant> {
    let (spatial, temporal) = match s {
        "full" => (true, true),
        "spa" | "spa-only" => (true, false),
        "tem" | "tem-only" => (false, true),
        "none" | "neither" => (false, false),
        other => {
            return Err(Error::Invalid(format!(
                "unknown variant {other:?} (expected full, spa-only, tem-only or neither)"
            )))
        }
    };
    Ok(PtgVariant { spatial, temporal })
}

pub fn variant_name(v: PtgVariant) -> &'static str {
    match (v.spatial, v.temporal) {
        (true, true) => "full",
        (true, false) => "spa-only",
        (false, true) => "tem-only",
        (false, false) => "neither",
    }
}
