//! Run configuration file.
//!
//! ```json
//! { "init":    { "mode": "lai", "r": 64, "sigma_down": 0.02, "seed": 7 },
//!   "train":   { "lr": 0.0035, "epochs": 10 },
//!   "tta":     { "enabled": true, "weight": "scaled" },
//!   "metrics": { "beta2": 0.3 } }
//! ```
//!
//! Every section and key is optional. Unknown keys are errors. Command-line
//! flags are applied on top of the file by the caller.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::classification::TtaWeight;
use crate::error::{Error, Result};
use crate::init::{lai_init, standard_init, InitConfig};
use crate::metrics::MetricsConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Lai,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub mode: InitMode,
    /// Bottleneck width; `None` picks `min(64, max(1, d / 4))`.
    pub r: Option<usize>,
    pub sigma_down: f64,
    pub sigma_mid: f64,
    pub sigma_up: f64,
    pub s_lo: f64,
    pub s_hi: f64,
    pub seed: u64,
    /// Shared σ of the standard init.
    pub sigma: f64,
    /// Fixed gate of the standard init.
    pub s0: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        let lai = InitConfig::default();
        InitSection {
            mode: InitMode::Lai,
            r: None,
            sigma_down: lai.sigma_down,
            sigma_mid: lai.sigma_mid,
            sigma_up: lai.sigma_up,
            s_lo: lai.s_lo,
            s_hi: lai.s_hi,
            seed: lai.seed,
            sigma: 0.01,
            s0: 0.15,
        }
    }
}

impl InitSection {
    pub fn lai_config(&self) -> InitConfig {
        InitConfig {
            sigma_down: self.sigma_down,
            sigma_mid: self.sigma_mid,
            sigma_up: self.sigma_up,
            s_lo: self.s_lo,
            s_hi: self.s_hi,
            seed: self.seed,
        }
    }

    pub fn rank_for(&self, d: usize) -> usize {
        self.r.unwrap_or_else(|| (d / 4).clamp(1, 64))
    }

    pub fn build(&self, d: usize) -> Result<AdapterParams> {
        let r = self.rank_for(d);
        match self.mode {
            InitMode::Lai => lai_init(d, r, &self.lai_config()),
            InitMode::Standard => standard_init(d, r, self.sigma, self.s0, self.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            InitMode::Lai => self.lai_config().validate(),
            InitMode::Standard => {
                if !(self.sigma >= 0.0 && self.sigma.is_finite() && self.s0.is_finite()) {
                    return Err(Error::Config(format!(
                        "init.sigma must be >= 0 and init.s0 finite, got {} and {}",
                        self.sigma, self.s0
                    )));
                }
                Ok(())
            }
        }?;
        if self.r == Some(0) {
            return Err(Error::Config("init.r must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub enabled: bool,
    pub weight: TtaWeight,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub init: InitSection,
    pub train: TrainConfig,
    pub tta: TtaSection,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            let at = if at == "." { String::new() } else { format!(" at {at}") };
            Error::Config(format!("{origin}{at}: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.init.validate()?;
        self.train.validate()?;
        self.metrics.validate()
    }
}
