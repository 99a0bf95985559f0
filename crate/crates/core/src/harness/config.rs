//! TOML campaign files.
//!
//! ```toml
//! [scenario]
//! name = "turn-range-bearing"
//! k = 200
//!
//! [corruption]
//! mode = "gmm-outlier"
//! lambda = 0.2
//! gamma_min = 100.0
//! gamma_max = 1000.0
//!
//! [estimators]
//! list = ["ukf", "sor"]
//!
//! [campaign]
//! runs = 100
//! seed = 1
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::UtParams;

use super::campaign::{CampaignConfig, EstimatorKind};
use super::corrupt::CorruptionMode;
use super::scenarios::ScenarioConfig;

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorSection {
    list: Vec<EstimatorKind>,
    #[serde(default = "default_particles")]
    particles: usize,
}

fn default_particles() -> usize {
    1000
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CampaignSection {
    #[serde(default = "default_runs")]
    runs: usize,
    #[serde(default)]
    seed: u64,
}

fn default_runs() -> usize {
    100
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scenario: ScenarioConfig,
    #[serde(default = "default_corruption")]
    corruption: CorruptionMode,
    estimators: EstimatorSection,
    #[serde(default)]
    campaign: Option<CampaignSection>,
    #[serde(default)]
    ut: Option<UtParams>,
}

fn default_corruption() -> CorruptionMode {
    CorruptionMode::None
}

/// Parses and validates a campaign configuration from TOML text.
pub fn parse_config(text: &str) -> Result<CampaignConfig> {
    let f: FileConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let camp = f.campaign.unwrap_or(CampaignSection { runs: default_runs(), seed: 0 });
    let cfg = CampaignConfig {
        scenario: f.scenario,
        corruption: f.corruption,
        estimators: f.estimators.list,
        runs: camp.runs,
        seed: camp.seed,
        particles: f.estimators.particles,
        ut: f.ut.unwrap_or_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<CampaignConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
