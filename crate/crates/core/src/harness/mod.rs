//! Simulation harness: scenarios, corruption, metrics and campaigns.

pub mod campaign;
pub mod config;
pub mod corrupt;
pub mod metrics;
pub mod scenarios;

pub use campaign::{run_campaign, CampaignConfig, CampaignResult, EstimatorKind, MetricReport};
pub use config::{load_config, parse_config};
pub use corrupt::{corrupt, Corrupted, CorruptionMode};
pub use scenarios::{build_scenario, make_scenario, Scenario, ScenarioConfig, ScenarioKind};
