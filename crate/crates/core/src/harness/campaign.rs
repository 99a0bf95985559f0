//! Monte-Carlo campaigns: paired corruption per replicate, every estimator on
//! identical inputs, per-run metrics, CSV and JSON outputs.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bdm::{bdm_run, BdmConfig, BiasBelief};
use crate::emorf::{emorf_run, emors_run, perfect_rejector_update, EmorfConfig};
use crate::error::{Error, Result};
use crate::gaussian::{ggf_predict_at, ggf_update, rts_backward, UtParams};
use crate::map_ekf::{map_ekf_run, OutlierHypothesisPrior};
use crate::pf::{robust_pf_run, AbnormalityConfig, PfMode, PfPriors};
use crate::rng::replicate_seed;
use crate::sor::{sor_run, SorConfig};
use crate::ssm::{CorruptionEvent, GaussianBelief, StateSpaceModel};

use super::corrupt::{corrupt, Corrupted, CorruptionMode};
use super::metrics::{error_series, mse, quartiles, rmse, trmse, Quartiles};
use super::scenarios::{build_scenario, Scenario, ScenarioConfig, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Ukf,
    /// UKF followed by an RTS backward pass.
    Urts,
    Sor,
    Emorf,
    Emors,
    PerfectRejector,
    Bdm,
    MapEkf,
    RobustPf,
    BootstrapPf,
    IdealPf,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Ukf => "ukf",
            EstimatorKind::Urts => "urts",
            EstimatorKind::Sor => "sor",
            EstimatorKind::Emorf => "emorf",
            EstimatorKind::Emors => "emors",
            EstimatorKind::PerfectRejector => "perfect-rejector",
            EstimatorKind::Bdm => "bdm",
            EstimatorKind::MapEkf => "map-ekf",
            EstimatorKind::RobustPf => "robust-pf",
            EstimatorKind::BootstrapPf => "bootstrap-pf",
            EstimatorKind::IdealPf => "ideal-pf",
        }
    }

    pub fn is_smoother(&self) -> bool {
        matches!(self, EstimatorKind::Urts | EstimatorKind::Emors)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CampaignConfig {
    pub scenario: ScenarioConfig,
    pub corruption: CorruptionMode,
    pub estimators: Vec<EstimatorKind>,
    pub runs: usize,
    pub seed: u64,
    /// Particle count for the particle filters.
    pub particles: usize,
    pub ut: UtParams,
}

impl CampaignConfig {
    pub fn new(scenario: ScenarioConfig, corruption: CorruptionMode, estimators: Vec<EstimatorKind>, runs: usize, seed: u64) -> Self {
        Self { scenario, corruption, estimators, runs, seed, particles: 1000, ut: UtParams::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.corruption.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("campaign.runs must be positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        if self.particles < 2 {
            return Err(Error::Config("particles must be at least 2".into()));
        }
        Ok(())
    }
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: EstimatorKind,
    pub estimates: std::result::Result<Vec<DVector<f64>>, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub truth: Vec<DVector<f64>>,
    pub data: Corrupted,
    pub measurement_hash: String,
    pub runs: Vec<MethodRun>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunMetrics {
    pub replicate: usize,
    pub rmse_pos: Option<f64>,
    pub mse: Option<f64>,
    pub rmse_state: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
    /// Per-step state error norm.
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethodSummary {
    pub method: EstimatorKind,
    pub runs: Vec<RunMetrics>,
    pub rmse_pos: Quartiles,
    pub mse: Quartiles,
    pub rmse_state: Quartiles,
    pub trmse: Option<f64>,
    pub trmse_pos: Option<f64>,
    pub mean_seconds: f64,
    pub failures: usize,
}

impl MethodSummary {
    pub fn rmse_pos_values(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.rmse_pos).collect()
    }

    pub fn mse_values(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.mse).collect()
    }

    pub fn rmse_state_values(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.rmse_state).collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub scenario: ScenarioKind,
    pub corruption: String,
    pub k: usize,
    pub runs: usize,
    pub seed: u64,
    pub replicate_seeds: Vec<u64>,
    pub measurement_hashes: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub version: String,
}

impl MetricReport {
    pub fn method(&self, kind: EstimatorKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub report: MetricReport,
    pub replicates: Vec<ReplicateResult>,
}

/// SHA-256 over the little-endian bytes of the measurements and flags.
pub fn measurement_hash(ys: &[DVector<f64>], missing: &[Vec<bool>]) -> String {
    let mut h = Sha256::new();
    for y in ys {
        for v in y.iter() {
            h.update(v.to_le_bytes());
        }
    }
    for row in missing {
        h.update(row.iter().map(|&b| b as u8).collect::<Vec<u8>>());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// UKF pass returning filtered and predicted beliefs.
pub fn ukf_filter(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    prior: &GaussianBelief,
    params: &UtParams,
) -> Result<(Vec<GaussianBelief>, Vec<GaussianBelief>)> {
    let mut belief = prior.clone();
    let mut filtered = Vec::with_capacity(ys.len());
    let mut predicted = Vec::with_capacity(ys.len());
    let zero = DVector::zeros(model.m);
    for (k, y) in ys.iter().enumerate() {
        let pred = ggf_predict_at(&belief, model, k + 1, params)?;
        belief = ggf_update(&pred, y, model, &model.r_at(k + 1), &zero, params)?;
        filtered.push(belief.clone());
        predicted.push(pred);
    }
    Ok((filtered, predicted))
}

/// Abnormality model used by the particle filters for each scenario.
pub fn default_abnormality(kind: ScenarioKind, r: &DMatrix<f64>) -> Result<AbnormalityConfig> {
    let m = r.nrows();
    let rd = r.diagonal();
    let v = |x: &[f64]| DVector::from_column_slice(x);
    match kind {
        ScenarioKind::Growth1d => AbnormalityConfig::new(v(&[500.0 * 500.0 * 5.0]), v(&[0.01]), v(&[0.25]), v(&[-1000.0]), v(&[1000.0])),
        ScenarioKind::CvRangeBearing => AbnormalityConfig::new(
            rd.clone() * 500.0,
            v(&[4.0, 0.001]),
            v(&[0.01, 1e-8]),
            v(&[-1000.0, -std::f64::consts::PI]),
            v(&[1000.0, std::f64::consts::PI]),
        ),
        _ => AbnormalityConfig::new(
            rd.clone() * 1000.0,
            rd.clone(),
            rd.clone() * 0.01,
            DVector::from_element(m, -1000.0),
            DVector::from_element(m, 1000.0),
        ),
    }
}

fn means(bs: Vec<GaussianBelief>) -> Vec<DVector<f64>> {
    bs.into_iter().map(|b| b.mean).collect()
}

/// Runs one estimator on one replicate's corrupted data.
pub fn run_estimator(
    kind: EstimatorKind,
    sc: &Scenario,
    prior: &GaussianBelief,
    data: &Corrupted,
    cfg: &CampaignConfig,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let model = &sc.model;
    let ys = &data.measurements;
    let ut = &cfg.ut;
    match kind {
        EstimatorKind::Ukf => Ok(means(ukf_filter(model, ys, prior, ut)?.0)),
        EstimatorKind::Urts => {
            let (f, p) = ukf_filter(model, ys, prior, ut)?;
            Ok(means(rts_backward(&f, &p[1..], model, ut)?))
        }
        EstimatorKind::Sor => Ok(means(sor_run(model, ys, prior, &SorConfig::default(), ut)?.0)),
        EstimatorKind::Emorf => Ok(means(emorf_run(model, ys, prior, &EmorfConfig::default(), ut)?.0)),
        EstimatorKind::Emors => Ok(means(emors_run(model, ys, prior, &EmorfConfig::default(), ut)?.smoothed)),
        EstimatorKind::PerfectRejector => {
            let mut belief = prior.clone();
            let mut out = Vec::with_capacity(ys.len());
            for (k, y) in ys.iter().enumerate() {
                let pred = ggf_predict_at(&belief, model, k + 1, ut)?;
                let inlier: Vec<bool> = data.abnormal[k].iter().map(|a| !a).collect();
                belief = perfect_rejector_update(&pred, y, model, &model.r_at(k + 1), &inlier, ut)?;
                out.push(belief.mean.clone());
            }
            Ok(out)
        }
        EstimatorKind::Bdm => {
            let bcfg = BdmConfig::from_r(&model.r);
            let bias0 = BiasBelief::isotropic(model.m, 0.001);
            Ok(means(bdm_run(model, ys, prior, &bias0, &bcfg, ut)?.beliefs))
        }
        EstimatorKind::MapEkf => {
            let s2 = model.r.diagonal().max() * 1000.0;
            let hp = OutlierHypothesisPrior::uniform(model.m, 0.5, s2)?;
            Ok(means(map_ekf_run(model, ys, prior, &hp)?.0))
        }
        EstimatorKind::RobustPf | EstimatorKind::BootstrapPf | EstimatorKind::IdealPf => {
            let acfg = default_abnormality(sc.kind, &model.r)?;
            let priors = PfPriors {
                x0_mean: prior.mean.clone(),
                x0_cov: prior.cov.clone(),
                theta0_var: DVector::from_element(model.m, 0.001),
                regime0: [1.0 / 3.0; 3],
            };
            let mode = match kind {
                EstimatorKind::RobustPf => PfMode::Robust,
                EstimatorKind::BootstrapPf => PfMode::Bootstrap,
                _ => PfMode::Ideal(data.ideal.clone()),
            };
            Ok(robust_pf_run(model, ys, &priors, &acfg, cfg.particles, seed, &mode)?.estimates)
        }
    }
}

/// True states and corrupted measurements of one replicate.
pub fn replicate_data(cfg: &CampaignConfig, sc: &Scenario, replicate: usize) -> Result<(Vec<DVector<f64>>, Corrupted)> {
    let seed = replicate_seed(cfg.seed, replicate as u64);
    let x0 = sc.true_initial_state(seed)?;
    let traj = crate::ssm::simulate(&sc.model, &x0, cfg.scenario.k, seed)?;
    let data = corrupt(&traj.measurements, &sc.model.r, &cfg.corruption, replicate_seed(seed, 1))?;
    Ok((traj.states, data))
}

/// Builds, corrupts and filters one replicate.
pub fn run_replicate(cfg: &CampaignConfig, sc: &Scenario, replicate: usize) -> Result<ReplicateResult> {
    let seed = replicate_seed(cfg.seed, replicate as u64);
    let (truth, data) = replicate_data(cfg, sc, replicate)?;
    let prior = sc.filter_prior(seed)?;
    let hash = measurement_hash(&data.measurements, &data.missing);
    let runs = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(e, &kind)| {
            let t0 = Instant::now();
            let est = run_estimator(kind, sc, &prior, &data, cfg, replicate_seed(seed, 100 + e as u64));
            let seconds = t0.elapsed().as_secs_f64();
            let estimates = match est {
                Ok(v) if v.iter().all(|x| x.iter().all(|c| c.is_finite())) => Ok(v),
                Ok(_) => Err("non-finite estimate".to_string()),
                Err(e) => Err(e.to_string()),
            };
            if let Err(msg) = &estimates {
                log::warn!("replicate {replicate}: {} failed: {msg}", kind.name());
            }
            MethodRun { method: kind, estimates, seconds }
        })
        .collect();
    Ok(ReplicateResult { replicate, seed, truth, data, measurement_hash: hash, runs })
}

/// Runs every replicate (in parallel) and aggregates the metrics.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let sc = build_scenario(&cfg.scenario)?;
    let replicates = (0..cfg.runs)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &sc, r))
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(cfg, &sc, &replicates)?;
    Ok(CampaignResult { report, replicates })
}

fn summarize(cfg: &CampaignConfig, sc: &Scenario, reps: &[ReplicateResult]) -> Result<MetricReport> {
    let mut methods = Vec::with_capacity(cfg.estimators.len());
    for (e, &kind) in cfg.estimators.iter().enumerate() {
        let mut runs = Vec::with_capacity(reps.len());
        let mut ok_truth = Vec::new();
        let mut ok_est = Vec::new();
        let mut total_s = 0.0;
        for rep in reps {
            let mr = &rep.runs[e];
            total_s += mr.seconds;
            match &mr.estimates {
                Ok(est) => {
                    runs.push(RunMetrics {
                        replicate: rep.replicate,
                        rmse_pos: Some(rmse(&rep.truth, est, Some(&sc.pos_idx))?),
                        mse: Some(mse(&rep.truth, est, None)?),
                        rmse_state: Some(rmse(&rep.truth, est, None)?),
                        seconds: mr.seconds,
                        error: None,
                        series: error_series(&rep.truth, est, None)?,
                    });
                    ok_truth.push(rep.truth.clone());
                    ok_est.push(est.clone());
                }
                Err(msg) => runs.push(RunMetrics {
                    replicate: rep.replicate,
                    rmse_pos: None,
                    mse: None,
                    rmse_state: None,
                    seconds: mr.seconds,
                    error: Some(msg.clone()),
                    series: vec![],
                }),
            }
        }
        let failures = runs.iter().filter(|r| r.error.is_some()).count();
        let (tr, trp) = if ok_truth.is_empty() {
            (None, None)
        } else {
            (Some(trmse(&ok_truth, &ok_est, None)?), Some(trmse(&ok_truth, &ok_est, Some(&sc.pos_idx))?))
        };
        let vals = |f: fn(&RunMetrics) -> Option<f64>| runs.iter().filter_map(f).collect::<Vec<f64>>();
        methods.push(MethodSummary {
            method: kind,
            rmse_pos: quartiles(&vals(|r| r.rmse_pos)),
            mse: quartiles(&vals(|r| r.mse)),
            rmse_state: quartiles(&vals(|r| r.rmse_state)),
            trmse: tr,
            trmse_pos: trp,
            mean_seconds: total_s / reps.len().max(1) as f64,
            failures,
            runs,
        });
    }
    Ok(MetricReport {
        scenario: cfg.scenario.name,
        corruption: cfg.corruption.name().to_string(),
        k: cfg.scenario.k,
        runs: cfg.runs,
        seed: cfg.seed,
        replicate_seeds: reps.iter().map(|r| r.seed).collect(),
        measurement_hashes: reps.iter().map(|r| r.measurement_hash.clone()).collect(),
        methods,
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// Per-step CSV for one replicate.
pub fn steps_csv(rep: &ReplicateResult) -> Result<Vec<u8>> {
    let n = rep.truth.first().map(|x| x.len()).unwrap_or(0);
    let m = rep.data.measurements.first().map(|y| y.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("truth_{i}")));
    for mr in &rep.runs {
        header.extend((1..=n).map(|i| format!("est_{}_{i}", mr.method.name())));
    }
    header.extend((1..=m).map(|i| format!("flag_{i}")));
    w.write_record(&header)?;
    for k in 0..rep.truth.len() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(rep.truth[k].iter().map(|v| format!("{v:.10e}")));
        for mr in &rep.runs {
            match &mr.estimates {
                Ok(e) => row.extend(e[k].iter().map(|v| format!("{v:.10e}"))),
                Err(_) => row.extend((0..n).map(|_| "nan".to_string())),
            }
        }
        row.extend(rep.data.abnormal[k].iter().map(|&f| (f as u8).to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

/// Long-form `method,replicate,k,rmse` table over all runs.
pub fn long_csv(report: &MetricReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "replicate", "k", "rmse"])?;
    for m in &report.methods {
        for r in &m.runs {
            for (k, v) in r.series.iter().enumerate() {
                w.write_record([m.method.name().to_string(), r.replicate.to_string(), (k + 1).to_string(), format!("{v:.10e}")])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

pub fn corruption_log_csv(log: &[CorruptionEvent]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in log {
        w.serialize(e)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

/// Writes `summary.json`, `rmse_long.csv` and per-replicate step and
/// corruption-log CSVs into `dir`.
pub fn write_outputs(result: &CampaignResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &result.report)?;
    f.write_all(b"\n")?;
    fs::write(dir.join("rmse_long.csv"), long_csv(&result.report)?)?;
    for rep in &result.replicates {
        fs::write(dir.join(format!("steps_r{:03}.csv", rep.replicate)), steps_csv(rep)?)?;
        fs::write(dir.join(format!("corruption_r{:03}.csv", rep.replicate)), corruption_log_csv(&rep.data.log)?)?;
    }
    Ok(())
}
