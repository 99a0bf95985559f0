use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use robust_filters::bounds::{bcrb_filter, bcrb_smoother, state_samples};
use robust_filters::harness::campaign::{replicate_data, write_outputs};
use robust_filters::harness::metrics::median;
use robust_filters::harness::{build_scenario, load_config, run_campaign, CampaignConfig, EstimatorKind, MetricReport};
use robust_filters::perception::{
    parse_correspondences, register_point_clouds, synthetic_registration, HeuristicKind, HeuristicParams,
};
use robust_filters::rng::replicate_seed;
use robust_filters::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "robust-filters", version, about = "Robust filtering benchmarks and registration")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Campaign configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the campaign seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of Monte-Carlo runs.
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes truth, corrupted measurements and corruption logs.
    Simulate,
    /// Runs the configured filters.
    Filter,
    /// Runs the configured smoothers.
    Smooth,
    /// Runs every configured estimator.
    Bench,
    /// Hard-rejection BCRB for filtering and smoothing on the first replicate.
    Bounds {
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Robust point-cloud registration.
    Register(RegisterArgs),
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Correspondence file with `px py pz qx qy qz` per line.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate synthetic problems instead of reading a file.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value = "esor", value_parser = parse_heuristic)]
    method: HeuristicKind,
    /// Inlier noise standard deviation.
    #[arg(long, default_value_t = 0.001)]
    sigma: f64,
    /// Inlier threshold on whitened squared residuals.
    #[arg(long, default_value_t = 11.345)]
    chi: f64,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
}

fn parse_heuristic(s: &str) -> std::result::Result<HeuristicKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "eror" => Ok(HeuristicKind::Eror),
        "esor" => Ok(HeuristicKind::Esor),
        "asor" => Ok(HeuristicKind::Asor),
        "ror" => Ok(HeuristicKind::Ror),
        _ => Err(format!("unknown method {s:?}; expected eror, esor, asor or ror")),
    }
}

fn campaign_config(g: &Global) -> Result<CampaignConfig> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = g.runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &MetricReport) {
    println!(
        "{} / {}  K={} runs={} seed={}",
        report.scenario.name(),
        report.corruption,
        report.k,
        report.runs,
        report.seed
    );
    println!("{:<18} {:>12} {:>12} {:>12} {:>12} {:>9} {:>6}", "method", "rmse_pos", "mse", "trmse", "trmse_pos", "mean_s", "fail");
    for m in &report.methods {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<18} {:>12.4} {:>12.4} {:>12} {:>12} {:>9.4} {:>6}",
            m.method.name(),
            m.rmse_pos.median,
            m.mse.median,
            opt(m.trmse),
            opt(m.trmse_pos),
            m.mean_seconds,
            m.failures
        );
    }
}

fn run_selected(g: &Global, keep: impl Fn(&EstimatorKind) -> bool, what: &str) -> Result<()> {
    let mut cfg = campaign_config(g)?;
    cfg.estimators.retain(|k| keep(k));
    if cfg.estimators.is_empty() {
        return Err(Error::Config(format!("no {what} listed under [estimators]")));
    }
    let result = run_campaign(&cfg)?;
    write_outputs(&result, &g.out)?;
    if !g.quiet {
        print_report(&result.report);
        println!("outputs written to {}", g.out.display());
    }
    Ok(())
}

fn simulate(g: &Global) -> Result<()> {
    let cfg = campaign_config(g)?;
    let sc = build_scenario(&cfg.scenario)?;
    fs::create_dir_all(&g.out)?;
    for r in 0..cfg.runs {
        let (truth, data) = replicate_data(&cfg, &sc, r)?;
        let mut w = csv::Writer::from_path(g.out.join(format!("sim_r{r:03}.csv")))?;
        let n = sc.model.n;
        let m = sc.model.m;
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("truth_{i}")));
        header.extend((1..=m).map(|i| format!("y_{i}")));
        header.extend((1..=m).map(|i| format!("flag_{i}")));
        w.write_record(&header)?;
        for k in 0..truth.len() {
            let mut row = vec![(k + 1).to_string()];
            row.extend(truth[k].iter().map(|v| format!("{v:.10e}")));
            row.extend(data.measurements[k].iter().map(|v| format!("{v:.10e}")));
            row.extend(data.abnormal[k].iter().map(|&f| (f as u8).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut lw = csv::Writer::from_path(g.out.join(format!("corruption_r{r:03}.csv")))?;
        for e in &data.log {
            lw.serialize(e)?;
        }
        lw.flush()?;
    }
    if !g.quiet {
        println!("{} replicate(s) written to {}", cfg.runs, g.out.display());
    }
    Ok(())
}

fn bounds(g: &Global, samples: usize) -> Result<()> {
    let cfg = campaign_config(g)?;
    let sc = build_scenario(&cfg.scenario)?;
    let (_, data) = replicate_data(&cfg, &sc, 0)?;
    let kept: Vec<Vec<bool>> = data.abnormal.iter().map(|row| row.iter().map(|a| !a).collect()).collect();
    let xs = state_samples(&sc.model, &sc.x0, &sc.p0, cfg.scenario.k, samples, replicate_seed(cfg.seed, 0))?;
    let j0 = sc.p0.clone().try_inverse().ok_or(Error::Singular("initial covariance"))?;
    let (filt, terms) = bcrb_filter(&sc.model, &kept, &xs, &j0)?;
    let smooth = bcrb_smoother(&filt, &terms)?;
    let pos_trace = |p: &DMatrix<f64>| sc.pos_idx.iter().map(|&i| p[(i, i)]).sum::<f64>();
    fs::create_dir_all(&g.out)?;
    let mut w = csv::Writer::from_path(g.out.join("bounds.csv"))?;
    w.write_record(["k", "filter_trace", "filter_pos_trace", "smoother_trace", "smoother_pos_trace"])?;
    for k in 0..filt.bcrb.len() {
        w.write_record([
            (k + 1).to_string(),
            format!("{:.10e}", filt.bcrb[k].trace()),
            format!("{:.10e}", pos_trace(&filt.bcrb[k])),
            format!("{:.10e}", smooth.bcrb[k].trace()),
            format!("{:.10e}", pos_trace(&smooth.bcrb[k])),
        ])?;
    }
    w.flush()?;
    if !g.quiet {
        let mean = |v: &[DMatrix<f64>]| v.iter().map(|p| p.trace()).sum::<f64>() / v.len().max(1) as f64;
        println!("mean BCRB trace: filter {:.6} smoother {:.6}", mean(&filt.bcrb), mean(&smooth.bcrb));
        println!("bounds written to {}", g.out.join("bounds.csv").display());
    }
    Ok(())
}

fn register(g: &Global, a: &RegisterArgs) -> Result<()> {
    let params = HeuristicParams::new(a.method, a.chi);
    if let Some(path) = &a.input {
        let (p, q) = parse_correspondences(&fs::read_to_string(path)?)?;
        let res = register_point_clouds(&p, &q, a.sigma, &params, None)?;
        write_registration(&g.out, &res.rotation, &res.translation)?;
        if !g.quiet {
            println!("iterations {}", res.iterations);
            println!("rotation\n{}", res.rotation);
            println!("translation {:?}", res.translation.as_slice());
        }
        return Ok(());
    }
    if !a.synthetic {
        return Err(Error::Config("register needs --input FILE or --synthetic".into()));
    }
    let runs = g.runs.unwrap_or(20);
    let seed = g.seed.unwrap_or(0);
    let mut rot = Vec::with_capacity(runs);
    let mut trans = Vec::with_capacity(runs);
    for r in 0..runs {
        let s = synthetic_registration(a.points, a.ratio, a.sigma, replicate_seed(seed, r as u64))?;
        match register_point_clouds(&s.p, &s.q, a.sigma, &params, Some((&s.rotation, &s.translation))) {
            Ok(res) => {
                rot.push(res.rotation_error_deg.unwrap_or(f64::NAN));
                trans.push(res.translation_error.unwrap_or(f64::NAN));
            }
            Err(e) => {
                log::warn!("run {r}: {e}");
                rot.push(f64::INFINITY);
                trans.push(f64::INFINITY);
            }
        }
    }
    if !g.quiet {
        println!(
            "{} ratio {:.2}: median rotation error {:.4} deg, median translation error {:.5} over {runs} runs",
            a.method.name(),
            a.ratio,
            median(&rot),
            median(&trans)
        );
    }
    Ok(())
}

fn write_registration(dir: &Path, r: &nalgebra::Matrix3<f64>, t: &nalgebra::Vector3<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let body = serde_json::json!({
        "rotation": [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
        "translation": [t[0], t[1], t[2]],
    });
    fs::write(dir.join("registration.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let res = match &cli.cmd {
        Command::Simulate => simulate(g),
        Command::Filter => run_selected(g, |k| !k.is_smoother(), "filters"),
        Command::Smooth => run_selected(g, |k| k.is_smoother(), "smoothers"),
        Command::Bench => run_selected(g, |_| true, "estimators"),
        Command::Bounds { samples } => bounds(g, *samples),
        Command::Register(a) => register(g, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
