use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptive_sandwich::config::{table1_cell, StudyConfig, TrialConfig};
use adaptive_sandwich::diagnostics::{
    bernstein_check, clt_check, invariance_scan, strictly_dominates, wlln_check, BoundedFunctional,
};
use adaptive_sandwich::estimators::{fit_theta_scaled, PsiScale};
use adaptive_sandwich::montecarlo::{
    emit_table, estimate_theta_star, oracle_plan, run_grid, GridOptions, ThetaStarCache, MIN_ORACLE_N,
};
use adaptive_sandwich::policy::PolicySpec;
use adaptive_sandwich::report::EstimateDoc;
use adaptive_sandwich::rng::SeedPlan;
use adaptive_sandwich::simulator::run_trial;
use adaptive_sandwich::trajectory::TrajectorySet;
use adaptive_sandwich::variance::{variance_report, VarianceChoice};
use adaptive_sandwich::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

const MANIFEST_FILE: &str = "manifest.json";
const RESOLVED_CONFIG_FILE: &str = "config.toml";
const CHECK_FILE: &str = "check.json";
const THETA_STAR_FILE: &str = "theta_star.json";

#[derive(Parser, Debug)]
#[command(name = "adsw", version, about = "Adaptive-trial simulation and sandwich variance estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one trial and write its trajectories.
    Simulate {
        /// Config file or preset name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        rep: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit theta and its variance estimates from simulated trajectories.
    Estimate {
        /// Directory written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = VarianceArg::Both)]
        variance: VarianceArg,
        #[arg(long, value_enum, default_value_t = ScaleArg::Unscaled)]
        psi_scale: ScaleArg,
    },
    /// Monte Carlo coverage over a grid of cells.
    Mc {
        /// Config file or preset name (`paper_table1`, `uniform_control`).
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[arg(long, default_value_t = MIN_ORACLE_N)]
        oracle_n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Statistical checks of the limit theory.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Replications per suite; defaults to 2000 (bernstein, clt) or 500 (invariance).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 20240)]
        seed: u64,
        #[arg(long, default_value_t = MIN_ORACLE_N)]
        oracle_n: usize,
        /// Bounded functional for the Bernstein suite: zero, one, constant:C, clip:LO:HI.
        #[arg(long, default_value = "clip:-3:3")]
        functional: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VarianceArg {
    Sandwich,
    Adaptive,
    Both,
}

impl From<VarianceArg> for VarianceChoice {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Sandwich => VarianceChoice::Sandwich,
            VarianceArg::Adaptive => VarianceChoice::Adaptive,
            VarianceArg::Both => VarianceChoice::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Unscaled,
    PerDecision,
}

impl From<ScaleArg> for PsiScale {
    fn from(v: ScaleArg) -> Self {
        match v {
            ScaleArg::Unscaled => PsiScale::Unscaled,
            ScaleArg::PerDecision => PsiScale::PerDecision,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Bernstein,
    Clt,
    Invariance,
    Wlln,
    All,
}

enum Failure {
    Lib(Error),
    /// A diagnostic suite ran and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Simulate { config, seed, rep, out } => {
            let mut study = StudyConfig::load(&config)?;
            if study.grid.is_some() {
                log::warn!("simulate ignores the grid in {config}; using the base trial");
            }
            if let Some(s) = seed {
                study.base.master_seed = s;
            }
            let cfg = study.base;
            log::info!("simulating n={} T={} seed={} rep={rep}", cfg.n_users, cfg.horizon, cfg.master_seed);
            let traj = run_trial(&cfg, SeedPlan::new(cfg.master_seed, rep))?;
            traj.write_dir(&out)?;
            write_manifest(&out, &argv, &cfg.to_toml_string(), json!({ "master_seed": cfg.master_seed, "rep": rep }))
        }
        Command::Estimate {
            input,
            out,
            alpha,
            variance,
            psi_scale,
        } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::Usage(format!("alpha must lie in (0, 1), got {alpha}")).into());
            }
            let traj = TrajectorySet::read_dir(&input)?;
            let est = fit_theta_scaled(&traj, psi_scale.into())?;
            let report = variance_report(&traj, &est, variance.into(), alpha)?;
            let doc = EstimateDoc::new(&traj, &est, &report);
            doc.write(&out)?;
            let inputs = input_config(&input);
            write_manifest(&out, &argv, &inputs, json!({ "input": input, "alpha": alpha, "variance": format!("{variance:?}").to_lowercase(), "psi_scale": format!("{psi_scale:?}").to_lowercase() }))
        }
        Command::Mc {
            config,
            reps,
            oracle_n,
            seed,
            alpha,
            out,
            jobs,
        } => {
            init_pool(jobs)?;
            let mut study = StudyConfig::load(&config)?;
            if let Some(s) = seed {
                study.base.master_seed = s;
            }
            let opts = GridOptions { reps, oracle_n, alpha };
            let cache = ThetaStarCache::new();
            let runs = run_grid(&study, opts, &cache, |key, run| {
                log::info!(
                    "kappa1={} rho={} n={}: sandwich {:.4} adaptive {:.4} ({} reps, {} aborted)",
                    key.kappa1,
                    key.rho,
                    key.n_users,
                    run.cell.coverage_sandwich,
                    run.cell.coverage_adaptive,
                    run.cell.reps_completed,
                    run.cell.reps_aborted
                );
            })?;
            let cells: Vec<_> = runs.iter().map(|r| r.cell.clone()).collect();
            emit_table(&cells, &out)?;
            write_json(&out.join(THETA_STAR_FILE), &json!(cache.snapshot()))?;
            write_manifest(
                &out,
                &argv,
                &study.to_toml_string(),
                json!({ "master_seed": study.base.master_seed, "reps": reps, "oracle_n": oracle_n, "alpha": alpha }),
            )
        }
        Command::Check {
            suite,
            reps,
            seed,
            oracle_n,
            functional,
            out,
            jobs,
        } => {
            init_pool(jobs)?;
            let f = BoundedFunctional::parse(&functional)?;
            let (results, failures) = run_checks(suite, reps, seed, oracle_n, f)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join(CHECK_FILE), &results)?;
            write_manifest(
                &out,
                &argv,
                &table1_cell(1.0, 1.0, 500).to_toml_string(),
                json!({ "master_seed": seed, "suite": format!("{suite:?}").to_lowercase(), "oracle_n": oracle_n }),
            )?;
            if failures.is_empty() {
                Ok(())
            } else {
                Err(Failure::Check(failures.join("; ")))
            }
        }
    }
}

fn run_checks(
    suite: Suite,
    reps: Option<usize>,
    seed: u64,
    oracle_n: usize,
    f: BoundedFunctional,
) -> CliResult<(serde_json::Value, Vec<String>)> {
    let wants = |s: Suite| suite == Suite::All || suite == s;
    let mut results = serde_json::Map::new();
    let mut failures = Vec::new();
    let seeded = |mut c: TrialConfig| {
        c.master_seed = seed;
        c
    };

    if wants(Suite::Bernstein) {
        let mut cfg = seeded(table1_cell(1.0, 1.0, 100));
        cfg.horizon = 5;
        let r = bernstein_check(&cfg, &f, reps.unwrap_or(2000), None)?;
        log::info!("bernstein: {} violations over {} thresholds", r.violations, r.rows.len());
        if !r.passed {
            failures.push(format!("bernstein: {} violations", r.violations));
        }
        results.insert("bernstein".into(), json!(r));
    }
    if wants(Suite::Clt) {
        let cfg = seeded(table1_cell(1.0, 1.0, 500));
        let theta_star = estimate_theta_star(&cfg, oracle_n, oracle_plan(seed))?;
        let r = clt_check(&cfg, reps.unwrap_or(2000), &theta_star)?;
        log::info!("clt: ks {:.4} (threshold {:.4}), variance {:.3}", r.ks, r.ks_threshold, r.variance);
        if !r.passed {
            failures.push(format!("clt: ks {:.4} > {:.4}", r.ks, r.ks_threshold));
        }
        results.insert("clt".into(), json!(r));
    }
    if wants(Suite::Invariance) {
        let steep = seeded(table1_cell(5.0, 5.0, 500));
        let flat = seeded(table1_cell(5.0, 0.5, 500));
        let mut uniform = flat.clone();
        uniform.policy = PolicySpec::constant_uniform(flat.policy.pi_min);
        let profiles = invariance_scan(&[steep, flat, uniform], reps.unwrap_or(500))?;
        let dominates = strictly_dominates(&profiles[0].mean_norms, &profiles[1].mean_norms);
        let uniform_zero = profiles[2].mean_norms.iter().all(|&v| v == 0.0);
        log::info!("invariance: rho=5 dominates rho=0.5: {dominates}; uniform profile zero: {uniform_zero}");
        if !dominates {
            failures.push("invariance: rho=5 profile does not dominate rho=0.5".into());
        }
        if !uniform_zero {
            failures.push("invariance: constant_uniform profile is not zero".into());
        }
        results.insert(
            "invariance".into(),
            json!({ "profiles": profiles, "dominates": dominates, "uniform_zero": uniform_zero }),
        );
    }
    if wants(Suite::Wlln) {
        let cfg = seeded(table1_cell(1.0, 1.0, 10_000));
        let r = wlln_check(&cfg, oracle_n, 10_000)?;
        log::info!("wlln: weighted {:.4} vs target {:.4} (z {:.2})", r.weighted_mean, r.target_mean, r.z);
        if !r.passed {
            failures.push(format!("wlln: z = {:.2}", r.z));
        }
        results.insert("wlln".into(), json!(r));
    }
    Ok((serde_json::Value::Object(results), failures))
}

fn init_pool(jobs: usize) -> CliResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} worker threads: {e}")).into())
}

/// The resolved config saved by `simulate`, or empty when absent.
fn input_config(input: &Path) -> String {
    std::fs::read_to_string(input.join(RESOLVED_CONFIG_FILE)).unwrap_or_else(|_| {
        log::warn!("{} has no {RESOLVED_CONFIG_FILE}; manifest records the input path only", input.display());
        String::new()
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

/// Records the command line, crate version and resolved config so the run
/// can be repeated exactly.
fn write_manifest(out: &Path, argv: &[String], resolved_config: &str, extra: serde_json::Value) -> CliResult {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if !resolved_config.is_empty() {
        let path = out.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, resolved_config).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "argv": argv,
        "config_file": if resolved_config.is_empty() { None } else { Some(RESOLVED_CONFIG_FILE) },
        "config": resolved_config,
        "parameters": extra,
    });
    write_json(&out.join(MANIFEST_FILE), &manifest)
}
