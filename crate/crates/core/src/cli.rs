//! Command-line front end: `run`, `study` and `validate`.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for invalid
//! arguments or configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{parse_dts, parse_grid, RunConfig};
use crate::error::{KsError, Result};
use crate::harness::{comparison_study, versions, Experiment, ExperimentName, StudyOptions, PRESET_EPS_TRAIN};
use crate::integrate::{
    linearized_step, run, write_diagnostics_csv, RunHooks, StepDiagnostics, StepperKind, PRNG_ID,
};
use crate::linsolve::SolveMethod;
use crate::mesh::{save_field_csv, Field, Mesh};
use crate::scheme::{assemble_c_system, assemble_u_system, audit_m_matrix, limiter_s, Variant};
use crate::slnn::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "kschem", version, about = "Keller-Segel finite-volume solvers with network-linearized time stepping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Single simulation: diagnostics, field snapshots and meta.json.
    Run(CommonArgs),
    /// Method comparison and convergence tables over a list of step sizes.
    Study(CommonArgs),
    /// Check a configuration and the invariants of its first step.
    Validate(CommonArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON config (a run's meta.json also works); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// embryonic, growth_quadratic, volume_filling or growth_cubic.
    #[arg(long)]
    pub experiment: Option<String>,
    /// semi_implicit, estli or sstli.
    #[arg(long)]
    pub stepper: Option<String>,
    /// Comma-separated steppers for `study`.
    #[arg(long)]
    pub steppers: Option<String>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Comma-separated, strictly decreasing step sizes for `study`.
    #[arg(long)]
    pub dts: Option<String>,
    #[arg(long = "t-final")]
    pub t_final: Option<f64>,
    /// Cells as NXxNY, e.g. 50x25.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chi: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// direct or krylov.
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long = "solver-tol")]
    pub solver_tol: Option<f64>,
    #[arg(long = "eps-train")]
    pub eps_train: Option<f64>,
    #[arg(long = "train-max-iter")]
    pub train_max_iter: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference-solution cache for `study`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Full-size grids and horizons; long runtimes.
    #[arg(long)]
    pub full: bool,
    #[arg(long = "clamp-prediction-nonneg")]
    pub clamp_prediction_nonneg: bool,
    /// Intermediate snapshots besides t=0 and t=T.
    #[arg(long, default_value_t = 0)]
    pub snapshots: usize,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl CommonArgs {
    fn to_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut solver = base.solver;
        if self.solver.is_some() || self.solver_tol.is_some() {
            let mut s = solver.unwrap_or_default();
            if let Some(m) = &self.solver {
                s.method = match m.as_str() {
                    "direct" | "lu" => SolveMethod::DirectLu,
                    "krylov" | "bicgstab" => SolveMethod::IterativeKrylov,
                    other => return Err(KsError::InvalidParameter(format!("unknown solver '{other}'"))),
                };
            }
            if let Some(t) = self.solver_tol {
                s.tol = t;
            }
            solver = Some(s);
        }
        let mut train = base.train;
        if self.eps_train.is_some() || self.train_max_iter.is_some() {
            let mut t = train.unwrap_or(TrainConfig { eps_train: PRESET_EPS_TRAIN, ..TrainConfig::default() });
            if let Some(e) = self.eps_train {
                t.eps_train = e;
            }
            if let Some(m) = self.train_max_iter {
                t.max_iter = m;
            }
            train = Some(t);
        }
        let flags = RunConfig {
            experiment: self.experiment.as_deref().map(str::parse::<ExperimentName>).transpose()?,
            model: None,
            stepper: self.stepper.as_deref().map(str::parse::<StepperKind>).transpose()?,
            steppers: self
                .steppers
                .as_deref()
                .map(|s| s.split(',').map(|t| t.trim().parse::<StepperKind>()).collect::<Result<Vec<_>>>())
                .transpose()?,
            dt: self.dt,
            dts: self.dts.as_deref().map(parse_dts).transpose()?,
            t_final: self.t_final,
            grid: self.grid.as_deref().map(parse_grid).transpose()?,
            seed: self.seed,
            chi: self.chi,
            beta: self.beta,
            solver,
            train,
            out_dir: self.out.clone(),
            cache_dir: self.cache.clone(),
            full: self.full,
            clamp_prediction_nonneg: self.clamp_prediction_nonneg,
            snapshots: self.snapshots,
            workers: self.workers,
            repeats: self.repeats,
        };
        Ok(base.overridden_by(flags))
    }
}

/// Failure split by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(KsError),
    Runtime(KsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e}"),
        }
    }
}

/// Parses `argv` and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: &Command) -> std::result::Result<(), CliError> {
    match cmd {
        Command::Run(a) => {
            let cfg = a.to_config().map_err(CliError::Config)?;
            cmd_run(&cfg)
        }
        Command::Study(a) => {
            let cfg = a.to_config().map_err(CliError::Config)?;
            cmd_study(&cfg)
        }
        Command::Validate(a) => {
            let cfg = a.to_config().map_err(CliError::Config)?;
            cmd_validate(&cfg)
        }
    }
}

struct SnapshotHooks<'a> {
    mesh: &'a Mesh,
    dir: PathBuf,
    at: Vec<usize>,
    diagnostics: Vec<StepDiagnostics>,
}

impl RunHooks for SnapshotHooks<'_> {
    fn on_step(&mut self, diag: &StepDiagnostics, u: &Field, _c: Option<&Field>) -> Result<()> {
        if self.at.contains(&diag.step) {
            save_field_csv(self.mesh, u, &self.dir.join(format!("u_step{:06}.csv", diag.step)))?;
        }
        self.diagnostics.push(diag.clone());
        Ok(())
    }
}

/// Step indices of `k` equispaced intermediate snapshots plus the last step.
pub fn snapshot_steps(total: usize, k: usize) -> Vec<usize> {
    let mut at: Vec<usize> = (1..=k).map(|i| (i * total) / (k + 1)).filter(|&s| s > 0 && s < total).collect();
    at.push(total);
    at.dedup();
    at
}

#[derive(Serialize)]
struct TrainingEntry {
    step: usize,
    iterations: usize,
    mse: f64,
    stop: &'static str,
}

#[derive(Serialize)]
struct RunMetaFile<'a> {
    kind: &'static str,
    status: &'static str,
    config: &'a RunConfig,
    experiment: &'a Experiment,
    prng: &'static str,
    versions: std::collections::BTreeMap<&'static str, &'static str>,
    error: Option<String>,
    failed_step: Option<usize>,
    steps: Option<usize>,
    trainings: Option<usize>,
    short_final_step: Option<bool>,
    wall_seconds: Option<f64>,
    training_reports: Vec<TrainingEntry>,
}

fn default_out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(name))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| KsError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_run(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    let exp = cfg.experiment().map_err(CliError::Config)?;
    let (stepper, dt) = cfg.run_choice(&exp).map_err(CliError::Config)?;
    let opts = exp.run_options(stepper, dt, 0);
    opts.validate().map_err(CliError::Config)?;
    let resolved = cfg.resolved(&exp, stepper, dt);
    let out = default_out(cfg, "kschem-run");
    let fields = out.join("fields");
    fs::create_dir_all(&fields).map_err(|e| CliError::Runtime(e.into()))?;

    let mesh = exp.mesh().map_err(CliError::Config)?;
    let (u0, c0) = exp.initial_data(&mesh);
    let total = crate::integrate::TimeGrid::new(dt, exp.t_final).map_err(CliError::Config)?.total_steps();
    let mut hooks = SnapshotHooks { mesh: &mesh, dir: fields.clone(), at: snapshot_steps(total, cfg.snapshots), diagnostics: Vec::new() };
    let result = save_field_csv(&mesh, &u0, &fields.join(format!("u_step{:06}.csv", 0)))
        .and_then(|_| run(&exp.model, &mesh, &opts, &u0, c0.as_ref(), &mut hooks));

    let mut meta = RunMetaFile {
        kind: "run",
        status: "ok",
        config: &resolved,
        experiment: &exp,
        prng: PRNG_ID,
        versions: versions(),
        error: None,
        failed_step: None,
        steps: None,
        trainings: None,
        short_final_step: None,
        wall_seconds: None,
        training_reports: Vec::new(),
    };
    let write_diag = |rows: &[StepDiagnostics]| -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(out.join("diagnostics.csv"))?);
        write_diagnostics_csv(rows, &mut f)?;
        f.flush()?;
        Ok(())
    };
    match result {
        Ok(summary) => {
            meta.steps = Some(summary.steps);
            meta.trainings = Some(summary.trainings);
            meta.short_final_step = Some(summary.short_final_step);
            meta.wall_seconds = Some(summary.wall_seconds);
            meta.training_reports = summary
                .train_reports
                .iter()
                .map(|(step, r)| TrainingEntry { step: *step, iterations: r.iterations, mse: r.mse, stop: r.stop.as_str() })
                .collect();
            let io = write_diag(&summary.diagnostics)
                .and_then(|_| save_field_csv(&mesh, &summary.u_final, &out.join("u_final.csv")))
                .and_then(|_| match &summary.c_final {
                    Some(c) => save_field_csv(&mesh, c, &out.join("c_final.csv")),
                    None => Ok(()),
                })
                .and_then(|_| write_json(&out.join("meta.json"), &meta));
            io.map_err(CliError::Runtime)?;
            println!(
                "{} {} dt={} steps={} trainings={} min_u={:.6e} wall={:.3}s -> {}",
                exp.name.as_str(),
                stepper.as_str(),
                dt,
                summary.steps,
                summary.trainings,
                summary.u_final.min(),
                summary.wall_seconds,
                out.display()
            );
            Ok(())
        }
        Err(e) => {
            meta.status = "failed";
            meta.error = Some(e.to_string());
            if let KsError::StepFailed { step, .. } = &e {
                meta.failed_step = Some(*step);
            }
            let _ = write_diag(&hooks.diagnostics);
            let _ = write_json(&out.join("meta.json"), &meta);
            Err(CliError::Runtime(e))
        }
    }
}

fn cmd_study(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    let exp = cfg.experiment().map_err(CliError::Config)?;
    let steppers = cfg.steppers.clone().unwrap_or_else(|| StepperKind::ALL.to_vec());
    if steppers.is_empty() {
        return Err(CliError::Config(KsError::InvalidParameter("no steppers requested".into())));
    }
    let out = default_out(cfg, "kschem-study");
    let opts = StudyOptions {
        workers: cfg.workers.unwrap_or(1),
        repeats: cfg.repeats.unwrap_or(1),
        cache_dir: Some(cfg.cache_dir.clone().unwrap_or_else(|| out.join("cache"))),
        out_dir: Some(out.clone()),
    };
    let result = comparison_study(&exp, &steppers, &opts).map_err(CliError::Runtime)?;
    println!(
        "{:<14} {:>8} {:>7} {:>9} {:>12} {:>9} {:>9} {:>10}",
        "stepper", "dt", "steps", "trainings", "l2_error", "wall_s", "gamma_%", "network_s"
    );
    for r in &result.rows {
        println!(
            "{:<14} {:>8} {:>7} {:>9} {:>12.4e} {:>9.3} {:>9} {:>10.4}",
            r.stepper.as_str(),
            r.dt,
            r.steps,
            r.trainings,
            r.l2_error,
            r.wall_s,
            r.gamma_pct.map(|g| format!("{g:.1}")).unwrap_or_default(),
            r.network_s
        );
    }
    for (s, fit) in &result.fits {
        println!("order {:<14} {:.3}", s.as_str(), fit.slope);
    }
    println!("-> {}", out.display());
    Ok(())
}

fn cmd_validate(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    let exp = cfg.experiment().map_err(CliError::Config)?;
    let (stepper, dt) = cfg.run_choice(&exp).map_err(CliError::Config)?;
    exp.run_options(stepper, dt, 0).validate().map_err(CliError::Config)?;
    let checks = validation_checks(&exp, dt).map_err(CliError::Runtime)?;
    let mut failed = 0;
    for (name, ok) in &checks {
        println!("{} {name}", if *ok { "ok  " } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed > 0 {
        return Err(CliError::Runtime(KsError::InvalidState(format!("{failed} validation check(s) failed"))));
    }
    Ok(())
}

/// Invariant checks on the initial data and the first semi-implicit step.
pub fn validation_checks(exp: &Experiment, dt: f64) -> Result<Vec<(String, bool)>> {
    let mesh = exp.mesh()?;
    let (u0, c0) = exp.initial_data(&mesh);
    let model = &exp.model;
    let mut checks = Vec::new();
    checks.push((format!("mesh has {} cells", mesh.num_cells()), mesh.num_cells() == exp.nx * exp.ny));
    checks.push(("initial density finite and nonnegative".into(), u0.is_finite() && u0.min() >= 0.0));

    let c_sys = match model.variant {
        Variant::Embryonic => assemble_c_system(&mesh, model, &u0, None, None)?,
        _ => assemble_c_system(&mesh, model, &u0, c0.as_ref(), Some(dt))?,
    };
    checks.push(("c-matrix is an M-matrix".into(), audit_m_matrix(&c_sys.matrix).passes()));
    let (u1, c1) = linearized_step(&mesh, model, &u0, c0.as_ref(), None, dt, &exp.solver)?;
    let c1 = c1.expect("concentration is always computed");
    let u_sys = assemble_u_system(&mesh, model, &c1, &u0, Some(&u0), dt)?;
    checks.push(("u-matrix is an M-matrix".into(), audit_m_matrix(&u_sys.matrix).passes()));
    checks.push(("first step finite and nonnegative".into(), u1.is_finite() && u1.min() >= 0.0));
    if model.variant == Variant::Embryonic {
        let m0 = mesh.integral(&u0.values);
        let m1 = mesh.integral(&u1.values);
        checks.push(("first step conserves mass".into(), ((m1 - m0) / m0).abs() <= 1e-10));
    }
    let eps = model.eps_s;
    let limiter_ok = (-1000..=1000).map(|i| i as f64 * 0.01).all(|x| {
        let s = limiter_s(x, model.d_u, 1.0, eps);
        (s - limiter_s(-x, model.d_u, 1.0, eps) - x).abs() <= 1e-12 * x.abs().max(1.0)
    });
    checks.push(("limiter identity S(x) - S(-x) = x".into(), limiter_ok));
    Ok(checks)
}
