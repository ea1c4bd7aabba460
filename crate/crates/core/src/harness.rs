//! Experiment presets, seeded initial data, reference solutions, error
//! metrics, order fits and method-comparison studies.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KsError, Result};
use crate::integrate::{run, NoHooks, RunOptions, RunSummary, StepperKind, PRNG_ID};
use crate::linsolve::SolverConfig;
use crate::mesh::{load_field_csv, save_field_csv, Field, Mesh, Quantity, Rect};
use crate::scheme::{GrowthTerm, ModelSpec};
use crate::slnn::TrainConfig;

/// Number of uniform draws averaged per perturbed cell.
pub const ALPHA_DRAWS: usize = 10;

/// Training goal of the presets. With a goal of `1e-3` the first fit stops
/// after one damped step, the weight along `u^n - u^{n-1}` keeps its random
/// start, and warm starts never move it again; the prediction error then no
/// longer shrinks with `dt`. A goal this small leaves the gradient floor in
/// charge.
pub const PRESET_EPS_TRAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Embryonic,
    GrowthQuadratic,
    VolumeFilling,
    GrowthCubic,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::Embryonic,
        ExperimentName::GrowthQuadratic,
        ExperimentName::VolumeFilling,
        ExperimentName::GrowthCubic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::Embryonic => "embryonic",
            ExperimentName::GrowthQuadratic => "growth_quadratic",
            ExperimentName::VolumeFilling => "volume_filling",
            ExperimentName::GrowthCubic => "growth_cubic",
        }
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = KsError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| KsError::InvalidParameter(format!("unknown experiment '{s}'")))
    }
}

/// Where the initial perturbation lives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Rect { rect: Rect },
    /// Open disk `|x - center| < radius`.
    Disk { center: [f64; 2], radius: f64 },
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Region::Rect { rect } => rect.contains(p),
            Region::Disk { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) < radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy {
    pub stepper: StepperKind,
    /// `None` means a tenth of the smallest study step.
    pub dt_ref: Option<f64>,
}

impl Default for ReferencePolicy {
    fn default() -> Self {
        Self { stepper: StepperKind::Sstli, dt_ref: None }
    }
}

/// A complete, reproducible experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub name: ExperimentName,
    pub domain: Rect,
    pub nx: usize,
    pub ny: usize,
    pub t_final: f64,
    /// Strictly decreasing.
    pub dts: Vec<f64>,
    pub model: ModelSpec,
    pub seed: u64,
    /// `u0 = u_base + alpha` inside `perturbation`, `u_base` elsewhere.
    pub u_base: f64,
    pub perturbation: Region,
    /// Constant initial concentration for the parabolic models.
    pub c0: Option<f64>,
    pub reference: ReferencePolicy,
    pub beta: f64,
    pub train: TrainConfig,
    pub solver: SolverConfig,
}

fn disk07() -> Region {
    Region::Disk { center: [0.0, 0.0], radius: 0.7 }
}

impl Experiment {
    /// Desk-scale preset, or the full-size configuration when `full`.
    pub fn preset(name: ExperimentName, full: bool) -> Self {
        let square = Rect::new(-8.0, 8.0, -8.0, 8.0);
        let base = |name, domain, nx, ny, t_final, dts: &[f64], model| Experiment {
            name,
            domain,
            nx,
            ny,
            t_final,
            dts: dts.to_vec(),
            model,
            seed: 1,
            u_base: 1.0,
            perturbation: disk07(),
            c0: Some(1.0 / 32.0),
            reference: ReferencePolicy::default(),
            beta: 10.0,
            train: TrainConfig { eps_train: PRESET_EPS_TRAIN, ..TrainConfig::default() },
            solver: SolverConfig::default(),
        };
        match (name, full) {
            (ExperimentName::Embryonic, _) => {
                let domain = Rect::new(-3.5, 3.5, -35.0, 35.0);
                let model = ModelSpec::embryonic(0.25, 2.0);
                let mut e = if full {
                    base(name, domain, 35, 350, 150.0, &[5.0, 1.0, 0.5, 0.1, 0.05, 0.01], model)
                } else {
                    base(name, domain, 50, 25, 20.0, &[0.5, 0.1, 0.05, 0.01], model)
                };
                e.perturbation = Region::Rect { rect: Rect::new(-3.5, 3.5, -1.0, 1.0) };
                e.c0 = None;
                e
            }
            (ExperimentName::GrowthQuadratic, _) => {
                let model = ModelSpec::growth(0.0625, 6.0, 16.0, GrowthTerm::Quadratic { rate: 2.0 });
                if full {
                    base(name, square, 100, 100, 30.0, &[1.0, 0.5, 0.1, 0.05, 0.01, 0.005], model)
                } else {
                    base(name, square, 50, 50, 10.0, &[0.1, 0.05, 0.01, 0.005], model)
                }
            }
            (ExperimentName::VolumeFilling, _) => {
                let model = ModelSpec::volume_filling(0.1, 10.0, 1.0);
                let mut e = if full {
                    base(name, square, 100, 100, 1.0, &[0.05, 0.01, 0.005, 0.001, 5e-4, 1e-4], model)
                } else {
                    base(name, square, 50, 50, 1.0, &[0.05, 0.01, 0.005, 0.001], model)
                };
                e.u_base = 0.0;
                e
            }
            (ExperimentName::GrowthCubic, _) => {
                let model = ModelSpec::growth(0.0625, 6.0, 32.0, GrowthTerm::Cubic { rate: 1.0 });
                if full {
                    base(name, square, 100, 100, 150.0, &[0.1], model)
                } else {
                    base(name, square, 50, 50, 10.0, &[0.1], model)
                }
            }
        }
    }

    /// Cubic-growth preset with the given constant sensitivity.
    pub fn growth_cubic(chi: f64, full: bool) -> Self {
        let mut e = Self::preset(ExperimentName::GrowthCubic, full);
        e.model.chi = crate::scheme::Sensitivity::Constant { chi };
        if full && chi > 6.0 {
            e.t_final = 10.0;
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(KsError::ZeroCount { nx: self.nx, ny: self.ny });
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(KsError::InvalidParameter(format!("T must be positive, got {}", self.t_final)));
        }
        if self.dts.is_empty() {
            return Err(KsError::InvalidParameter("dt list is empty".into()));
        }
        for &dt in &self.dts {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(KsError::NonPositiveDt(dt));
            }
        }
        if self.dts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(KsError::InvalidParameter("dt list must be strictly decreasing".into()));
        }
        if let Some(dt) = self.reference.dt_ref {
            if !(dt > 0.0) {
                return Err(KsError::NonPositiveDt(dt));
            }
        }
        if self.u_base < 0.0 || self.c0.is_some_and(|c| c < 0.0) {
            return Err(KsError::InvalidParameter("initial data must be nonnegative".into()));
        }
        if !(self.beta > 1.0) {
            return Err(KsError::InvalidParameter(format!("beta must exceed 1, got {}", self.beta)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        self.mesh().map(|_| ())
    }

    pub fn mesh(&self) -> Result<Mesh> {
        Mesh::rect(self.domain, self.nx, self.ny)
    }

    /// `(u0, c0)` with the perturbation drawn from the experiment seed.
    pub fn initial_data(&self, mesh: &Mesh) -> (Field, Option<Field>) {
        let alpha = perturbation_alpha(mesh, &self.perturbation, self.seed);
        let u0 = Field::density(alpha.values.iter().map(|a| self.u_base + a).collect());
        let c0 = self.c0.map(|c| Field::constant(mesh, c, Quantity::Concentration));
        (u0, c0)
    }

    /// Options of the `run_index`-th run, whose generator is seeded with
    /// `seed + run_index`.
    pub fn run_options(&self, stepper: StepperKind, dt: f64, run_index: usize) -> RunOptions {
        RunOptions {
            stepper,
            dt,
            t_final: self.t_final,
            beta: self.beta,
            seed: self.seed.wrapping_add(run_index as u64),
            train: self.train,
            solver: self.solver,
        }
    }

    pub fn min_dt(&self) -> f64 {
        self.dts.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn reference_dt(&self) -> f64 {
        self.reference.dt_ref.unwrap_or(self.min_dt() / 10.0)
    }

    pub fn run(&self, mesh: &Mesh, stepper: StepperKind, dt: f64, run_index: usize) -> Result<RunSummary> {
        let (u0, c0) = self.initial_data(mesh);
        run(&self.model, mesh, &self.run_options(stepper, dt, run_index), &u0, c0.as_ref(), &mut NoHooks)
    }
}

/// Per cell inside `region`, the mean of ten `U[0, 1)` draws taken in cell
/// order from `rng`; zero outside.
pub fn perturbation_alpha_with<R: Rng + ?Sized>(mesh: &Mesh, region: &Region, rng: &mut R) -> Field {
    let values = mesh
        .cells()
        .iter()
        .map(|cell| {
            if region.contains(cell.center) {
                (0..ALPHA_DRAWS).map(|_| rng.random::<f64>()).sum::<f64>() / ALPHA_DRAWS as f64
            } else {
                0.0
            }
        })
        .collect();
    Field::density(values)
}

pub fn perturbation_alpha(mesh: &Mesh, region: &Region, seed: u64) -> Field {
    perturbation_alpha_with(mesh, region, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    L2,
    Linf,
}

/// `||u - u_ref|| / ||u_ref||` in the discrete L^2 or max norm.
pub fn relative_error(mesh: &Mesh, u: &Field, u_ref: &Field, norm: ErrorNorm) -> Result<f64> {
    u.check_mesh(mesh)?;
    u_ref.check_mesh(mesh)?;
    let (num, den) = match norm {
        ErrorNorm::L2 => (mesh.l2_distance(&u.values, &u_ref.values), mesh.l2_norm(&u_ref.values)),
        ErrorNorm::Linf => {
            let num = u.values.iter().zip(&u_ref.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            (num, u_ref.values.iter().map(|v| v.abs()).fold(0.0, f64::max))
        }
    };
    if den == 0.0 {
        return Err(KsError::ZeroReference);
    }
    Ok(num / den)
}

#[derive(Serialize)]
struct ReferenceKey<'a> {
    version: &'a str,
    name: ExperimentName,
    domain: Rect,
    nx: usize,
    ny: usize,
    t_final: f64,
    model: &'a ModelSpec,
    seed: u64,
    u_base: f64,
    perturbation: Region,
    c0: Option<f64>,
    beta: f64,
    train: TrainConfig,
    solver: SolverConfig,
    stepper: StepperKind,
    dt_ref: f64,
}

/// Hex SHA-256 of everything that determines a reference field.
pub fn reference_hash(exp: &Experiment, stepper: StepperKind, dt_ref: f64) -> String {
    let key = ReferenceKey {
        version: env!("CARGO_PKG_VERSION"),
        name: exp.name,
        domain: exp.domain,
        nx: exp.nx,
        ny: exp.ny,
        t_final: exp.t_final,
        model: &exp.model,
        seed: exp.seed,
        u_base: exp.u_base,
        perturbation: exp.perturbation,
        c0: exp.c0,
        beta: exp.beta,
        train: exp.train,
        solver: exp.solver,
        stepper,
        dt_ref,
    };
    let json = serde_json::to_vec(&key).expect("reference key serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Final field of one fine-step run, cached under `cache_dir` by config hash.
pub fn reference_solution(
    exp: &Experiment,
    stepper: StepperKind,
    dt_ref: f64,
    cache_dir: Option<&Path>,
) -> Result<Field> {
    exp.validate()?;
    let limit = exp.min_dt() / 10.0;
    if !(dt_ref > 0.0) || dt_ref > limit * (1.0 + 1e-12) {
        return Err(KsError::Precondition(format!(
            "reference dt {dt_ref} must not exceed a tenth of the smallest study dt ({limit})"
        )));
    }
    let mesh = exp.mesh()?;
    let path = cache_dir.map(|d| d.join(format!("ref_{}.csv", reference_hash(exp, stepper, dt_ref))));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return load_field_csv(&mesh, p, Quantity::CellDensity);
    }
    let field = exp.run(&mesh, stepper, dt_ref, 0)?.u_final;
    if let Some(p) = path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        save_field_csv(&mesh, &field, &p)?;
    }
    Ok(field)
}

/// Least-squares slope of `log e` against `log dt` plus the orders between
/// consecutive points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub slope: f64,
    pub intercept: f64,
    pub pairwise: Vec<f64>,
}

pub fn convergence_order(points: &[(f64, f64)]) -> Result<ConvergenceFit> {
    if points.len() < 2 {
        return Err(KsError::InvalidParameter(format!("need at least 2 points, got {}", points.len())));
    }
    for &(dt, e) in points {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(KsError::NonPositiveDt(dt));
        }
        if !(e > 0.0 && e.is_finite()) {
            return Err(KsError::NonPositiveError(e));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(KsError::InvalidParameter("all dt values coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let pairwise = points
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
        .collect();
    Ok(ConvergenceFit { slope, intercept: my - slope * mx, pairwise })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub stepper: StepperKind,
    pub dt: f64,
    pub steps: usize,
    pub trainings: usize,
    pub l2_error: f64,
    pub linf_error: f64,
    /// Best of the repeats.
    pub wall_s: f64,
    /// Overhead over the semi-implicit run at the same dt, in percent.
    pub gamma_pct: Option<f64>,
    /// Wall time outside the linear solves (training, prediction, criteria), best of the repeats.
    pub network_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub stepper: StepperKind,
    pub dt: f64,
    pub run_index: usize,
    pub seed: u64,
    pub trainings: usize,
    pub short_final_step: bool,
    pub stop_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub workers: usize,
    pub repeats: usize,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { workers: 1, repeats: 1, out_dir: None, cache_dir: None }
    }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub fits: Vec<(StepperKind, ConvergenceFit)>,
    pub runs: Vec<RunMeta>,
    pub reference_dt: f64,
    pub reference_hash: String,
}

impl StudyResult {
    pub fn row(&self, stepper: StepperKind, dt: f64) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.stepper == stepper && r.dt == dt)
    }

    pub fn fit(&self, stepper: StepperKind) -> Option<&ConvergenceFit> {
        self.fits.iter().find(|(s, _)| *s == stepper).map(|(_, f)| f)
    }
}

/// Worker count: the request, capped by `KSCHEM_THREADS` when set.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var("KSCHEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&v| v > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

/// Runs every `(stepper, dt)` pair against one reference and tabulates
/// errors, cost and training counts.
pub fn comparison_study(exp: &Experiment, steppers: &[StepperKind], opts: &StudyOptions) -> Result<StudyResult> {
    exp.validate()?;
    if steppers.is_empty() {
        return Err(KsError::InvalidParameter("no steppers requested".into()));
    }
    let mesh = exp.mesh()?;
    let dt_ref = exp.reference_dt();
    let ref_hash = reference_hash(exp, exp.reference.stepper, dt_ref);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(opts.workers))
        .build()
        .map_err(|e| KsError::InvalidParameter(format!("worker pool: {e}")))?;

    let u_ref = reference_solution(exp, exp.reference.stepper, dt_ref, opts.cache_dir.as_deref())?;
    let jobs: Vec<(usize, StepperKind, f64)> = steppers
        .iter()
        .flat_map(|&s| exp.dts.iter().map(move |&dt| (s, dt)))
        .enumerate()
        .map(|(i, (s, dt))| (i, s, dt))
        .collect();
    // Repeats are interleaved across jobs so slow drifts of the machine hit
    // every configuration alike; the best wall time per job is kept.
    let repeats = opts.repeats.max(1);
    let mut best: Vec<(Option<RunSummary>, f64, f64)> =
        jobs.iter().map(|_| (None, f64::INFINITY, f64::INFINITY)).collect();
    for _ in 0..repeats {
        let round: Vec<Result<RunSummary>> = pool.install(|| {
            jobs.par_iter().map(|&(idx, stepper, dt)| exp.run(&mesh, stepper, dt, idx)).collect()
        });
        for (slot, outcome) in best.iter_mut().zip(round) {
            let s = outcome?;
            slot.1 = slot.1.min(s.wall_seconds);
            slot.2 = slot.2.min(s.wall_seconds - s.solve_seconds);
            slot.0 = Some(s);
        }
    }
    let outcomes = best.into_iter().map(|(s, w, net)| Ok::<_, KsError>((s.expect("at least one repeat"), w, net)));

    let mut rows = Vec::with_capacity(jobs.len());
    let mut runs = Vec::with_capacity(jobs.len());
    let mut summaries = Vec::with_capacity(jobs.len());
    for (&(idx, stepper, dt), outcome) in jobs.iter().zip(outcomes) {
        let (summary, wall, network) = outcome?;
        let l2 = relative_error(&mesh, &summary.u_final, &u_ref, ErrorNorm::L2)?;
        let linf = relative_error(&mesh, &summary.u_final, &u_ref, ErrorNorm::Linf)?;
        let mut stop_reasons = BTreeMap::new();
        for (_, rep) in &summary.train_reports {
            *stop_reasons.entry(rep.stop.as_str().to_string()).or_insert(0) += 1;
        }
        runs.push(RunMeta {
            stepper,
            dt,
            run_index: idx,
            seed: exp.seed.wrapping_add(idx as u64),
            trainings: summary.trainings,
            short_final_step: summary.short_final_step,
            stop_reasons,
        });
        rows.push(StudyRow {
            stepper,
            dt,
            steps: summary.steps,
            trainings: summary.trainings,
            l2_error: l2,
            linf_error: linf,
            wall_s: wall,
            gamma_pct: None,
            network_s: network,
        });
        summaries.push(summary);
    }
    let semi_wall: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.stepper == StepperKind::SemiImplicit)
        .map(|r| (r.dt, r.wall_s))
        .collect();
    for r in &mut rows {
        if let Some(&(_, base)) = semi_wall.iter().find(|(dt, _)| *dt == r.dt) {
            r.gamma_pct = Some(100.0 * (r.wall_s - base) / base);
        }
    }

    let mut fits = Vec::new();
    for &s in steppers {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.stepper == s).map(|r| (r.dt, r.l2_error)).collect();
        if pts.len() >= 2 {
            fits.push((s, convergence_order(&pts)?));
        }
    }

    let result = StudyResult { rows, fits, runs, reference_dt: dt_ref, reference_hash: ref_hash };
    if let Some(dir) = &opts.out_dir {
        write_study(dir, exp, steppers, &mesh, &result, &summaries)?;
    }
    Ok(result)
}

pub const STUDY_HEADER: &str = "stepper,dt,steps,trainings,l2_error,linf_error,wall_s,gamma_pct,network_s";
pub const ORDERS_HEADER: &str = "stepper,kind,dt_a,dt_b,order";

pub fn write_study_csv<W: Write>(rows: &[StudyRow], mut out: W) -> Result<()> {
    writeln!(out, "{STUDY_HEADER}")?;
    for r in rows {
        let gamma = r.gamma_pct.map(|g| format!("{g:.3}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{:.16e},{:.16e},{:.6},{},{:.6}",
            r.stepper.as_str(),
            r.dt,
            r.steps,
            r.trainings,
            r.l2_error,
            r.linf_error,
            r.wall_s,
            gamma,
            r.network_s
        )?;
    }
    Ok(())
}

pub fn write_orders_csv<W: Write>(rows: &[StudyRow], fits: &[(StepperKind, ConvergenceFit)], mut out: W) -> Result<()> {
    writeln!(out, "{ORDERS_HEADER}")?;
    for (s, fit) in fits {
        let dts: Vec<f64> = rows.iter().filter(|r| r.stepper == *s).map(|r| r.dt).collect();
        let (first, last) = (dts[0], dts[dts.len() - 1]);
        writeln!(out, "{},fit,{},{},{:.16e}", s.as_str(), first, last, fit.slope)?;
        for (w, order) in dts.windows(2).zip(&fit.pairwise) {
            writeln!(out, "{},pair,{},{},{:.16e}", s.as_str(), w[0], w[1], order)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct StudyMeta<'a> {
    kind: &'static str,
    experiment: &'a Experiment,
    steppers: &'a [StepperKind],
    seed: u64,
    prng: &'static str,
    versions: BTreeMap<&'static str, &'static str>,
    reference: ReferenceMeta<'a>,
    runs: &'a [RunMeta],
}

#[derive(Serialize)]
struct ReferenceMeta<'a> {
    stepper: StepperKind,
    dt: f64,
    hash: &'a str,
}

pub fn versions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([("kschem", env!("CARGO_PKG_VERSION")), ("faer", "0.24"), ("rand_chacha", "0.9")])
}

fn write_study(
    dir: &Path,
    exp: &Experiment,
    steppers: &[StepperKind],
    mesh: &Mesh,
    result: &StudyResult,
    summaries: &[RunSummary],
) -> Result<()> {
    let fields = dir.join("fields");
    fs::create_dir_all(&fields)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("study.csv"))?);
    write_study_csv(&result.rows, &mut f)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("orders.csv"))?);
    write_orders_csv(&result.rows, &result.fits, &mut f)?;
    f.flush()?;
    for (row, s) in result.rows.iter().zip(summaries) {
        save_field_csv(mesh, &s.u_final, &fields.join(format!("{}_{}.csv", row.stepper.as_str(), row.dt)))?;
    }
    let meta = StudyMeta {
        kind: "study",
        experiment: exp,
        steppers,
        seed: exp.seed,
        prng: PRNG_ID,
        versions: versions(),
        reference: ReferenceMeta { stepper: exp.reference.stepper, dt: result.reference_dt, hash: &result.reference_hash },
        runs: &result.runs,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).map_err(|e| KsError::Io(e.to_string()))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    /// Every `f64` draw equals 0.5.
    struct Half;

    impl RngCore for Half {
        fn next_u32(&mut self) -> u32 {
            1 << 31
        }
        fn next_u64(&mut self) -> u64 {
            1 << 63
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    fn square(n: usize) -> Mesh {
        Mesh::rect(Rect::new(-1.0, 1.0, -1.0, 1.0), n, n).unwrap()
    }

    #[test]
    fn alpha_with_fixed_draws() {
        let mesh = square(8);
        let region = Region::Disk { center: [0.0, 0.0], radius: 0.6 };
        let a = perturbation_alpha_with(&mesh, &region, &mut Half);
        for (cell, v) in mesh.cells().iter().zip(&a.values) {
            let want = if region.contains(cell.center) { 0.5 } else { 0.0 };
            assert_eq!(*v, want);
        }
        assert!(a.values.contains(&0.5));
    }

    #[test]
    fn alpha_statistics() {
        let mesh = square(40);
        let region = Region::Rect { rect: Rect::new(-2.0, 2.0, -2.0, 2.0) };
        let a = perturbation_alpha(&mesh, &region, 11);
        let n = a.len() as f64;
        let mean = a.values.iter().sum::<f64>() / n;
        let var = a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - (1.0f64 / 120.0).sqrt()).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn alpha_is_seeded() {
        let mesh = square(10);
        let region = Region::Disk { center: [0.0, 0.0], radius: 2.0 };
        assert_eq!(perturbation_alpha(&mesh, &region, 3), perturbation_alpha(&mesh, &region, 3));
        assert_ne!(perturbation_alpha(&mesh, &region, 3), perturbation_alpha(&mesh, &region, 4));
    }

    #[test]
    fn relative_error_examples() {
        let mesh = square(3);
        let r = Field::density((0..9).map(|i| 1.0 + i as f64).collect());
        assert_eq!(relative_error(&mesh, &r, &r, ErrorNorm::L2).unwrap(), 0.0);
        let u = Field::density(r.values.iter().map(|v| 1.1 * v).collect());
        for norm in [ErrorNorm::L2, ErrorNorm::Linf] {
            assert!((relative_error(&mesh, &u, &r, norm).unwrap() - 0.1).abs() < 1e-14);
        }
        let zero = Field::density(vec![0.0; 9]);
        assert_eq!(relative_error(&mesh, &u, &zero, ErrorNorm::L2), Err(KsError::ZeroReference));
    }

    #[test]
    fn order_fit_examples() {
        let lin: Vec<(f64, f64)> = [0.1, 0.05, 0.01].iter().map(|&d| (d, 3.0 * d)).collect();
        assert!((convergence_order(&lin).unwrap().slope - 1.0).abs() < 1e-12);
        let quad: Vec<(f64, f64)> = [0.1, 0.05, 0.01].iter().map(|&d| (d, 3.0 * d * d)).collect();
        let fit = convergence_order(&quad).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!(fit.pairwise.iter().all(|p| (p - 2.0).abs() < 1e-12));
        assert!(matches!(convergence_order(&[(0.1, 1.0), (0.01, 0.0)]), Err(KsError::NonPositiveError(_))));
        assert!(convergence_order(&[(0.1, 1.0)]).is_err());
    }

    #[test]
    fn presets_validate() {
        for name in ExperimentName::ALL {
            for full in [false, true] {
                let e = Experiment::preset(name, full);
                e.validate().unwrap();
                assert_eq!(e.name, name);
            }
        }
        assert_eq!(Experiment::preset(ExperimentName::Embryonic, true).mesh().unwrap().num_cells(), 12250);
        let mut e = Experiment::preset(ExperimentName::Embryonic, false);
        e.dts = vec![0.1, 0.2];
        assert!(e.validate().is_err());
    }

    #[test]
    fn initial_data_shapes() {
        let e = Experiment::preset(ExperimentName::VolumeFilling, false);
        let mesh = e.mesh().unwrap();
        let (u0, c0) = e.initial_data(&mesh);
        assert!(u0.values.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(u0.max() > 0.0);
        assert!(c0.unwrap().values.iter().all(|&c| c == 1.0 / 32.0));
        let e = Experiment::preset(ExperimentName::Embryonic, false);
        let (u0, c0) = e.initial_data(&e.mesh().unwrap());
        assert!(c0.is_none());
        assert!(u0.min() >= 1.0 && u0.max() > 1.0);
    }

    #[test]
    fn study_csv_has_header_and_rows() {
        let rows = vec![StudyRow {
            stepper: StepperKind::SemiImplicit,
            dt: 0.1,
            steps: 10,
            trainings: 0,
            l2_error: 1e-3,
            linf_error: 2e-3,
            wall_s: 0.5,
            gamma_pct: Some(0.0),
            network_s: 0.01,
        }];
        let mut buf = Vec::new();
        write_study_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(STUDY_HEADER));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn worker_cap() {
        assert!(worker_count(0) >= 1);
    }
}
