//! Time integration: Euler semi-implicit, each-step training (ESTLI) and
//! selected-steps training (SSTLI).
//!
//! All three advance the same decoupled pair of linear systems; they differ in
//! the value `u~` used for the nonlinear couplings at the new level. The
//! semi-implicit scheme lags it (`u~ = u^n`), the network methods predict it
//! from the last two levels. The first two steps are always semi-implicit.
//!
//! The selected-steps controller is a state machine whose control points are
//! the decision steps 3, 4 and 7 of the selection algorithm; every call to
//! [`sst_advance`] performs exactly one linear solve pair.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KsError, Result};
use crate::linsolve::{solve, SolverConfig};
use crate::mesh::{Field, Mesh, Quantity};
use crate::scheme::{assemble_c_system, assemble_u_system, ModelSpec, Variant};
use crate::slnn::{predict, train_on_history, NetworkState, TrainConfig, TrainReport};

/// Identifier of the generator behind every seeded draw.
pub const PRNG_ID: &str = "rand_chacha::ChaCha8Rng (rand_chacha 0.9, seed_from_u64)";

/// Stream of the seeded generator used for initial network weights.
pub const TRAINING_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    SemiImplicit,
    Estli,
    Sstli,
}

impl StepperKind {
    pub const ALL: [StepperKind; 3] = [StepperKind::SemiImplicit, StepperKind::Estli, StepperKind::Sstli];

    pub fn as_str(&self) -> &'static str {
        match self {
            StepperKind::SemiImplicit => "semi_implicit",
            StepperKind::Estli => "estli",
            StepperKind::Sstli => "sstli",
        }
    }
}

impl std::str::FromStr for StepperKind {
    type Err = KsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi_implicit" | "semi" => Ok(StepperKind::SemiImplicit),
            "estli" => Ok(StepperKind::Estli),
            "sstli" => Ok(StepperKind::Sstli),
            other => Err(KsError::InvalidParameter(format!(
                "unknown stepper '{other}' (expected semi_implicit, estli or sstli)"
            ))),
        }
    }
}

/// Which path produced a time level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Bootstrap of a network method (first two levels and the initial training).
    Boot,
    /// Semi-implicit stepper.
    Semi,
    /// ESTLI trained step.
    Est,
    S5,
    S6,
    S8,
    S9,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Boot => "boot",
            Branch::Semi => "semi",
            Branch::Est => "est",
            Branch::S5 => "s5",
            Branch::S6 => "s6",
            Branch::S8 => "s8",
            Branch::S9 => "s9",
        }
    }
}

/// Advances `(u^n, c^n)` by one step given the value `u~` of the couplings.
pub trait Propagator {
    /// `prediction == None` selects the semi-implicit lag `u~ = u^n`.
    fn advance(&mut self, u: &Field, c: Option<&Field>, prediction: Option<&Field>) -> Result<(Field, Option<Field>)>;

    /// Distance used by the selection criteria.
    fn distance(&self, a: &Field, b: &Field) -> f64;
}

/// Supplies network weights.
pub trait Trainer {
    fn random_init(&mut self) -> NetworkState;

    /// Trains on `(u_nm2, u_nm1) -> u_n` starting from `w_init`.
    fn train(&mut self, u_nm2: &Field, u_nm1: &Field, u_n: &Field, w_init: &NetworkState)
        -> Result<(NetworkState, TrainReport)>;
}

/// Levenberg-Marquardt trainer with a seeded generator for initial weights.
#[derive(Debug, Clone)]
pub struct LmTrainer {
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl LmTrainer {
    /// Draws from stream 1 of the seeded generator; stream 0 is left to the
    /// initial perturbation.
    pub fn new(cfg: TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAINING_STREAM);
        Self { cfg, rng }
    }
}

impl Trainer for LmTrainer {
    fn random_init(&mut self) -> NetworkState {
        NetworkState::random(&mut self.rng)
    }

    fn train(
        &mut self,
        u_nm2: &Field,
        u_nm1: &Field,
        u_n: &Field,
        w_init: &NetworkState,
    ) -> Result<(NetworkState, TrainReport)> {
        train_on_history(u_nm2, u_nm1, u_n, w_init, &self.cfg)
    }
}

/// One linearized step: solve for `c^{n+1}` with the prediction, then for
/// `u^{n+1}` with the fresh concentration.
pub fn linearized_step(
    mesh: &Mesh,
    model: &ModelSpec,
    u_n: &Field,
    c_n: Option<&Field>,
    u_tilde: Option<&Field>,
    dt: f64,
    solver: &SolverConfig,
) -> Result<(Field, Option<Field>)> {
    if !(dt > 0.0) {
        return Err(KsError::NonPositiveDt(dt));
    }
    let ut = u_tilde.unwrap_or(u_n);
    let c_sys = match model.variant {
        Variant::Embryonic => assemble_c_system(mesh, model, ut, None, None)?,
        Variant::Growth | Variant::VolumeFilling => {
            let c_n = c_n.ok_or_else(|| {
                KsError::InvalidParameter("parabolic models need an initial concentration".into())
            })?;
            assemble_c_system(mesh, model, ut, Some(c_n), Some(dt))?
        }
    };
    let c_new = Field::concentration(solve(&c_sys, solver)?);
    if !c_new.is_finite() {
        return Err(KsError::NonFinite("concentration solve".into()));
    }
    let u_sys = assemble_u_system(mesh, model, &c_new, u_n, Some(ut), dt)?;
    let u_new = Field::density(solve(&u_sys, solver)?);
    if !u_new.is_finite() {
        return Err(KsError::NonFinite("density solve".into()));
    }
    Ok((u_new, Some(c_new)))
}

/// Euler semi-implicit step: `c^{n+1}` from `u^n`, then `u^{n+1}`.
pub fn semi_implicit_step(
    model: &ModelSpec,
    mesh: &Mesh,
    u_n: &Field,
    c_n: Option<&Field>,
    dt: f64,
    solver: &SolverConfig,
) -> Result<(Field, Option<Field>)> {
    linearized_step(mesh, model, u_n, c_n, None, dt, solver)
}

/// The finite-volume propagator used by real runs.
#[derive(Debug, Clone)]
pub struct FvPropagator<'a> {
    pub mesh: &'a Mesh,
    pub model: ModelSpec,
    pub dt: f64,
    pub solver: SolverConfig,
}

impl Propagator for FvPropagator<'_> {
    fn advance(&mut self, u: &Field, c: Option<&Field>, prediction: Option<&Field>) -> Result<(Field, Option<Field>)> {
        linearized_step(self.mesh, &self.model, u, c, prediction, self.dt, &self.solver)
    }

    fn distance(&self, a: &Field, b: &Field) -> f64 {
        self.mesh.l2_distance(&a.values, &b.values)
    }
}

/// What one advance did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub branch: Branch,
    /// Decision steps visited, e.g. `[3, 4, 5]`.
    pub path: Vec<u8>,
    pub train_report: Option<TrainReport>,
    /// `||u~ - u^{n+1}||` for the prediction that entered the solve.
    pub prediction_error: Option<f64>,
}

impl StepRecord {
    fn new(branch: Branch, path: Vec<u8>) -> Self {
        Self { branch, path, train_report: None, prediction_error: None }
    }
}

/// Last three levels of the density plus the current concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    u: VecDeque<Field>,
    pub c: Option<Field>,
    /// Index `n` of the newest level.
    pub n: usize,
}

impl History {
    pub fn new(u0: Field, c0: Option<Field>) -> Self {
        let mut u = VecDeque::with_capacity(3);
        u.push_back(u0);
        Self { u, c: c0, n: 0 }
    }

    /// Builds a history whose newest level is `n`, from oldest to newest.
    pub fn from_levels(levels: Vec<Field>, c: Option<Field>, n: usize) -> Result<Self> {
        if levels.is_empty() || levels.len() > 3 || levels.len() > n + 1 {
            return Err(KsError::InvalidState(format!("{} levels cannot end at level {n}", levels.len())));
        }
        let len = levels[0].len();
        if levels.iter().any(|f| f.len() != len) {
            return Err(KsError::InvalidState("history levels differ in size".into()));
        }
        Ok(Self { u: levels.into(), c, n })
    }

    /// `u^{n-back}`.
    pub fn level(&self, back: usize) -> Option<&Field> {
        self.u.len().checked_sub(back + 1).and_then(|i| self.u.get(i))
    }

    pub fn current(&self) -> &Field {
        self.u.back().expect("history is never empty")
    }

    fn push(&mut self, u: Field, c: Option<Field>) {
        if self.u.len() == 3 {
            self.u.pop_front();
        }
        self.u.push_back(u);
        self.c = c;
        self.n += 1;
    }

    fn need(&self, back: usize) -> Result<&Field> {
        self.level(back)
            .ok_or_else(|| KsError::InvalidState(format!("level n-{back} missing at n={}", self.n)))
    }

    fn step<P: Propagator>(&mut self, prop: &mut P, prediction: Option<&Field>) -> Result<()> {
        let (u, c) = prop.advance(self.current(), self.c.as_ref(), prediction)?;
        self.push(u, c);
        Ok(())
    }
}

/// Semi-implicit advance on a history.
pub fn semi_advance<P: Propagator>(hist: &mut History, prop: &mut P) -> Result<StepRecord> {
    hist.step(prop, None)?;
    Ok(StepRecord::new(Branch::Semi, vec![]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstliState {
    pub hist: History,
    /// Weights `w^{n-1}` of the last training.
    pub w_prev: Option<NetworkState>,
    pub u_tilde: Option<Field>,
    pub trainings: usize,
}

impl EstliState {
    pub fn new(u0: Field, c0: Option<Field>) -> Self {
        Self { hist: History::new(u0, c0), w_prev: None, u_tilde: None, trainings: 0 }
    }
}

/// ESTLI: trains at every level `n >= 2` (random start at `n = 2`, warm
/// start from the previous weights afterwards), predicts, then solves.
pub fn estli_step<P: Propagator, T: Trainer>(st: &mut EstliState, prop: &mut P, trainer: &mut T) -> Result<StepRecord> {
    if st.hist.n < 2 {
        st.hist.step(prop, None)?;
        return Ok(StepRecord::new(Branch::Boot, vec![1]));
    }
    let w_init = if st.hist.n == 2 {
        trainer.random_init()
    } else {
        st.w_prev
            .ok_or_else(|| KsError::InvalidState("ESTLI warm start without previous weights".into()))?
    };
    let (w, report) = trainer.train(st.hist.need(2)?, st.hist.need(1)?, st.hist.need(0)?, &w_init)?;
    st.trainings += 1;
    let u_tilde = predict(&w, st.hist.need(1)?, st.hist.current())?;
    st.hist.step(prop, Some(&u_tilde))?;
    let err = prop.distance(&u_tilde, st.hist.current());
    st.w_prev = Some(w);
    st.u_tilde = Some(u_tilde);
    let mut rec = StepRecord::new(Branch::Est, vec![]);
    rec.train_report = Some(report);
    rec.prediction_error = Some(err);
    Ok(rec)
}

/// Control point where the next selected-steps advance resumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SstAction {
    /// Semi-implicit levels, then the first training at `n = 2`.
    Bootstrap,
    AtStep3,
    AtStep4,
    AtStep7,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstState {
    pub hist: History,
    /// `w^n`, only set while a level is being decided.
    pub w_curr: Option<NetworkState>,
    /// `w^{n-1}`
    pub w_prev: Option<NetworkState>,
    /// `w^{n-2}`
    pub w_prev2: Option<NetworkState>,
    /// `u~^n`
    pub u_tilde: Option<Field>,
    /// `u-bar^n`
    pub u_bar: Option<Field>,
    pub next_action: SstAction,
    pub trainings: usize,
    pub steps: usize,
}

impl SstState {
    pub fn new(u0: Field, c0: Option<Field>) -> Self {
        Self {
            hist: History::new(u0, c0),
            w_curr: None,
            w_prev: None,
            w_prev2: None,
            u_tilde: None,
            u_bar: None,
            next_action: SstAction::Bootstrap,
            trainings: 0,
            steps: 0,
        }
    }

    fn need_w(w: Option<NetworkState>, what: &str) -> Result<NetworkState> {
        w.ok_or_else(|| KsError::InvalidState(format!("{what} weights missing")))
    }

    fn need_field<'a>(f: &'a Option<Field>, what: &str) -> Result<&'a Field> {
        f.as_ref().ok_or_else(|| KsError::InvalidState(format!("{what} missing")))
    }

    /// Solves with `u_tilde` as the prediction and moves to level `n + 1`,
    /// recording `w_n` as the weights of the finished level.
    fn finish_level<P: Propagator>(
        &mut self,
        prop: &mut P,
        w_n: NetworkState,
        solve_with: Field,
        u_tilde: Field,
        u_bar: Option<Field>,
        rec: &mut StepRecord,
    ) -> Result<()> {
        self.hist.step(prop, Some(&solve_with))?;
        rec.prediction_error = Some(prop.distance(&solve_with, self.hist.current()));
        self.w_prev2 = self.w_prev;
        self.w_prev = Some(w_n);
        self.w_curr = None;
        self.u_tilde = Some(u_tilde);
        self.u_bar = u_bar;
        self.steps += 1;
        Ok(())
    }

    fn beta_test<P: Propagator>(&self, prop: &P, beta: f64) -> Result<bool> {
        let u_n = self.hist.current();
        let e_pred = prop.distance(Self::need_field(&self.u_tilde, "u~^n")?, u_n);
        let e_step = prop.distance(self.hist.need(1)?, u_n);
        Ok(e_pred <= e_step / beta)
    }
}

/// One advance of the selected-steps controller.
pub fn sst_advance<P: Propagator, T: Trainer>(
    st: &mut SstState,
    prop: &mut P,
    trainer: &mut T,
    beta: f64,
) -> Result<StepRecord> {
    if !(beta > 1.0) {
        return Err(KsError::InvalidParameter(format!("beta must exceed 1, got {beta}")));
    }
    match st.next_action {
        SstAction::Bootstrap if st.hist.n < 2 => {
            st.hist.step(prop, None)?;
            st.steps += 1;
            Ok(StepRecord::new(Branch::Boot, vec![1]))
        }
        SstAction::Bootstrap => {
            if st.hist.n != 2 {
                return Err(KsError::InvalidState(format!("bootstrap training at n={}", st.hist.n)));
            }
            let w_init = trainer.random_init();
            let (w, report) = trainer.train(st.hist.need(2)?, st.hist.need(1)?, st.hist.need(0)?, &w_init)?;
            st.trainings += 1;
            let u_tilde = predict(&w, st.hist.need(1)?, st.hist.current())?;
            let mut rec = StepRecord::new(Branch::Boot, vec![2]);
            rec.train_report = Some(report);
            st.finish_level(prop, w, u_tilde.clone(), u_tilde, None, &mut rec)?;
            st.next_action = SstAction::AtStep4;
            Ok(rec)
        }
        SstAction::AtStep3 => {
            let u_n = st.hist.current();
            let e_tilde = prop.distance(SstState::need_field(&st.u_tilde, "u~^n")?, u_n);
            let e_bar = prop.distance(SstState::need_field(&st.u_bar, "u-bar^n")?, u_n);
            if e_tilde >= e_bar {
                // Step 6: fall back to w^{n-2} for this level and the next.
                let w_n = SstState::need_w(st.w_prev2, "w^{n-2}")?;
                st.w_curr = Some(w_n);
                let u_tilde = predict(&w_n, st.hist.need(1)?, st.hist.current())?;
                let mut rec = StepRecord::new(Branch::S6, vec![3, 6]);
                st.finish_level(prop, w_n, u_tilde.clone(), u_tilde, None, &mut rec)?;
                st.next_action = SstAction::AtStep7;
                Ok(rec)
            } else {
                step4(st, prop, trainer, beta, vec![3, 4])
            }
        }
        SstAction::AtStep4 => step4(st, prop, trainer, beta, vec![4]),
        SstAction::AtStep7 => {
            let w_n = SstState::need_w(st.w_prev, "w^{n-1}")?;
            st.w_curr = Some(w_n);
            if st.beta_test(prop, beta)? {
                step9(st, prop, w_n, vec![7, 9])
            } else {
                // Step 8: solve with the current weights, keep that prediction
                // as u-bar^{n+1}, retrain, and predict again for the next check.
                let u_bar = predict(&w_n, st.hist.need(1)?, st.hist.current())?;
                let (w_new, report) =
                    trainer.train(st.hist.need(2)?, st.hist.need(1)?, st.hist.need(0)?, &w_n)?;
                st.trainings += 1;
                let u_tilde = predict(&w_new, st.hist.need(1)?, st.hist.current())?;
                let mut rec = StepRecord::new(Branch::S8, vec![7, 8]);
                rec.train_report = Some(report);
                st.finish_level(prop, w_new, u_bar.clone(), u_tilde, Some(u_bar), &mut rec)?;
                st.next_action = SstAction::AtStep3;
                Ok(rec)
            }
        }
    }
}

fn step4<P: Propagator, T: Trainer>(
    st: &mut SstState,
    prop: &mut P,
    trainer: &mut T,
    beta: f64,
    mut path: Vec<u8>,
) -> Result<StepRecord> {
    let w_prev = SstState::need_w(st.w_prev, "w^{n-1}")?;
    if st.beta_test(prop, beta)? {
        st.w_curr = Some(w_prev);
        path.push(9);
        return step9(st, prop, w_prev, path);
    }
    let (w_n, report) = trainer.train(st.hist.need(2)?, st.hist.need(1)?, st.hist.need(0)?, &w_prev)?;
    st.trainings += 1;
    st.w_curr = Some(w_n);
    // Step 5: both the new and the previous weights predict the next level.
    let u_tilde = predict(&w_n, st.hist.need(1)?, st.hist.current())?;
    let u_bar = predict(&w_prev, st.hist.need(1)?, st.hist.current())?;
    path.push(5);
    let mut rec = StepRecord::new(Branch::S5, path);
    rec.train_report = Some(report);
    st.finish_level(prop, w_n, u_tilde.clone(), u_tilde, Some(u_bar), &mut rec)?;
    st.next_action = SstAction::AtStep3;
    Ok(rec)
}

fn step9<P: Propagator>(st: &mut SstState, prop: &mut P, w_n: NetworkState, path: Vec<u8>) -> Result<StepRecord> {
    let u_tilde = predict(&w_n, st.hist.need(1)?, st.hist.current())?;
    let mut rec = StepRecord::new(Branch::S9, path);
    st.finish_level(prop, w_n, u_tilde.clone(), u_tilde, None, &mut rec)?;
    st.next_action = SstAction::AtStep4;
    Ok(rec)
}

/// Per-step diagnostics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub mass: f64,
    pub trainings_cum: usize,
    pub branch: Branch,
    pub pred_err_norm: Option<f64>,
    pub wall_ms: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "step,t,min_u,max_u,mass,trainings_cum,branch,pred_err_norm,wall_ms";

pub fn write_diagnostics_csv<W: Write>(rows: &[StepDiagnostics], mut out: W) -> Result<()> {
    writeln!(out, "{DIAGNOSTICS_HEADER}")?;
    for r in rows {
        let pred = r.pred_err_norm.map(|v| format!("{v:.16e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{:.3}",
            r.step,
            r.t,
            r.min_u,
            r.max_u,
            r.mass,
            r.trainings_cum,
            r.branch.as_str(),
            pred,
            r.wall_ms
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub stepper: StepperKind,
    pub dt: f64,
    pub t_final: f64,
    pub beta: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub solver: SolverConfig,
}

impl RunOptions {
    pub fn new(stepper: StepperKind, dt: f64, t_final: f64) -> Self {
        Self {
            stepper,
            dt,
            t_final,
            beta: 10.0,
            seed: 0,
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KsError::NonPositiveDt(self.dt));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(KsError::InvalidParameter(format!("t_final must be positive, got {}", self.t_final)));
        }
        if !(self.beta > 1.0) {
            return Err(KsError::InvalidParameter(format!("beta must exceed 1, got {}", self.beta)));
        }
        self.train.validate()?;
        self.solver.validate()
    }
}

/// Time grid: `steps` uniform steps of `dt`, plus an optional short final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub steps: usize,
    pub dt: f64,
    pub final_step: Option<f64>,
}

impl TimeGrid {
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(KsError::NonPositiveDt(dt));
        }
        let ratio = t_final / dt;
        let rounded = ratio.round();
        if rounded >= 1.0 && (rounded * dt - t_final).abs() <= 1e-9 * t_final.abs().max(dt) {
            return Ok(Self { steps: rounded as usize, dt, final_step: None });
        }
        let full = ratio.floor() as usize;
        let rest = t_final - full as f64 * dt;
        Ok(Self { steps: full, dt, final_step: Some(rest) })
    }

    pub fn total_steps(&self) -> usize {
        self.steps + usize::from(self.final_step.is_some())
    }

    pub fn time(&self, step: usize) -> f64 {
        if step <= self.steps {
            step as f64 * self.dt
        } else {
            self.steps as f64 * self.dt + self.final_step.unwrap_or(0.0)
        }
    }
}

/// Propagator wrapper that accumulates the time spent in solves.
struct Timed<P> {
    inner: P,
    solve_seconds: f64,
}

impl<P: Propagator> Propagator for Timed<P> {
    fn advance(&mut self, u: &Field, c: Option<&Field>, prediction: Option<&Field>) -> Result<(Field, Option<Field>)> {
        let t = Instant::now();
        let out = self.inner.advance(u, c, prediction);
        self.solve_seconds += t.elapsed().as_secs_f64();
        out
    }

    fn distance(&self, a: &Field, b: &Field) -> f64 {
        self.inner.distance(a, b)
    }
}

/// Observes a run as it progresses.
pub trait RunHooks {
    fn on_step(&mut self, _diag: &StepDiagnostics, _u: &Field, _c: Option<&Field>) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl RunHooks for NoHooks {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub u_final: Field,
    pub c_final: Option<Field>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub trainings: usize,
    pub steps: usize,
    pub wall_seconds: f64,
    /// Part of `wall_seconds` spent assembling and solving the linear systems.
    pub solve_seconds: f64,
    pub short_final_step: bool,
    /// `(step, report)` for every training performed.
    pub train_reports: Vec<(usize, TrainReport)>,
}

enum Driver {
    Semi(History),
    Estli(EstliState),
    Sstli(SstState),
}

impl Driver {
    fn hist(&self) -> &History {
        match self {
            Driver::Semi(h) => h,
            Driver::Estli(s) => &s.hist,
            Driver::Sstli(s) => &s.hist,
        }
    }

    fn trainings(&self) -> usize {
        match self {
            Driver::Semi(_) => 0,
            Driver::Estli(s) => s.trainings,
            Driver::Sstli(s) => s.trainings,
        }
    }
}

/// Integrates from `t = 0` to `t_final`.
pub fn run(
    model: &ModelSpec,
    mesh: &Mesh,
    opts: &RunOptions,
    u0: &Field,
    c0: Option<&Field>,
    hooks: &mut dyn RunHooks,
) -> Result<RunSummary> {
    model.validate()?;
    opts.validate()?;
    u0.check_mesh(mesh)?;
    if let Some(c) = c0 {
        c.check_mesh(mesh)?;
    }
    if model.variant != Variant::Embryonic && c0.is_none() {
        return Err(KsError::InvalidParameter("parabolic models need an initial concentration".into()));
    }
    let grid = TimeGrid::new(opts.dt, opts.t_final)?;
    let mut prop = Timed { inner: FvPropagator { mesh, model: *model, dt: opts.dt, solver: opts.solver }, solve_seconds: 0.0 };
    let mut trainer = LmTrainer::new(opts.train, opts.seed);
    let u0 = Field::new(u0.values.clone(), Quantity::CellDensity);
    let c0 = c0.cloned();
    let mut driver = match opts.stepper {
        StepperKind::SemiImplicit => Driver::Semi(History::new(u0, c0)),
        StepperKind::Estli => Driver::Estli(EstliState::new(u0, c0)),
        StepperKind::Sstli => Driver::Sstli(SstState::new(u0, c0)),
    };

    let start = Instant::now();
    let mut diagnostics = Vec::with_capacity(grid.total_steps());
    let mut train_reports = Vec::new();
    for step in 1..=grid.total_steps() {
        if step > grid.steps {
            prop.inner.dt = grid.final_step.expect("short step present");
        }
        let t0 = Instant::now();
        let rec = match &mut driver {
            Driver::Semi(h) => semi_advance(h, &mut prop),
            Driver::Estli(s) => estli_step(s, &mut prop, &mut trainer),
            Driver::Sstli(s) => sst_advance(s, &mut prop, &mut trainer, opts.beta),
        }
        .map_err(|e| KsError::StepFailed { step, source: Box::new(e) })?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        if let Some(rep) = rec.train_report {
            train_reports.push((step, rep));
        }
        let hist = driver.hist();
        let u = hist.current();
        let diag = StepDiagnostics {
            step,
            t: grid.time(step),
            min_u: u.min(),
            max_u: u.max(),
            mass: mesh.integral(&u.values),
            trainings_cum: driver.trainings(),
            branch: rec.branch,
            pred_err_norm: rec.prediction_error,
            wall_ms,
        };
        hooks
            .on_step(&diag, u, hist.c.as_ref())
            .map_err(|e| KsError::StepFailed { step, source: Box::new(e) })?;
        diagnostics.push(diag);
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let hist = driver.hist();
    Ok(RunSummary {
        u_final: hist.current().clone(),
        c_final: hist.c.clone(),
        diagnostics,
        trainings: driver.trainings(),
        steps: grid.total_steps(),
        wall_seconds,
        solve_seconds: prop.solve_seconds,
        short_final_step: grid.final_step.is_some(),
        train_reports,
    })
}
