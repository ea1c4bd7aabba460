//! Run and study configuration: a JSON document whose fields may be
//! overridden from the command line, resolved into an [`Experiment`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KsError, Result};
use crate::harness::{Experiment, ExperimentName};
use crate::integrate::StepperKind;
use crate::linsolve::SolverConfig;
use crate::scheme::{ModelSpec, Sensitivity};
use crate::slnn::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Option<ExperimentName>,
    /// Replaces the preset model entirely.
    pub model: Option<ModelSpec>,
    pub stepper: Option<StepperKind>,
    pub steppers: Option<Vec<StepperKind>>,
    pub dt: Option<f64>,
    pub dts: Option<Vec<f64>>,
    pub t_final: Option<f64>,
    /// `[nx, ny]`
    pub grid: Option<[usize; 2]>,
    pub seed: Option<u64>,
    /// Constant sensitivity, or `chi0` for the volume-filling model.
    pub chi: Option<f64>,
    pub beta: Option<f64>,
    pub solver: Option<SolverConfig>,
    pub train: Option<TrainConfig>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub full: bool,
    pub clamp_prediction_nonneg: bool,
    /// Intermediate snapshots in addition to `t = 0` and `t = T`.
    pub snapshots: usize,
    pub workers: Option<usize>,
    pub repeats: Option<usize>,
}

impl RunConfig {
    /// Reads a config file. A `meta.json` written by a run is accepted too;
    /// its `config` entry is used.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| KsError::InvalidParameter(format!("config json: {e}")))?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("config") && map.contains_key("kind") => {
                map.remove("config").expect("checked above")
            }
            v => v,
        };
        serde_json::from_value(value).map_err(|e| KsError::InvalidParameter(format!("config: {e}")))
    }

    /// Fields set in `over` win; flags are or-ed.
    pub fn overridden_by(self, over: RunConfig) -> RunConfig {
        RunConfig {
            experiment: over.experiment.or(self.experiment),
            model: over.model.or(self.model),
            stepper: over.stepper.or(self.stepper),
            steppers: over.steppers.or(self.steppers),
            dt: over.dt.or(self.dt),
            dts: over.dts.or(self.dts),
            t_final: over.t_final.or(self.t_final),
            grid: over.grid.or(self.grid),
            seed: over.seed.or(self.seed),
            chi: over.chi.or(self.chi),
            beta: over.beta.or(self.beta),
            solver: over.solver.or(self.solver),
            train: over.train.or(self.train),
            out_dir: over.out_dir.or(self.out_dir),
            cache_dir: over.cache_dir.or(self.cache_dir),
            full: self.full || over.full,
            clamp_prediction_nonneg: self.clamp_prediction_nonneg || over.clamp_prediction_nonneg,
            snapshots: if over.snapshots > 0 { over.snapshots } else { self.snapshots },
            workers: over.workers.or(self.workers),
            repeats: over.repeats.or(self.repeats),
        }
    }

    /// The experiment with every override applied, validated.
    pub fn experiment(&self) -> Result<Experiment> {
        let name = self.experiment.unwrap_or(ExperimentName::Embryonic);
        let mut exp = match (name, self.chi) {
            (ExperimentName::GrowthCubic, Some(chi)) => Experiment::growth_cubic(chi, self.full),
            _ => Experiment::preset(name, self.full),
        };
        if let Some(model) = self.model {
            exp.model = model;
        }
        if let Some(chi) = self.chi {
            exp.model.chi = match exp.model.chi {
                Sensitivity::Constant { .. } => Sensitivity::Constant { chi },
                Sensitivity::Threshold { u_bar, .. } => Sensitivity::Threshold { chi0: chi, u_bar },
            };
        }
        if self.clamp_prediction_nonneg {
            exp.model.clamp_prediction_nonneg = true;
        }
        if let Some([nx, ny]) = self.grid {
            exp.nx = nx;
            exp.ny = ny;
        }
        if let Some(t) = self.t_final {
            exp.t_final = t;
        }
        if let Some(dts) = &self.dts {
            exp.dts = dts.clone();
        }
        if let Some(seed) = self.seed {
            exp.seed = seed;
        }
        if let Some(beta) = self.beta {
            exp.beta = beta;
        }
        if let Some(solver) = self.solver {
            exp.solver = solver;
        }
        if let Some(train) = self.train {
            exp.train = train;
        }
        exp.validate()?;
        Ok(exp)
    }

    /// Stepper and step of a single run.
    pub fn run_choice(&self, exp: &Experiment) -> Result<(StepperKind, f64)> {
        let dt = self.dt.unwrap_or(exp.min_dt());
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(KsError::NonPositiveDt(dt));
        }
        Ok((self.stepper.unwrap_or(StepperKind::Sstli), dt))
    }

    /// A copy with every value the run depends on written out, so that the
    /// echo reproduces the run even if defaults change.
    pub fn resolved(&self, exp: &Experiment, stepper: StepperKind, dt: f64) -> RunConfig {
        RunConfig {
            experiment: Some(exp.name),
            model: Some(exp.model),
            stepper: Some(stepper),
            steppers: self.steppers.clone(),
            dt: Some(dt),
            dts: Some(exp.dts.clone()),
            t_final: Some(exp.t_final),
            grid: Some([exp.nx, exp.ny]),
            seed: Some(exp.seed),
            chi: None,
            beta: Some(exp.beta),
            solver: Some(exp.solver),
            train: Some(exp.train),
            out_dir: self.out_dir.clone(),
            cache_dir: self.cache_dir.clone(),
            full: self.full,
            clamp_prediction_nonneg: exp.model.clamp_prediction_nonneg,
            snapshots: self.snapshots,
            workers: self.workers,
            repeats: self.repeats,
        }
    }
}

/// Parses `"50x25"` as `[nx, ny]`.
pub fn parse_grid(s: &str) -> Result<[usize; 2]> {
    let bad = || KsError::InvalidParameter(format!("grid must look like 50x25, got '{s}'"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let nx = a.trim().parse().map_err(|_| bad())?;
    let ny = b.trim().parse().map_err(|_| bad())?;
    if nx == 0 || ny == 0 {
        return Err(KsError::ZeroCount { nx, ny });
    }
    Ok([nx, ny])
}

/// Parses a comma-separated list of step sizes.
pub fn parse_dts(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| KsError::InvalidParameter(format!("bad dt '{t}' in list")))
        })
        .collect()
}
