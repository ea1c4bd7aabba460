//! Single-layer network with two inputs, a bias and identity activation.
//!
//! The network maps `(u^{n-1}_K, u^n_K)` to a prediction of `u^{n+1}_K`
//! cell by cell. It is trained on the previous triple
//! `(u^{n-2}, u^{n-1}) -> u^n` with Levenberg-Marquardt. Since the activation
//! is the identity, the Jacobian of the residual is the constant design matrix
//! `[x1, x2, 1]` and every iteration is a damped 3x3 normal-equation solve.
//!
//! Training and prediction happen in normalized coordinates: one affine map,
//! fitted on all values of the training triple, sends them to `[-1, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KsError, Result};
use crate::mesh::Field;

/// Affine map to normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalizer {
    Identity,
    /// `x -> 2 (x - min) / (max - min) - 1`
    Range { min: f64, max: f64 },
    /// Constant data: `x -> x - min`.
    Offset { min: f64 },
}

impl Normalizer {
    pub fn normalize(&self, x: f64) -> f64 {
        match *self {
            Normalizer::Identity => x,
            Normalizer::Range { min, max } => 2.0 * (x - min) / (max - min) - 1.0,
            Normalizer::Offset { min } => x - min,
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        match *self {
            Normalizer::Identity => y,
            Normalizer::Range { min, max } => (y + 1.0) * 0.5 * (max - min) + min,
            Normalizer::Offset { min } => y + min,
        }
    }

    /// `(a, b)` such that `normalize(x) = a x + b`.
    pub fn affine(&self) -> (f64, f64) {
        match *self {
            Normalizer::Identity => (1.0, 0.0),
            Normalizer::Range { min, max } => {
                let a = 2.0 / (max - min);
                (a, -a * min - 1.0)
            }
            Normalizer::Offset { min } => (1.0, -min),
        }
    }

    /// Data range the map was fitted on, if any.
    pub fn range(&self) -> Option<(f64, f64)> {
        match *self {
            Normalizer::Identity => None,
            Normalizer::Range { min, max } => Some((min, max)),
            Normalizer::Offset { min } => Some((min, min)),
        }
    }
}

/// Fits the normalizer on the values of every slice.
///
/// Panics on empty input.
pub fn fit_normalizer<'a>(data: impl IntoIterator<Item = &'a [f64]>) -> Normalizer {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for slice in data {
        for &v in slice {
            min = min.min(v);
            max = max.max(v);
            any = true;
        }
    }
    assert!(any, "fit_normalizer needs at least one value");
    if max > min {
        Normalizer::Range { min, max }
    } else {
        Normalizer::Offset { min }
    }
}

/// Bias, two weights and the normalization they were trained in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub w0: f64,
    /// Weight on `u^{n-1}`.
    pub w1: f64,
    /// Weight on `u^n`.
    pub w2: f64,
    pub norm: Option<Normalizer>,
}

impl NetworkState {
    pub fn new(w0: f64, w1: f64, w2: f64, norm: Normalizer) -> Self {
        Self { w0, w1, w2, norm: Some(norm) }
    }

    /// Each parameter uniform in `[-1, 1]`; no normalizer until trained.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            w0: rng.random_range(-1.0..=1.0),
            w1: rng.random_range(-1.0..=1.0),
            w2: rng.random_range(-1.0..=1.0),
            norm: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite() && self.w1.is_finite() && self.w2.is_finite()
    }

    /// Output in normalized coordinates.
    #[inline]
    pub fn output(&self, x1: f64, x2: f64) -> f64 {
        self.w1 * x1 + self.w2 * x2 + self.w0
    }

    fn params(&self) -> [f64; 3] {
        [self.w1, self.w2, self.w0]
    }
}

/// One-step-ahead prediction `w1 u_prev + w2 u_curr + w0`, evaluated in the
/// stored normalized coordinates and mapped back.
pub fn predict(w: &NetworkState, u_prev: &Field, u_curr: &Field) -> Result<Field> {
    let norm = w.norm.ok_or(KsError::UnfittedNormalizer)?;
    if u_prev.len() != u_curr.len() {
        return Err(KsError::DimensionMismatch { expected: u_prev.len(), got: u_curr.len() });
    }
    let values = u_prev
        .values
        .iter()
        .zip(&u_curr.values)
        .map(|(&a, &b)| norm.denormalize(w.output(norm.normalize(a), norm.normalize(b))))
        .collect();
    Ok(Field::new(values, u_curr.quantity))
}

/// Mean squared error over the cells, in the network's normalized coordinates.
pub fn mse(w: &NetworkState, inputs: (&Field, &Field), targets: &Field) -> Result<f64> {
    let norm = w.norm.ok_or(KsError::UnfittedNormalizer)?;
    let n = targets.len();
    if n == 0 {
        return Err(KsError::InvalidParameter("mse needs at least one sample".into()));
    }
    if inputs.0.len() != n || inputs.1.len() != n {
        return Err(KsError::DimensionMismatch { expected: n, got: inputs.0.len().min(inputs.1.len()) });
    }
    let s: f64 = (0..n)
        .map(|k| {
            let y = w.output(norm.normalize(inputs.0.values[k]), norm.normalize(inputs.1.values[k]));
            let r = norm.normalize(targets.values[k]) - y;
            r * r
        })
        .sum();
    Ok(s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stop once the MSE is at or below this value.
    pub eps_train: f64,
    /// Stop once `||J^T r||_inf / n` is at or below this value.
    pub grad_min: f64,
    pub max_iter: usize,
    pub mu0: f64,
    pub mu_up: f64,
    pub mu_down: f64,
    /// Stop once the damping exceeds this value.
    pub mu_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps_train: 1e-3,
            grad_min: 1e-10,
            max_iter: 200,
            mu0: 1e-3,
            mu_up: 10.0,
            mu_down: 0.1,
            mu_max: 1e10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_train > 0.0
            && self.grad_min > 0.0
            && self.max_iter >= 1
            && self.mu0 > 0.0
            && self.mu_up > 1.0
            && self.mu_down > 0.0
            && self.mu_down < 1.0
            && self.mu_max > self.mu0;
        if ok {
            Ok(())
        } else {
            Err(KsError::InvalidParameter(format!(
                "training config violates eps_train > 0, grad_min > 0, max_iter >= 1, \
                 mu0 > 0, mu_up > 1 > mu_down > 0, mu_max > mu0: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Goal,
    GradMin,
    MaxIter,
    MuMax,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Goal => "goal",
            StopReason::GradMin => "grad_min",
            StopReason::MaxIter => "max_iter",
            StopReason::MuMax => "mu_max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Trial steps taken, accepted or not.
    pub iterations: usize,
    pub mse: f64,
    pub stop: StopReason,
    /// MSE after each accepted step, starting from the initial MSE.
    pub mse_trace: Vec<f64>,
}

/// Training samples `(x1, x2) -> t` already in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub target: Vec<f64>,
}

impl Samples {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if x1.len() != target.len() || x2.len() != target.len() {
            return Err(KsError::DimensionMismatch { expected: target.len(), got: x1.len().min(x2.len()) });
        }
        if target.is_empty() {
            return Err(KsError::InvalidParameter("no training samples".into()));
        }
        Ok(Self { x1, x2, target })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn residuals(&self, p: &[f64; 3], r: &mut [f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.len() {
            let v = self.target[k] - (p[0] * self.x1[k] + p[1] * self.x2[k] + p[2]);
            r[k] = v;
            s += v * v;
        }
        s / self.len() as f64
    }

    fn jtr(&self, r: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for k in 0..self.len() {
            g[0] += self.x1[k] * r[k];
            g[1] += self.x2[k] * r[k];
            g[2] += r[k];
        }
        g
    }

    /// `J^T J` for the design matrix `[x1, x2, 1]`.
    pub fn gram(&self) -> [[f64; 3]; 3] {
        let (mut a, mut b, mut c, mut d, mut e) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..self.len() {
            a += self.x1[k] * self.x1[k];
            b += self.x1[k] * self.x2[k];
            c += self.x1[k];
            d += self.x2[k] * self.x2[k];
            e += self.x2[k];
        }
        [[a, b, c], [b, d, e], [c, e, self.len() as f64]]
    }
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
pub(crate) fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col] == 0.0 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for j in col..3 {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Levenberg-Marquardt on normalized samples, starting from `w_init`.
///
/// The returned state carries the normalizer of `w_init` unchanged; callers
/// that normalize data attach their own (see [`train_on_history`]).
pub fn lm_train(samples: &Samples, w_init: &NetworkState, cfg: &TrainConfig) -> Result<(NetworkState, TrainReport)> {
    cfg.validate()?;
    if !w_init.is_finite() {
        return Err(KsError::NonFinite("initial weights".into()));
    }
    let n = samples.len() as f64;
    let mut p = w_init.params();
    let mut r = vec![0.0; samples.len()];
    let mut r_trial = vec![0.0; samples.len()];
    let mut err = samples.residuals(&p, &mut r);
    if !err.is_finite() {
        return Err(KsError::NonFinite("initial mean squared error".into()));
    }
    let mut trace = vec![err];
    let mut mu = cfg.mu0;
    let mut iterations = 0;
    let gram = samples.gram();

    let stop = loop {
        if err <= cfg.eps_train {
            break StopReason::Goal;
        }
        let g = samples.jtr(&r);
        let g_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / n;
        if g_norm <= cfg.grad_min {
            break StopReason::GradMin;
        }
        if iterations >= cfg.max_iter {
            break StopReason::MaxIter;
        }
        if mu > cfg.mu_max {
            break StopReason::MuMax;
        }
        iterations += 1;
        let mut damped = gram;
        for (i, row) in damped.iter_mut().enumerate() {
            row[i] += mu;
        }
        let Some(step) = solve3(damped, g) else {
            mu *= cfg.mu_up;
            continue;
        };
        let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
        let trial_err = samples.residuals(&trial, &mut r_trial);
        if !trial_err.is_finite() {
            return Err(KsError::NonFinite(format!("training iteration {iterations}")));
        }
        // The model is affine, so n * (E(p + s) - E(p)) = s^T G s - 2 s^T g exactly.
        // Near the optimum this change is far below one ulp of E, and comparing
        // recomputed errors would reject every step.
        let gs = [0, 1, 2].map(|i| gram[i][0] * step[0] + gram[i][1] * step[1] + gram[i][2] * step[2]);
        let change = (0..3).map(|i| step[i] * (gs[i] - 2.0 * g[i])).sum::<f64>();
        if change < 0.0 {
            p = trial;
            err = trial_err.min(err);
            std::mem::swap(&mut r, &mut r_trial);
            trace.push(err);
            mu *= cfg.mu_down;
        } else {
            mu *= cfg.mu_up;
        }
    };

    let w = NetworkState { w1: p[0], w2: p[1], w0: p[2], norm: w_init.norm };
    Ok((w, TrainReport { iterations, mse: err, stop, mse_trace: trace }))
}

/// Trains on `(u_nm2, u_nm1) -> u_n` after fitting one normalizer on all three
/// fields; the returned state carries that normalizer.
pub fn train_on_history(
    u_nm2: &Field,
    u_nm1: &Field,
    u_n: &Field,
    w_init: &NetworkState,
    cfg: &TrainConfig,
) -> Result<(NetworkState, TrainReport)> {
    let norm = fit_normalizer([&u_nm2.values[..], &u_nm1.values[..], &u_n.values[..]]);
    let map = |f: &Field| f.values.iter().map(|&v| norm.normalize(v)).collect::<Vec<_>>();
    let samples = Samples::new(map(u_nm2), map(u_nm1), map(u_n))?;
    let (mut w, report) = lm_train(&samples, w_init, cfg)?;
    w.norm = Some(norm);
    Ok((w, report))
}
