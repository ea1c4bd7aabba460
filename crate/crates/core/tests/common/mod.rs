//! Scripted propagator and trainer for driving the steppers on one-cell
//! fields. Network states carry only a bias, so every prediction equals the
//! bias of the weights that produced it and every distance is known in
//! advance.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use kschem::integrate::{sst_advance, Branch, Propagator, SstState, Trainer};
use kschem::slnn::{Normalizer, StopReason, TrainReport};
use kschem::{Field, NetworkState, Result};

pub fn scalar(v: f64) -> Field {
    Field::density(vec![v])
}

pub fn bias(b: f64) -> NetworkState {
    NetworkState::new(b, 0.0, 0.0, Normalizer::Identity)
}

/// Returns the scripted levels in order and records the prediction each
/// solve received.
pub struct ScriptedProp {
    pub outputs: VecDeque<f64>,
    pub predictions: Vec<Option<f64>>,
}

impl ScriptedProp {
    pub fn new(outputs: &[f64]) -> Self {
        Self { outputs: outputs.iter().copied().collect(), predictions: Vec::new() }
    }
}

impl Propagator for ScriptedProp {
    fn advance(&mut self, _u: &Field, _c: Option<&Field>, prediction: Option<&Field>) -> Result<(Field, Option<Field>)> {
        self.predictions.push(prediction.map(|p| p.values[0]));
        let next = self.outputs.pop_front().expect("script ran out of levels");
        Ok((scalar(next), None))
    }

    fn distance(&self, a: &Field, b: &Field) -> f64 {
        (a.values[0] - b.values[0]).abs()
    }
}

/// Hands out the scripted biases and records the starting bias of every call.
pub struct ScriptedTrainer {
    pub biases: VecDeque<f64>,
    pub inits: Vec<f64>,
    pub random_inits: usize,
}

pub const RANDOM_BIAS: f64 = -42.0;

impl ScriptedTrainer {
    pub fn new(biases: &[f64]) -> Self {
        Self { biases: biases.iter().copied().collect(), inits: Vec::new(), random_inits: 0 }
    }
}

impl Trainer for ScriptedTrainer {
    fn random_init(&mut self) -> NetworkState {
        self.random_inits += 1;
        NetworkState { norm: None, ..bias(RANDOM_BIAS) }
    }

    fn train(&mut self, _a: &Field, _b: &Field, _c: &Field, w_init: &NetworkState) -> Result<(NetworkState, TrainReport)> {
        self.inits.push(w_init.w0);
        let b = self.biases.pop_front().expect("script ran out of weights");
        let report = TrainReport { iterations: 1, mse: 0.0, stop: StopReason::Goal, mse_trace: vec![0.0] };
        Ok((bias(b), report))
    }
}

#[derive(Debug, PartialEq)]
pub struct TraceStep {
    pub n: usize,
    pub branch: Branch,
    pub path: Vec<u8>,
    pub trained: bool,
    /// Bias of the weights recorded for the new level.
    pub w_level: f64,
}

/// Levels `u^1..` of the reference trace. Comments give the decision taken
/// at the level each value becomes current.
pub const TRACE_LEVELS: [f64; 12] = [
    1.0,  // boot
    2.0,  // boot, then first training
    3.0,  // n=3: |3-3| = 0 <= 1/10             -> 9
    4.0,  // n=4: |3-4| = 1 > 1/10              -> 5
    5.0,  // n=5: 0.5 < 2, then 0.5 > 1/10      -> 3,4,5
    5.6,  // n=6: |6.2-5.6| = 0.6 >= |5.5-5.6|  -> 6
    5.52, // n=7: 0.02 > 0.08/10                -> 8
    7.1,  // n=8: 0.1 < 1.6, 0.1 <= 1.58/10     -> 3,4,9
    8.0,  // n=9: |7-8| = 1 > 0.9/10            -> 5
    7.2,  // n=10: 1.8 >= 0.2                   -> 6
    7.001, // n=11: 0.001 <= 0.199/10           -> 9
    7.5,
];

/// Biases returned by the successive trainings of the reference trace.
pub const TRACE_BIASES: [f64; 5] = [3.0, 5.5, 6.2, 7.0, 9.0];

pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub state: SstState,
    pub prop: ScriptedProp,
    pub trainer: ScriptedTrainer,
}

/// Runs the reference trace with `beta = 10`.
pub fn run_reference_trace() -> Result<Trace> {
    let mut st = SstState::new(scalar(0.0), None);
    let mut prop = ScriptedProp::new(&TRACE_LEVELS);
    let mut trainer = ScriptedTrainer::new(&TRACE_BIASES);
    let mut steps = Vec::new();
    for _ in 0..TRACE_LEVELS.len() {
        let n = st.hist.n;
        let before = st.trainings;
        let rec = sst_advance(&mut st, &mut prop, &mut trainer, 10.0)?;
        steps.push(TraceStep {
            n,
            branch: rec.branch,
            path: rec.path,
            trained: st.trainings > before,
            w_level: st.w_prev.map(|w| w.w0).unwrap_or(f64::NAN),
        });
    }
    Ok(Trace { steps, state: st, prop, trainer })
}

/// Every outcome of the controller, as decision paths.
pub fn all_paths() -> BTreeSet<Vec<u8>> {
    [vec![1], vec![2], vec![4, 9], vec![4, 5], vec![3, 4, 9], vec![3, 4, 5], vec![3, 6], vec![7, 9], vec![7, 8]]
        .into_iter()
        .collect()
}

/// Checks the reference trace against the expected decisions; returns a
/// description of the first mismatch.
pub fn check_reference_trace() -> std::result::Result<(), String> {
    let t = run_reference_trace().map_err(|e| format!("trace failed: {e}"))?;
    let expected: [(usize, Branch, &[u8], bool, f64); 12] = [
        (0, Branch::Boot, &[1], false, f64::NAN),
        (1, Branch::Boot, &[1], false, f64::NAN),
        (2, Branch::Boot, &[2], true, 3.0),
        (3, Branch::S9, &[4, 9], false, 3.0),
        (4, Branch::S5, &[4, 5], true, 5.5),
        (5, Branch::S5, &[3, 4, 5], true, 6.2),
        // step 6 takes w^{n-2}: the weights of level 4
        (6, Branch::S6, &[3, 6], false, 5.5),
        // step 8 retrains from w^{n-1}
        (7, Branch::S8, &[7, 8], true, 7.0),
        (8, Branch::S9, &[3, 4, 9], false, 7.0),
        (9, Branch::S5, &[4, 5], true, 9.0),
        (10, Branch::S6, &[3, 6], false, 7.0),
        (11, Branch::S9, &[7, 9], false, 7.0),
    ];
    for (got, (n, branch, path, trained, w)) in t.steps.iter().zip(expected) {
        let w_ok = if w.is_nan() { got.w_level.is_nan() } else { got.w_level == w };
        if got.n != n || got.branch != branch || got.path != path || got.trained != trained || !w_ok {
            return Err(format!("at n={n}: expected {branch:?} {path:?} trained={trained} w={w}, got {got:?}"));
        }
    }
    // Solves: lag for the bootstrap levels, u~ except on step 8 which solves with u-bar.
    let solves = [None, None, Some(3.0), Some(3.0), Some(5.5), Some(6.2), Some(5.5), Some(5.5), Some(7.0), Some(9.0), Some(7.0), Some(7.0)];
    if t.prop.predictions != solves {
        return Err(format!("solve inputs {:?}", t.prop.predictions));
    }
    let inits = [RANDOM_BIAS, 3.0, 5.5, 5.5, 7.0];
    if t.trainer.inits != inits || t.trainer.random_inits != 1 {
        return Err(format!("training starts {:?}", t.trainer.inits));
    }
    if t.state.trainings != 5 || t.state.steps != 12 {
        return Err(format!("counters {} trainings, {} steps", t.state.trainings, t.state.steps));
    }
    let visited: BTreeSet<Vec<u8>> = t.steps.iter().map(|s| s.path.clone()).collect();
    if visited != all_paths() {
        return Err(format!("paths visited {visited:?}"));
    }
    Ok(())
}
