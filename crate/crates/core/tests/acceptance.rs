//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.
//!
//! Studies run at desk scale on the presets; reference fields are cached in
//! the target's scratch directory, so reruns skip the fine-step runs.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kschem::harness::{comparison_study, convergence_order, Experiment, ExperimentName, StudyOptions, StudyResult};
use kschem::linsolve::{dense_oracle_solve, solve, CsrMatrix, SolverConfig, SparseSystem};
use kschem::mesh::Rect;
use kschem::scheme::{assemble_u_system, audit_m_matrix, limiter_s, GrowthTerm};
use kschem::slnn::{lm_train, Normalizer, Samples, StopReason};
use kschem::{Field, Mesh, ModelSpec, NetworkState, StepperKind, TrainConfig};

type Outcome = Result<String, String>;

const SEMI: StepperKind = StepperKind::SemiImplicit;
const EST: StepperKind = StepperKind::Estli;
const SST: StepperKind = StepperKind::Sstli;

fn scratch() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("kschem-acceptance")
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Studies {
    results: Vec<(ExperimentName, StudyResult)>,
}

impl Studies {
    fn run() -> Result<Self, String> {
        let mut results = Vec::new();
        for name in [ExperimentName::Embryonic, ExperimentName::GrowthQuadratic, ExperimentName::VolumeFilling] {
            let exp = Experiment::preset(name, false);
            let opts = StudyOptions { cache_dir: Some(scratch().join("refs")), ..StudyOptions::default() };
            let t = Instant::now();
            let res = comparison_study(&exp, &StepperKind::ALL, &opts).map_err(|e| format!("{} study: {e}", name.as_str()))?;
            println!("  study {} done in {:.0} s", name.as_str(), t.elapsed().as_secs_f64());
            for r in &res.rows {
                println!(
                    "    {:<13} dt={:<6} steps={:<5} trainings={:<5} l2={:.3e} wall={:.2}s",
                    r.stepper.as_str(),
                    r.dt,
                    r.steps,
                    r.trainings,
                    r.l2_error,
                    r.wall_s
                );
            }
            results.push((name, res));
        }
        Ok(Self { results })
    }

    fn get(&self, name: ExperimentName) -> &StudyResult {
        &self.results.iter().find(|(n, _)| *n == name).expect("study ran").1
    }
}

fn c1_limiter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(0.01..2.0);
        let chi = rng.random_range(0.1..200.0);
        let eps = rng.random_range(0.0..1.0) * d;
        for _ in 0..100_000 {
            let x: f64 = rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-4.0..3.0));
            let odd = limiter_s(x, d, chi, eps) - limiter_s(-x, d, chi, eps);
            worst = worst.max((odd - x).abs());
            if d + chi * limiter_s(x, d, chi, eps) < eps {
                return Err(format!("D + chi S(x) < eps at x={x}, D={d}, chi={chi}, eps={eps}"));
            }
        }
    }
    let m = ModelSpec::embryonic(0.25, 2.0);
    let s = |x| limiter_s(x, m.d_u, 2.0, m.eps_s);
    let exact = s(1.0) == 1.0 && s(-1.0) == 0.0 && s(0.1) == 0.05;
    check(worst == 0.0 && exact, format!("2e6 samples, max |S(x)-S(-x)-x| = {worst:e}, S(1), S(-1), S(0.1) = {}, {}, {}", s(1.0), s(-1.0), s(0.1)))
}

fn c2_conservation() -> Outcome {
    let exp = Experiment::preset(ExperimentName::Embryonic, false);
    let mesh = exp.mesh().map_err(|e| e.to_string())?;
    let (u0, _) = exp.initial_data(&mesh);
    let m0 = mesh.integral(&u0.values);
    let mut worst = 0.0f64;
    for stepper in StepperKind::ALL {
        let s = exp.run(&mesh, stepper, 0.1, 0).map_err(|e| e.to_string())?;
        for d in &s.diagnostics {
            worst = worst.max((d.mass - m0).abs() / m0);
        }
    }
    check(worst <= 1e-10, format!("embryonic 50x25, T=20, dt=0.1, three steppers: max relative mass drift {worst:.2e}"))
}

fn c3_positivity() -> Outcome {
    let mut cases: Vec<(String, Experiment, f64)> = Vec::new();
    for name in [ExperimentName::Embryonic, ExperimentName::GrowthQuadratic, ExperimentName::VolumeFilling] {
        let e = Experiment::preset(name, false);
        let dt = e.dts[0];
        cases.push((name.as_str().into(), e, dt));
    }
    for chi in [6.0, 120.0] {
        cases.push((format!("growth_cubic chi={chi}"), Experiment::growth_cubic(chi, false), 0.1));
    }
    cases.push(("embryonic dt=5".into(), Experiment::preset(ExperimentName::Embryonic, false), 5.0));
    let mut lowest = f64::INFINITY;
    for (label, exp, dt) in &cases {
        let mesh = exp.mesh().map_err(|e| e.to_string())?;
        for stepper in StepperKind::ALL {
            let s = exp.run(&mesh, stepper, *dt, 0).map_err(|e| format!("{label} {}: {e}", stepper.as_str()))?;
            let min = s.diagnostics.iter().map(|d| d.min_u).fold(f64::INFINITY, f64::min);
            let finite = s.u_final.is_finite() && s.c_final.as_ref().is_none_or(|c| c.is_finite());
            if !(min >= 0.0) || !finite {
                return Err(format!("{label} {} dt={dt}: min u = {min:e}, finite = {finite}", stepper.as_str()));
            }
            lowest = lowest.min(min);
        }
    }
    check(true, format!("{} configurations x 3 steppers, min u over all steps {lowest:.2e}, all finite", cases.len()))
}

fn c4_orders(st: &Studies) -> Outcome {
    let anchor = convergence_order(&[(0.1, 1.630e-2), (0.01, 1.672e-3)]).map_err(|e| e.to_string())?.pairwise[0];
    let mut ok = (anchor - 0.989).abs() <= 1e-3;
    let mut parts = vec![format!("anchor {anchor:.4}")];
    for name in [ExperimentName::Embryonic, ExperimentName::GrowthQuadratic] {
        let res = st.get(name);
        for s in StepperKind::ALL {
            let slope = res.fit(s).map(|f| f.slope).unwrap_or(f64::NAN);
            ok &= (0.8..=1.2).contains(&slope);
            parts.push(format!("{}/{} {slope:.3}", name.as_str(), s.as_str()));
        }
    }
    check(ok, parts.join(", "))
}

fn c5_accuracy(st: &Studies) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, res) in &st.results {
        let exp = Experiment::preset(*name, false);
        for &dt in &exp.dts[exp.dts.len() - 2..] {
            let semi = res.row(SEMI, dt).expect("row").l2_error;
            for s in [EST, SST] {
                let ratio = res.row(s, dt).expect("row").l2_error / semi;
                ok &= ratio <= 0.5;
                parts.push(format!("{}/{}/{dt} {ratio:.3}", name.as_str(), s.as_str()));
            }
        }
    }
    check(ok, format!("error ratio to semi-implicit: {}", parts.join(", ")))
}

fn c6_efficiency(st: &Studies) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, res) in &st.results {
        for r in res.rows.iter().filter(|r| r.stepper == SST && r.steps >= 50) {
            let est = res.row(EST, r.dt).expect("row").trainings;
            if r.trainings >= est {
                ok = false;
                parts.push(format!("{} dt={}: sstli {} >= estli {est} trainings", name.as_str(), r.dt, r.trainings));
            }
        }
        // Timing at the smallest dt, best of interleaved repeats.
        let mut exp = Experiment::preset(*name, false);
        let dt = exp.min_dt();
        exp.dts = vec![dt];
        let opts = StudyOptions { repeats: 3, cache_dir: Some(scratch().join("refs")), ..StudyOptions::default() };
        let timing = comparison_study(&exp, &StepperKind::ALL, &opts).map_err(|e| e.to_string())?;
        let g = |s| timing.row(s, dt).and_then(|r| r.gamma_pct).unwrap_or(f64::NAN);
        let (g_est, g_sst) = (g(EST), g(SST));
        ok &= g_sst < g_est;
        parts.push(format!("{} dt={dt}: gamma sstli {g_sst:.2}% vs estli {g_est:.2}%", name.as_str()));
    }
    check(ok, format!("training counts sstli < estli on every row with >= 50 steps; {}", parts.join(", ")))
}

/// Normal equations `G p = J^T t` by Cramer's rule.
fn normal_equations(x1: &[f64], x2: &[f64], t: &[f64]) -> [f64; 3] {
    let mut g = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for k in 0..t.len() {
        let row = [x1[k], x2[k], 1.0];
        for i in 0..3 {
            b[i] += row[i] * t[k];
            for j in 0..3 {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&g);
    let mut p = [0.0; 3];
    for (c, out) in p.iter_mut().enumerate() {
        let mut m = g;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        *out = det(&m) / d;
    }
    p
}

fn c7_lm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let cfg = TrainConfig { eps_train: 1e-300, max_iter: 1000, ..TrainConfig::default() };
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = 10f64.powf(rng.random_range(1.0..=4.0)).round() as usize;
        let truth: [f64; 3] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = x1.iter().map(|v| 0.6 * v + 0.4 * rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..n)
            .map(|k| truth[0] * x1[k] + truth[1] * x2[k] + truth[2] + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        let oracle = normal_equations(&x1, &x2, &t);
        let start = NetworkState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), Normalizer::Identity);
        let samples = Samples::new(x1, x2, t).map_err(|e| e.to_string())?;
        let (w, rep) = lm_train(&samples, &start, &cfg).map_err(|e| e.to_string())?;
        if rep.stop != StopReason::GradMin {
            return Err(format!("instance {i} (n={n}) stopped on {}", rep.stop.as_str()));
        }
        for (a, b) in [w.w1, w.w2, w.w0].iter().zip(oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-6, format!("100 instances, n in [10, 1e4], max parameter deviation {worst:.2e}"))
}

fn c8_state_machine() -> Outcome {
    common::check_reference_trace()?;
    Ok(format!("scripted trace of {} levels visits all {} decision paths", common::TRACE_LEVELS.len(), common::all_paths().len()))
}

fn random_m_matrix(n: usize, rng: &mut ChaCha8Rng) -> SparseSystem {
    let mut trip = Vec::new();
    let mut colsum = vec![0.0; n];
    for i in 0..n {
        for _ in 0..4 {
            let j = rng.random_range(0..n);
            if j != i {
                let v = -rng.random_range(0.0..1.0);
                trip.push((i, j, v));
                trip.push((j, i, 0.0));
                colsum[j] -= v;
            }
        }
    }
    for (i, s) in colsum.iter().enumerate() {
        trip.push((i, i, s + rng.random_range(0.01..1.0)));
    }
    let rhs = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    SparseSystem::new(CsrMatrix::from_triplets(n, &trip).expect("valid triplets"), rhs).expect("valid system")
}

fn c9_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let n = if i == 49 { 2000 } else { 10f64.powf(rng.random_range(1.0..3.3)).round() as usize };
        let sys = random_m_matrix(n, &mut rng);
        if !audit_m_matrix(&sys.matrix).passes() {
            return Err(format!("generated system {i} is not an M-matrix"));
        }
        let x = solve(&sys, &SolverConfig::default()).map_err(|e| e.to_string())?;
        let y = dense_oracle_solve(&sys).map_err(|e| e.to_string())?;
        let num = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let den = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(num / den);
    }
    let mesh = Mesh::rect(Rect::new(-8.0, 8.0, -8.0, 8.0), 20, 20).map_err(|e| e.to_string())?;
    let models = [
        ModelSpec::embryonic(0.25, 2.0),
        ModelSpec::growth(0.0625, 6.0, 16.0, GrowthTerm::Quadratic { rate: 2.0 }),
        ModelSpec::volume_filling(0.1, 10.0, 1.0),
        ModelSpec::growth(0.0625, 120.0, 32.0, GrowthTerm::Cubic { rate: 1.0 }),
    ];
    let n = mesh.num_cells();
    let mut audits = 0;
    for model in models {
        for _ in 0..20 {
            let c = Field::concentration((0..n).map(|_| rng.random_range(0.0..5.0)).collect());
            let u = Field::density((0..n).map(|_| rng.random_range(0.0..2.0)).collect());
            let ut = Field::density((0..n).map(|_| rng.random_range(0.0..1.5)).collect());
            let dt = 10f64.powf(rng.random_range(-3.0..0.7));
            let sys = assemble_u_system(&mesh, &model, &c, &u, Some(&ut), dt).map_err(|e| e.to_string())?;
            let audit = audit_m_matrix(&sys.matrix);
            if !audit.passes() {
                return Err(format!("{:?} u-matrix failed the audit: {audit:?}", model.variant));
            }
            audits += 1;
        }
    }
    check(worst <= 1e-10, format!("50 systems up to n=2000, max relative deviation {worst:.2e}; {audits} u-matrix audits passed"))
}

fn c10_determinism() -> Outcome {
    let study_csv = |tag: &str| -> Result<Vec<String>, String> {
        let out = scratch().join(format!("determinism-{tag}"));
        let _ = std::fs::remove_dir_all(&out);
        let out_s = out.to_string_lossy().to_string();
        let cache = out.join("cache").to_string_lossy().to_string();
        let args = [
            "kschem", "study", "--experiment", "embryonic", "--grid", "20x10", "--t-final", "2", "--dts", "0.2,0.1,0.05",
            "--out", &out_s, "--cache", &cache,
        ];
        let code = kschem::cli::main_with_args(args);
        if code != 0 {
            return Err(format!("study exited with {code}"));
        }
        let text = std::fs::read_to_string(out.join("study.csv")).map_err(|e| e.to_string())?;
        // drop wall_s, gamma_pct, network_s
        Ok(text.lines().map(|l| l.split(',').take(6).collect::<Vec<_>>().join(",")).collect())
    };
    let a = study_csv("a")?;
    let b = study_csv("b")?;
    check(a == b && a.len() == 10, format!("two invocations, {} rows, identical outside wall-time columns: {}", a.len() - 1, a == b))
}

fn main() {
    std::fs::create_dir_all(scratch()).expect("scratch dir");
    let mut failed = 0;
    let mut report = |id: u32, title: &str, t: Instant, outcome: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {id} ({title}, {secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id} ({title}, {secs:.1} s): {msg}");
            }
        }
    };

    let t = Instant::now();
    report(1, "limiter", t, c1_limiter());
    let t = Instant::now();
    report(2, "conservation", t, c2_conservation());
    let t = Instant::now();
    report(3, "positivity", t, c3_positivity());

    let t = Instant::now();
    match Studies::run() {
        Ok(st) => {
            println!("  desk studies took {:.0} s", t.elapsed().as_secs_f64());
            report(4, "first-order convergence", t, c4_orders(&st));
            let t = Instant::now();
            report(5, "accuracy advantage", t, c5_accuracy(&st));
            let t = Instant::now();
            report(6, "efficiency structure", t, c6_efficiency(&st));
        }
        Err(e) => {
            for (id, title) in [(4, "first-order convergence"), (5, "accuracy advantage"), (6, "efficiency structure")] {
                report(id, title, t, Err(e.clone()));
            }
        }
    }

    let t = Instant::now();
    report(7, "LM oracle", t, c7_lm_oracle());
    let t = Instant::now();
    report(8, "SST state machine", t, c8_state_machine());
    let t = Instant::now();
    report(9, "solver oracle", t, c9_solver());
    let t = Instant::now();
    report(10, "determinism", t, c10_determinism());

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
