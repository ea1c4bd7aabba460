use proptest::prelude::*;

use kschem::harness::{convergence_order, perturbation_alpha, relative_error, ErrorNorm, Region};
use kschem::linsolve::{dense_oracle_solve, solve, CsrMatrix, SolverConfig, SparseSystem};
use kschem::mesh::Rect;
use kschem::scheme::{assemble_u_system, audit_m_matrix, limiter_s};
use kschem::slnn::{fit_normalizer, lm_train, predict, Normalizer, Samples};
use kschem::{Field, Mesh, ModelSpec, NetworkState, TrainConfig};

fn mesh(nx: usize, ny: usize) -> Mesh {
    Mesh::rect(Rect::new(-1.0, 2.0, 0.0, 1.5), nx, ny).unwrap()
}

fn field_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn limiter_odd_part_is_identity(x in -50.0f64..50.0, d in 0.01f64..2.0, chi in 0.1f64..200.0, frac in 0.0f64..1.0) {
        let eps = frac * d;
        let diff = limiter_s(x, d, chi, eps) - limiter_s(-x, d, chi, eps);
        prop_assert!((diff - x).abs() <= 1e-12 * x.abs().max(1.0));
        prop_assert!(d + chi * limiter_s(x, d, chi, eps) >= eps - 1e-12);
    }

    #[test]
    fn lp_norm_is_homogeneous(v in field_strategy(12), a in -10.0f64..10.0, p in 1.0f64..6.0) {
        let m = mesh(4, 3);
        let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
        let lhs = m.lp_norm(&scaled, p).unwrap();
        let rhs = a.abs() * m.lp_norm(&v, p).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }

    #[test]
    fn normalizer_round_trips(v in prop::collection::vec(-1e3f64..1e3, 1..40), probe in -1e3f64..1e3) {
        let n = fit_normalizer([&v[..]]);
        for &x in &v {
            let y = n.normalize(x);
            let constant = matches!(n, Normalizer::Offset { .. });
            prop_assert!(constant || (-1.0 - 1e-12..=1.0 + 1e-12).contains(&y));
        }
        let back = n.denormalize(n.normalize(probe));
        prop_assert!((back - probe).abs() <= 1e-9 * probe.abs().max(1.0));
    }

    #[test]
    fn lm_error_never_increases(
        x1 in prop::collection::vec(-1.0f64..1.0, 5..60),
        w in prop::array::uniform3(-1.0f64..1.0),
        noise in 0.0f64..0.5,
    ) {
        let x2: Vec<f64> = x1.iter().enumerate().map(|(i, v)| (v * 3.0 + i as f64).sin()).collect();
        let t: Vec<f64> = x1.iter().zip(&x2).enumerate()
            .map(|(i, (a, b))| 0.3 * a - 0.7 * b + 0.1 + noise * ((i * 7919) as f64).sin())
            .collect();
        let s = Samples::new(x1, x2, t).unwrap();
        let cfg = TrainConfig { eps_train: 1e-14, ..TrainConfig::default() };
        let start = NetworkState::new(w[0], w[1], w[2], Normalizer::Identity);
        let (_, rep) = lm_train(&s, &start, &cfg).unwrap();
        for pair in rep.mse_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
        prop_assert_eq!(*rep.mse_trace.last().unwrap(), rep.mse);
    }

    #[test]
    fn prediction_is_affine_in_inputs(
        a in field_strategy(8), b in field_strategy(8), c in field_strategy(8), d in field_strategy(8),
        w in prop::array::uniform3(-2.0f64..2.0), lam in -2.0f64..3.0,
    ) {
        let norm = fit_normalizer([&a[..], &b[..]]);
        let net = NetworkState::new(w[0], w[1], w[2], norm);
        let mix = |p: &[f64], q: &[f64]| Field::density(p.iter().zip(q).map(|(x, y)| lam * x + (1.0 - lam) * y).collect());
        let f = |p: &[f64], q: &[f64]| predict(&net, &Field::density(p.to_vec()), &Field::density(q.to_vec())).unwrap();
        let lhs = predict(&net, &mix(&a, &c), &mix(&b, &d)).unwrap();
        let (p1, p2) = (f(&a, &b), f(&c, &d));
        for k in 0..8 {
            let rhs = lam * p1.values[k] + (1.0 - lam) * p2.values[k];
            prop_assert!((lhs.values[k] - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn relative_error_is_scale_invariant(v in prop::collection::vec(0.1f64..5.0, 12), s in 0.5f64..1.5) {
        let m = mesh(4, 3);
        let r = Field::density(v.clone());
        let u = Field::density(v.iter().map(|x| s * x).collect());
        for norm in [ErrorNorm::L2, ErrorNorm::Linf] {
            let e = relative_error(&m, &u, &r, norm).unwrap();
            prop_assert!((e - (s - 1.0).abs()).abs() <= 1e-12);
        }
    }

    #[test]
    fn order_fit_recovers_power_law(c in 0.01f64..10.0, q in 0.5f64..3.0) {
        let pts: Vec<(f64, f64)> = [0.2, 0.1, 0.05, 0.02].iter().map(|&dt| (dt, c * f64::powf(dt, q))).collect();
        let fit = convergence_order(&pts).unwrap();
        prop_assert!((fit.slope - q).abs() < 1e-10);
        for o in fit.pairwise {
            prop_assert!((o - q).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbation_is_seed_deterministic(seed in any::<u64>()) {
        let m = mesh(6, 5);
        let region = Region::Rect { rect: Rect::new(-0.5, 1.0, 0.2, 1.0) };
        let a = perturbation_alpha(&m, &region, seed);
        prop_assert_eq!(&a, &perturbation_alpha(&m, &region, seed));
        for (k, v) in a.values.iter().enumerate() {
            if region.contains(m.center(k)) {
                prop_assert!((0.0..=1.0).contains(v));
            } else {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn u_matrices_are_m_matrices(
        c in prop::collection::vec(-3.0f64..3.0, 30),
        u in prop::collection::vec(0.0f64..2.0, 30),
        dt in 0.001f64..5.0,
    ) {
        let m = mesh(6, 5);
        let models = [
            ModelSpec::embryonic(0.25, 2.0),
            ModelSpec::volume_filling(0.1, 10.0, 1.0),
        ];
        for model in models {
            let sys = assemble_u_system(&m, &model, &Field::concentration(c.clone()), &Field::density(u.clone()), Some(&Field::density(u.clone())), dt).unwrap();
            prop_assert!(audit_m_matrix(&sys.matrix).passes());
        }
    }

    #[test]
    fn sparse_solve_matches_dense(n in 2usize..60, seed in any::<u64>()) {
        let sys = random_m_system(n, seed);
        let x = solve(&sys, &SolverConfig::default()).unwrap();
        let y = dense_oracle_solve(&sys).unwrap();
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-10 * scale.max(1.0));
        }
    }
}

/// Column-dominant M-matrix with a few random couplings per row.
pub fn random_m_system(n: usize, seed: u64) -> SparseSystem {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut trip = Vec::new();
    let mut colsum = vec![0.0; n];
    for i in 0..n {
        for _ in 0..3 {
            let j = rng.random_range(0..n);
            if j != i {
                let v = -rng.random_range(0.0..1.0);
                trip.push((i, j, v));
                colsum[j] += -v;
            }
        }
    }
    for (i, s) in colsum.iter().enumerate() {
        trip.push((i, i, s + rng.random_range(0.1..1.0)));
    }
    let rhs = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    SparseSystem::new(CsrMatrix::from_triplets(n, &trip).unwrap(), rhs).unwrap()
}
