use super::*;
use crate::model::testutil::{random_instance, random_theta};
use crate::model::{moment_expectations, CovarianceStructure, Subject};
use faer::linalg::solvers::SolveLstsq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Explicit double sum over all ordered record pairs.
fn brute_force_loss(data: &LongitudinalDataset, grm: &Grm, y: &[f64], theta: &VarianceComponents) -> f64 {
    let e = moment_expectations(data, grm, theta).unwrap();
    let n = y.len();
    let mut f = 0.0;
    for a in 0..n {
        for b in 0..n {
            let d = y[a] * y[b] - e[(a, b)];
            f += d * d;
        }
    }
    f
}

fn random_nnls_problem(rng: &mut impl Rng) -> NormalEquations {
    let b = Mat::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let mut d = b.transpose() * &b;
    for i in 0..5 {
        d[(i, i)] += 0.05;
    }
    NormalEquations {
        d: std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (d[(i, j)] + d[(j, i)]))),
        c: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        constant: 0.0,
        counts: PairCounts { diagonal: 0, within_subject: 0, between_subject: 0 },
    }
}

/// Projected gradient descent with step `1/L`.
fn projected_gradient(eq: &NormalEquations) -> [f64; 5] {
    let lmax = crate::linalg::sym_eigenvalues(Mat::from_fn(5, 5, |i, j| eq.d[i][j]).as_ref()).unwrap()[4];
    let step = 1.0 / lmax;
    let mut x = [0.0; 5];
    for _ in 0..2_000_000 {
        let g = eq.gradient(&x);
        let next: [f64; 5] = std::array::from_fn(|s| (x[s] - step * g[s]).max(0.0));
        let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if change < 1e-15 {
            break;
        }
    }
    x
}

#[test]
fn ols_cases() {
    let a = Mat::from_fn(4, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
    let exact = [3.0, 1.0, -1.0, -3.0];
    let (b, r) = ols_fixed_effects(&exact, &a).unwrap();
    assert!((b[0] - 3.0).abs() < 1e-12 && (b[1] + 2.0).abs() < 1e-12);
    assert!(r.iter().all(|v| v.abs() < 1e-12));
    let orth = [1.0, -1.0, -1.0, 1.0];
    let (b, r) = ols_fixed_effects(&orth, &a).unwrap();
    assert!(b.iter().all(|v| v.abs() < 1e-12));
    assert!(r.iter().zip(&orth).all(|(x, y)| (x - y).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Mat::from_fn(30, 3, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let y: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
    let (b, r) = ols_fixed_effects(&y, &a).unwrap();
    let oracle = a.qr().solve_lstsq(col_mat(&y));
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for l in 0..3 {
        assert!((oracle[(l, 0)] - b[l]).abs() < 1e-10);
        let atr: f64 = (0..30).map(|i| a[(i, l)] * r[i]).sum();
        assert!(atr.abs() <= 1e-9 * ynorm);
    }
    let dup = Mat::from_fn(5, 2, |_, _| 1.0);
    assert!(matches!(ols_fixed_effects(&[1.0; 5], &dup), Err(Error::RankDeficient { column: 1 })));
}

#[test]
fn single_record_hand_expansion() {
    let grm = Grm::from_parts(Mat::from_fn(1, 1, |_, _| 1.0), vec!["a".into()], 1).unwrap();
    let data = LongitudinalDataset::new(vec![Subject::new("a", vec![0.0], vec![2.0])], vec![]).unwrap();
    let eq = accumulate_normal_equations(&data, &grm, &[2.0]).unwrap();
    let idx = [0, 2, 4];
    for s in 0..5 {
        for k in 0..5 {
            let expect = if idx.contains(&s) && idx.contains(&k) { 2.0 } else { 0.0 };
            assert_eq!(eq.d[s][k], expect);
        }
    }
    assert_eq!(eq.c, [8.0, 0.0, 8.0, 0.0, 8.0]);
    assert_eq!(eq.constant, 16.0);
    let th = [0.3, 0.9, 0.5, 1.1, 0.7];
    let s = th[0] + th[2] + th[4];
    assert!((eq.loss(&th) - (4.0 - s) * (4.0 - s)).abs() < 1e-12);
}

#[test]
fn quadratic_form_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..5 {
        let counts: Vec<usize> = (0..8).map(|_| rng.random_range(1..5)).collect();
        let (data, grm) = random_instance(&counts, 100 + seed);
        let y = data.phenotypes();
        let eq = accumulate_normal_equations(&data, &grm, &y).unwrap();
        assert_eq!(eq.loss(&[0.0; 5]), eq.constant);
        for _ in 0..20 {
            let th = random_theta(&mut rng);
            assert!(rel(eq.loss(&th.to_array()), brute_force_loss(&data, &grm, &y, &th)) <= 1e-10);
        }
        let n = data.total_records() as u64;
        assert_eq!(eq.counts.diagonal + eq.counts.within_subject + eq.counts.between_subject, n * n);
        let ev = crate::linalg::sym_eigenvalues(Mat::from_fn(5, 5, |i, j| eq.d[i][j]).as_ref()).unwrap();
        assert!(ev[0] >= -1e-10 * ev[4]);
    }
}

#[test]
fn accumulation_is_order_invariant() {
    let (data, grm) = random_instance(&[2, 4, 1, 3, 2], 7);
    let eq = accumulate_normal_equations(&data, &grm, &data.phenotypes()).unwrap();
    let perm = [3, 0, 4, 2, 1];
    let pdata = data.subset(&perm).unwrap();
    let pgrm = grm.subset(&perm).unwrap();
    let peq = accumulate_normal_equations(&pdata, &pgrm, &pdata.phenotypes()).unwrap();
    for s in 0..5 {
        assert!(rel(eq.c[s], peq.c[s]) <= 1e-12 || (eq.c[s] - peq.c[s]).abs() < 1e-12);
        for k in 0..5 {
            assert!(rel(eq.d[s][k], peq.d[s][k]) <= 1e-12 || eq.d[s][k] == peq.d[s][k]);
        }
    }
}

#[test]
fn nnls_examples() {
    let mut eq = random_nnls_problem(&mut ChaCha8Rng::seed_from_u64(3));
    eq.d = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }));
    eq.c = [-1.0, 1.0, 1.0, 1.0, 1.0];
    let sol = solve_nnls(&eq).unwrap();
    assert_eq!(sol.theta, [0.0, 1.0, 1.0, 1.0, 1.0]);
    assert_eq!(sol.clamped, [true, false, false, false, false]);

    eq.c = [0.5, 1.0, 2.0, 1.5, 0.1];
    let sol = solve_nnls(&eq).unwrap();
    assert_eq!(sol.theta, eq.c);
    assert!(sol.clamped.iter().all(|c| !c));
}

#[test]
fn nnls_matches_projected_gradient_and_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..40 {
        let eq = random_nnls_problem(&mut rng);
        let sol = solve_nnls(&eq).unwrap();
        let pg = projected_gradient(&eq);
        let dist = sol.theta.iter().zip(&pg).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(dist <= 1e-8, "distance {dist}");
        let g = eq.gradient(&sol.theta);
        for s in 0..5 {
            if sol.clamped[s] {
                assert!(g[s] >= -1e-8);
            } else {
                assert!(g[s].abs() <= 1e-8);
            }
        }
        for _ in 0..200 {
            let p: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..3.0));
            assert!(sol.loss <= eq.loss(&p) + 1e-12);
        }
    }
}

#[test]
fn nnls_skips_singular_systems() {
    // no time variation: slope features vanish and only subsets clamping them are solvable
    let grm =
        Grm::from_parts(Mat::from_fn(2, 2, |i, k| if i == k { 1.0 } else { 0.1 }), vec!["a".into(), "b".into()], 1)
            .unwrap();
    let data = LongitudinalDataset::new(
        vec![
            Subject::new("a", vec![0.0, 0.0], vec![1.0, 0.5]),
            Subject::new("b", vec![0.0, 0.0, 0.0], vec![-0.3, 0.2, -1.0]),
        ],
        vec![],
    )
    .unwrap();
    let eq = accumulate_normal_equations(&data, &grm, &data.phenotypes()).unwrap();
    let sol = solve_nnls(&eq).unwrap();
    assert!(sol.clamped[1] && sol.clamped[3]);
}

#[test]
fn scale_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (data, grm) = random_instance(&[3; 12], 9);
    let data = data
        .with_phenotypes(&data.phenotypes().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect::<Vec<_>>())
        .unwrap();
    let fit = rehe_fit(&data, &grm).unwrap();
    let scaled = data.with_phenotypes(&data.phenotypes().iter().map(|v| 3.0 * v).collect::<Vec<_>>()).unwrap();
    let fit3 = rehe_fit(&scaled, &grm).unwrap();
    for (a, b) in fit.theta_hat.to_array().iter().zip(fit3.theta_hat.to_array()) {
        assert!((9.0 * a - b).abs() <= 1e-8 * b.abs().max(1.0));
    }
    for (a, b) in [fit.xi_hat.lambda1, fit.xi_hat.lambda2].iter().zip([fit3.xi_hat.lambda1, fit3.xi_hat.lambda2]) {
        match (a, b) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
            (None, None) => {}
            _ => panic!("definedness changed"),
        }
    }
}

#[test]
fn sampling_zero_theta_is_fixed_part() {
    let (data, grm) = random_instance(&[2, 3], 10);
    let factor = GrmFactor::new(&grm).unwrap();
    let y = sample_from_model(&[1.5, -0.5], &VarianceComponents::zero(), &data, &factor, 1).unwrap();
    let a = design_matrix(&data).unwrap();
    for (r, v) in y.iter().enumerate() {
        assert_eq!(*v, 1.5 * a[(r, 0)] - 0.5 * a[(r, 1)]);
    }
    assert_eq!(y, sample_from_model(&[1.5, -0.5], &VarianceComponents::zero(), &data, &factor, 1).unwrap());
}

#[test]
fn sampling_residual_variance() {
    let (data, grm) = random_instance(&[100; 100], 11);
    let factor = GrmFactor::new(&grm).unwrap();
    let y =
        sample_from_model(&[0.0, 0.0], &VarianceComponents::new(0.0, 0.0, 0.0, 0.0, 2.0), &data, &factor, 2).unwrap();
    let v = stats::variance(&y).unwrap();
    assert!((v - 2.0).abs() < 0.2, "variance {v}");
}

#[test]
fn sampling_covariance_matches_model() {
    let (data, grm) = random_instance(&[2, 2], 12);
    let factor = GrmFactor::new(&grm).unwrap();
    let th = VarianceComponents::new(1.0, 0.7, 0.5, 0.8, 0.3);
    let v = CovarianceStructure::assemble(&data, &grm).unwrap().assemble_v(&th);
    let reps = 2000;
    let draws: Vec<Vec<f64>> =
        (0..reps).map(|r| sample_from_model(&[0.0, 0.0], &th, &data, &factor, 1000 + r).unwrap()).collect();
    let n = 4;
    for a in 0..n {
        for b in 0..n {
            let prods: Vec<f64> = draws.iter().map(|y| y[a] * y[b]).collect();
            let m = stats::mean(&prods).unwrap();
            let se = stats::sd(&prods).unwrap() / (reps as f64).sqrt();
            assert!((m - v[(a, b)]).abs() <= 5.0 * se, "entry ({a},{b}): {m} vs {}", v[(a, b)]);
        }
    }
}

#[test]
fn bootstrap_single_replicate_and_determinism() {
    let (data, grm) = random_instance(&[4; 15], 13);
    let fit = rehe_fit(&data, &grm).unwrap();
    let one = parametric_bootstrap(&fit, &data, &grm, 1, 5).unwrap();
    assert!(one.parameters.iter().all(|p| p.emp_se.is_none() && p.mad.is_none()));
    assert!(one.parameters[0].estimate.is_some());
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| parametric_bootstrap(&fit, &data, &grm, 12, 5).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(3));
    assert!(a.parameters.iter().all(|p| p.emp_se.is_none_or(|s| s >= 0.0) && p.mad.is_none_or(|m| m >= 0.0)));
    assert!(parametric_bootstrap(&fit, &data, &grm, 0, 5).is_err());
}

#[test]
fn null_data_reaches_the_boundary() {
    let (data, grm) = random_instance(&[5; 40], 14);
    let factor = GrmFactor::new(&grm).unwrap();
    let y =
        sample_from_model(&[0.0, 0.0], &VarianceComponents::new(0.0, 0.0, 0.0, 0.0, 1.0), &data, &factor, 3).unwrap();
    let fit = rehe_fit(&data.with_phenotypes(&y).unwrap(), &grm).unwrap();
    assert!(fit.clamped.iter().take(4).any(|&c| c));
    let at_edge = |l: Option<f64>| l.is_none_or(|v| v == 0.0 || v == 1.0);
    assert!(at_edge(fit.xi_hat.lambda1) || at_edge(fit.xi_hat.lambda2));
}
