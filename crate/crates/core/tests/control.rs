use nalgebra::{dmatrix, DMatrix};
use poincare_upo::control::{
    active_closed_loop_spectrum, controllability, lmi_depth, minimal_radius, solve_lmi, verify_certificate,
    LmiProblem,
};
use poincare_upo::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn saddle() -> LmiProblem {
    let a = dmatrix![1.8, 0.3; 0.0, 0.5];
    let b = dmatrix![0.4; 1.0];
    LmiProblem::new(a, b, 1.0, 1e-6).unwrap()
}

// Uniform draws of (Q, Y) inside the ball, checked by the certificate.
fn random_search(prob: &LmiProblem, draws: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (prob.n(), prob.k());
    let mut hits = 0;
    for _ in 0..draws {
        let q0: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = (&q0 + q0.transpose()) * 0.5 + DMatrix::identity(n, n) * rng.random_range(0.0..2.0);
        let y: DMatrix<f64> = DMatrix::from_fn(k, n, |_, _| rng.random_range(-2.0..2.0));
        let norm = (q.norm_squared() + y.norm_squared()).sqrt();
        let scale = prob.radius * rng.random_range(0.0f64..1.0).powf(1.0 / 7.0) / norm;
        if verify_certificate(prob, &(q * scale), &(y * scale)).valid {
            hits += 1;
        }
    }
    hits
}

#[test]
fn infeasibility_agrees_with_random_search() {
    let base = saddle();
    let rmin = minimal_radius(&base).unwrap();
    assert!(rmin > 0.0);

    let below = base.with_radius(0.9 * rmin);
    assert!(matches!(solve_lmi(&below), Err(Error::Infeasible { .. })));
    assert_eq!(random_search(&below, 200_000, 1), 0);

    // The search is able to find points once the set is not tiny.
    let above = base.with_radius(3.0 * rmin);
    let sol = solve_lmi(&above).unwrap();
    assert!(verify_certificate(&above, &sol.q, &sol.y).valid);
    assert!(random_search(&above, 200_000, 2) > 0);
}

#[test]
fn radius_threshold_is_sharp() {
    let base = saddle();
    let rmin = minimal_radius(&base).unwrap();
    assert!(solve_lmi(&base.with_radius(1.01 * rmin)).is_ok());
    assert!(solve_lmi(&base.with_radius(0.99 * rmin)).is_err());
    let d = lmi_depth(&base).unwrap();
    assert!((rmin - base.margin / d).abs() <= 1e-12 * rmin);
}

#[test]
fn gains_place_spectrum_inside_unit_disk() {
    let prob = saddle().with_radius(1e6);
    let sol = solve_lmi(&prob).unwrap();
    let eig = active_closed_loop_spectrum(&prob, &sol.k_active);
    assert!(eig.iter().all(|l| l.norm() < 1.0), "{eig:?}");
    let kf = prob.embed(&sol.k_active);
    assert_eq!(prob.reduce(&kf), sol.k_active);
}

#[test]
fn uncontrollable_unstable_mode_is_infeasible() {
    let a = dmatrix![1.5, 0.0; 0.0, 0.5];
    let b = dmatrix![0.0; 1.0];
    assert_eq!(controllability(&a, &b).unwrap().rank, 1);
    let prob = LmiProblem::new(a, b, 1e6, 1e-9).unwrap();
    assert!(matches!(solve_lmi(&prob), Err(Error::Infeasible { .. })));
    assert!(matches!(minimal_radius(&prob), Err(Error::Infeasible { .. })));
}

#[test]
fn solver_is_deterministic() {
    let prob = saddle().with_radius(10.0);
    assert_eq!(solve_lmi(&prob).unwrap(), solve_lmi(&prob).unwrap());
}

#[test]
fn bad_dimensions_are_rejected() {
    let a = DMatrix::<f64>::identity(3, 3);
    let b = DMatrix::<f64>::zeros(2, 1);
    assert!(matches!(LmiProblem::new(a.clone(), b.clone(), 1.0, 1e-9), Err(Error::Dimension(_))));
    assert!(matches!(controllability(&a, &b), Err(Error::Dimension(_))));
    assert!(LmiProblem::new(a, DMatrix::zeros(3, 1), -1.0, 1e-9).is_err());
}
