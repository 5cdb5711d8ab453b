use nalgebra::{DMatrix, Matrix6, Vector6};
use poincare_upo::control::{solve_lmi, verify_certificate, LmiProblem};
use poincare_upo::discovery::{
    build_library, ensemble_discover, linearize_at, stlsq, DiscoveredMap, DiscoveryConfig, EnsembleConfig,
    LsMethod, PolyLibrary,
};
use poincare_upo::dynamics::{cr3bp_derivative, jacobi_constant, variational_jacobian};
use poincare_upo::integrator::{propagate, IntegratorConfig};
use poincare_upo::sections::DatasetPair;
use poincare_upo::{StateVector, SystemParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state_away_from_primaries() -> impl Strategy<Value = StateVector> {
    (
        0.3f64..1.4,
        -0.4f64..0.4,
        -0.2f64..0.2,
        -0.5f64..0.5,
        -0.5f64..0.5,
        -0.2f64..0.2,
    )
        .prop_map(|(x, y, z, vx, vy, vz)| Vector6::new(x, y, z, vx, vy, vz))
        .prop_filter("near the Moon", |s| {
            let p = SystemParams::earth_moon();
            let dm = ((s[0] - 1.0 + p.mu).powi(2) + s[1] * s[1] + s[2] * s[2]).sqrt();
            dm > 0.05
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobian_matches_central_differences(s in state_away_from_primaries()) {
        let p = SystemParams::earth_moon();
        let j = variational_jacobian(&s, &p).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let mut sp = s;
            let mut sm = s;
            sp[c] += h;
            sm[c] -= h;
            let col = (cr3bp_derivative(&sp, &p).unwrap() - cr3bp_derivative(&sm, &p).unwrap()) / (2.0 * h);
            let err = (col - j.column(c)).norm();
            prop_assert!(err <= 1e-6 * (1.0 + j.column(c).norm()), "column {c}: {err:e}");
        }
    }

    #[test]
    fn jacobi_constant_is_conserved(s in state_away_from_primaries(), t in 0.1f64..2.0) {
        let p = SystemParams::earth_moon();
        let c0 = jacobi_constant(&s, &p).unwrap();
        let Ok(sf) = propagate(&s, t, &IntegratorConfig::default(), &p) else {
            // close approaches may legitimately hit the singularity floor
            return Ok(());
        };
        let c1 = jacobi_constant(&sf, &p).unwrap();
        prop_assert!((c1 - c0).abs() < 1e-9 * (1.0 + c0.abs()), "drift {:e}", c1 - c0);
    }

    #[test]
    fn linearization_is_the_degree_one_part(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = PolyLibrary::new(vec![0, 3, 4], 3).unwrap();
        let mut coefficients = DMatrix::zeros(lib.len(), 6);
        for r in 0..lib.len() {
            for c in [0, 3, 4] {
                coefficients[(r, c)] = rng.random_range(-1.0..1.0);
            }
        }
        let anchor = Vector6::new(0.8, 0.0, 0.0, 0.0, 0.2, 0.0);
        let map = DiscoveredMap { library: lib, coefficients, anchor };
        let lin = linearize_at(&map);
        let h = 1e-6;
        for &j in &[0usize, 3, 4] {
            let mut xp = anchor;
            let mut xm = anchor;
            xp[j] += h;
            xm[j] -= h;
            let fd = (map.apply(&xp) - map.apply(&xm)) / (2.0 * h);
            for &i in &[0usize, 3, 4] {
                prop_assert!((fd[i] - lin.a[(i, j)]).abs() < 1e-8);
            }
        }
    }
}

// Sparse degree-3 map over three variables with coefficients bounded away
// from the threshold.
fn planted_problem(seed: u64) -> (PolyLibrary, Vec<StateVector>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lib = PolyLibrary::new(vec![0, 1, 2], 3).unwrap();
    let mut xi = DMatrix::zeros(lib.len(), 3);
    for c in 0..3 {
        for _ in 0..4 {
            let r = rng.random_range(1..lib.len());
            let mag = rng.random_range(0.1..2.0);
            xi[(r, c)] = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    let x: Vec<StateVector> = (0..200)
        .map(|_| {
            let mut s = StateVector::zeros();
            for k in 0..3 {
                s[k] = rng.random_range(-1.0..1.0);
            }
            s
        })
        .collect();
    (lib, x, xi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stlsq_recovers_planted_cubic(seed in any::<u64>()) {
        let (lib, x, xi) = planted_problem(seed);
        let theta = build_library(&x, &lib);
        let y = &theta * &xi;
        for method in [LsMethod::PivotedQr, LsMethod::MinNorm] {
            let fit = stlsq(&theta, &y, 1e-3, method).unwrap();
            for (got, want) in fit.coefficients.iter().zip(xi.iter()) {
                prop_assert_eq!(*got == 0.0, *want == 0.0);
                prop_assert!((got - want).abs() <= 1e-8, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn lmi_solutions_carry_valid_certificates(seed in any::<u64>(), n in 2usize..5, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5));
        let b = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let prob = LmiProblem::new(a, b, 1e3, 1e-9).unwrap();
        if let Ok(sol) = solve_lmi(&prob) {
            let cert = verify_certificate(&prob, &sol.q, &sol.y);
            prop_assert!(cert.valid);
            prop_assert!(cert.min_eig_q > 0.0 && cert.min_eig_block > 0.0 && cert.min_eig_ball > 0.0);
            prop_assert!(cert.spectral_radius < 1.0);
        }
    }
}

#[test]
fn ensemble_includes_true_support_always() {
    let (lib, x, xi) = planted_problem(7);
    let theta = build_library(&x, &lib);
    let y = &theta * &xi;
    let x2: Vec<StateVector> = y
        .row_iter()
        .map(|r| {
            let mut s = StateVector::zeros();
            for k in 0..3 {
                s[k] = r[k];
            }
            s
        })
        .collect();
    let data = DatasetPair {
        source: (0..x.len()).collect(),
        x1: x,
        x2,
    };
    let cfg = DiscoveryConfig {
        degree: 3,
        lambda_sparse: 1e-3,
        method: LsMethod::PivotedQr,
    };
    let ens = ensemble_discover(&data, &StateVector::zeros(), &[0, 1, 2], &cfg, &EnsembleConfig::default()).unwrap();
    for r in 0..lib.len() {
        for c in 0..3 {
            let p = ens.inclusion_probability[(r, c)];
            if xi[(r, c)] != 0.0 {
                assert_eq!(p, 1.0);
                assert!((ens.median_map.coefficients[(r, c)] - xi[(r, c)]).abs() < 1e-8);
            } else {
                assert_eq!(p, 0.0);
            }
        }
    }
    let again = ensemble_discover(&data, &StateVector::zeros(), &[0, 1, 2], &cfg, &EnsembleConfig::default()).unwrap();
    assert_eq!(ens, again);
}

#[test]
fn stm_of_linear_flow_is_unimodular() {
    // det of the Jacobian-driven STM stays 1 because the flow is Hamiltonian.
    let p = SystemParams::earth_moon();
    let s = Vector6::new(0.85, 0.0, 0.0, 0.0, 0.15, 0.0);
    let r = poincare_upo::integrator::propagate_with_stm(&s, 1.0, &IntegratorConfig::default(), &p).unwrap();
    let det: f64 = Matrix6::from(r.stm).determinant();
    assert!((det - 1.0).abs() < 1e-9, "{det}");
}
