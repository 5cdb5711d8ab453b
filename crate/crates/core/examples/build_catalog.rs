//! Regenerates `data/catalog.csv`: L1 Lyapunov and northern L1 halo orbits
//! obtained by symmetric single shooting and pseudo-arclength continuation.
//!
//! The library itself only ingests catalogs; this tool exists so the shipped
//! catalog can be rebuilt from scratch.
//!
//! cargo run --release -p poincare-upo --example build_catalog -- <out.csv>

use nalgebra::{DMatrix, DVector, Vector3};
use poincare_upo::dynamics::{cr3bp_derivative, jacobi_constant, lagrange_points, StateVector};
use poincare_upo::integrator::{first_crossing_with_stm, Direction, IntegratorConfig};
use poincare_upo::{Result, SystemParams};

const LYAP_TARGET_C: f64 = 2.75018;
const LYAP_DC: f64 = 1.75e-4;
const HALO_TARGET_C: f64 = 1.7979;
const HALO_DC: f64 = 2.5e-4;
const N_SIDE: i32 = 8;

#[derive(Clone, Copy, PartialEq)]
enum Family {
    Lyapunov,
    Halo,
}

impl Family {
    fn free(self) -> &'static [usize] {
        match self {
            Family::Lyapunov => &[0, 4],
            Family::Halo => &[0, 2, 4],
        }
    }
    fn constrained(self) -> &'static [usize] {
        match self {
            Family::Lyapunov => &[3],
            Family::Halo => &[3, 5],
        }
    }
}

struct Shooter {
    p: SystemParams,
    cfg: IntegratorConfig,
}

struct Eval {
    residual: DVector<f64>,
    jac: DMatrix<f64>,
    half_period: f64,
    /// d(z-dot)/d(z0) at the half period, the halo bifurcation test function.
    zz: f64,
}

impl Shooter {
    fn state(&self, u: &DVector<f64>) -> StateVector {
        let mut s = StateVector::zeros();
        s[0] = u[0];
        if u.len() == 3 {
            s[2] = u[1];
            s[4] = u[2];
        } else {
            s[4] = u[1];
        }
        s
    }

    fn eval(&self, fam: Family, u: &DVector<f64>) -> Result<Eval> {
        let s0 = self.state(u);
        let (t_half, r) = first_crossing_with_stm(
            &s0,
            |s| s[1],
            Direction::Either,
            |_| true,
            10.0,
            &self.cfg,
            &self.p,
        )?;
        let sf = r.final_state;
        let f = cr3bp_derivative(&sf, &self.p)?;
        let free = fam.free();
        let cons = fam.constrained();
        let mut jac = DMatrix::zeros(cons.len(), free.len());
        let mut residual = DVector::zeros(cons.len());
        for (i, &g) in cons.iter().enumerate() {
            residual[i] = sf[g];
            for (j, &k) in free.iter().enumerate() {
                jac[(i, j)] = r.stm[(g, k)] - f[g] * r.stm[(1, k)] / f[1];
            }
        }
        let zz = r.stm[(5, 2)] - f[5] * r.stm[(1, 2)] / f[1];
        Ok(Eval {
            residual,
            jac,
            half_period: t_half,
            zz,
        })
    }

    fn jacobi(&self, u: &DVector<f64>) -> f64 {
        jacobi_constant(&self.state(u), &self.p).unwrap()
    }

    fn jacobi_grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let h = 1e-7;
        DVector::from_fn(u.len(), |i, _| {
            let mut a = u.clone();
            let mut b = u.clone();
            a[i] += h;
            b[i] -= h;
            (self.jacobi(&a) - self.jacobi(&b)) / (2.0 * h)
        })
    }

    /// Newton on `[G(u); extra(u)] = 0`.
    fn correct<F>(&self, fam: Family, mut u: DVector<f64>, extra: F) -> Option<(DVector<f64>, Eval)>
    where
        F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
    {
        for _ in 0..25 {
            let ev = self.eval(fam, &u).ok()?;
            let (e, de) = extra(&u);
            let n = u.len();
            let mut a = DMatrix::zeros(n, n);
            let mut b = DVector::zeros(n);
            let m = ev.residual.len();
            a.view_mut((0, 0), (m, n)).copy_from(&ev.jac);
            b.rows_mut(0, m).copy_from(&ev.residual);
            a.row_mut(m).copy_from(&de.transpose());
            b[m] = e;
            let res = b.norm();
            if res < 1e-12 {
                return Some((u, ev));
            }
            let du = a.lu().solve(&(-b))?;
            u += du;
            if !u.iter().all(|v| v.is_finite()) {
                return None;
            }
        }
        None
    }
}

fn null_vector(jac: &DMatrix<f64>) -> DVector<f64> {
    let n = jac.ncols();
    if n == 2 {
        DVector::from_vec(vec![-jac[(0, 1)], jac[(0, 0)]]).normalize()
    } else {
        let r0 = Vector3::new(jac[(0, 0)], jac[(0, 1)], jac[(0, 2)]);
        let r1 = Vector3::new(jac[(1, 0)], jac[(1, 1)], jac[(1, 2)]);
        let c = r0.cross(&r1).normalize();
        DVector::from_vec(vec![c[0], c[1], c[2]])
    }
}

struct Record {
    id: String,
    family: &'static str,
    state: StateVector,
    period: f64,
    jacobi: f64,
}

/// Pseudo-arclength continuation; calls `visit(u_prev, u, eval)` after each
/// accepted point and stops when it returns false.
fn continue_family<V>(
    sh: &Shooter,
    fam: Family,
    mut u: DVector<f64>,
    mut tangent: DVector<f64>,
    mut ds: f64,
    ds_max: f64,
    mut visit: V,
) where
    V: FnMut(&DVector<f64>, &DVector<f64>, &Eval) -> bool,
{
    let mut steps = 0;
    while steps < 200_000 {
        steps += 1;
        let guess = &u + &tangent * ds;
        let (t0, u0) = (tangent.clone(), u.clone());
        let out = sh.correct(fam, guess, |v| ((v - &u0).dot(&t0) - ds, t0.clone()));
        match out {
            Some((u_new, ev)) => {
                let mut t_new = null_vector(&ev.jac);
                if t_new.dot(&tangent) < 0.0 {
                    t_new = -t_new;
                }
                let prev = std::mem::replace(&mut u, u_new);
                tangent = t_new;
                if !visit(&prev, &u, &ev) {
                    return;
                }
                ds = (ds * 1.3).min(ds_max);
            }
            None => {
                ds *= 0.5;
                if ds < 1e-10 {
                    eprintln!("continuation stalled at u = {:?}", u.as_slice());
                    return;
                }
            }
        }
    }
}

fn solve_at_c(sh: &Shooter, fam: Family, u: &DVector<f64>, c_target: f64) -> Option<(DVector<f64>, Eval)> {
    sh.correct(fam, u.clone(), |v| (sh.jacobi(v) - c_target, sh.jacobi_grad(v)))
}

/// Lyapunov states are stored at the Earth-side x-axis crossing; halo states
/// at the lunar-side x-z plane crossing half a period later, as in the JPL
/// periodic-orbit catalog.
fn record(sh: &Shooter, fam: Family, u: &DVector<f64>, ev: &Eval, id: String) -> Record {
    let state = sh.state(u);
    Record {
        id,
        family: if fam == Family::Lyapunov { "lyapunov" } else { "halo" },
        state,
        period: 2.0 * ev.half_period,
        jacobi: jacobi_constant(&state, &sh.p).expect("finite state"),
    }
}

/// Targets `center + k * dc` for |k| <= N_SIDE, in the order a monotone
/// sweep meets them.
fn level_grid(center: f64, dc: f64) -> Vec<(i32, f64)> {
    (-N_SIDE..=N_SIDE).map(|k| (k, center + k as f64 * dc)).collect()
}

fn main() -> Result<()> {
    let out_path = std::env::args().nth(1).unwrap_or_else(|| "data/catalog.csv".into());
    let p = SystemParams::earth_moon();
    let cfg = IntegratorConfig::default();
    let sh = Shooter { p, cfg };
    let l1 = lagrange_points(&p)?[0].position[0];
    let mu = p.mu;
    let mut records: Vec<Record> = Vec::new();

    // Linear seed on the Earth side of L1.
    let gamma = 1.0 - mu - l1;
    let c2 = mu / gamma.powi(3) + (1.0 - mu) / (1.0 - gamma).powi(3);
    let omega = ((2.0 - c2 + (9.0 * c2 * c2 - 8.0 * c2).sqrt()) / 2.0).sqrt();
    let k = (omega * omega + 1.0 + 2.0 * c2) / (2.0 * omega);
    let ax = 1e-3;
    let seed = DVector::from_vec(vec![l1 - ax, k * ax * omega]);
    let x_fixed = seed[0];
    let (u0, ev0) = sh
        .correct(Family::Lyapunov, seed, |v| (v[0] - x_fixed, DVector::from_vec(vec![1.0, 0.0])))
        .expect("small Lyapunov orbit did not converge");
    eprintln!("seed Lyapunov: C = {:.6}, T = {:.6}", sh.jacobi(&u0), 2.0 * ev0.half_period);

    // Lyapunov family embedded in (x0, z0, vy0) to expose the halo bifurcation.
    let u3 = DVector::from_vec(vec![u0[0], 0.0, u0[1]]);
    let ev3 = sh.eval(Family::Halo, &u3)?;
    let mut t3 = null_vector(&ev3.jac);
    if t3[0] > 0.0 {
        t3 = -t3;
    }
    let lyap_levels = level_grid(LYAP_TARGET_C, LYAP_DC);
    let mut bif: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut prev_zz = ev3.zz;
    let mut lyap_count = 0usize;
    let mut last_sample_c = f64::INFINITY;
    continue_family(&sh, Family::Halo, u3, t3, 1e-3, 2e-2, |prev, u, ev| {
        let c_prev = sh.jacobi(prev);
        let c = sh.jacobi(u);
        if bif.is_none() && ev.zz.signum() != prev_zz.signum() {
            bif = Some((prev.clone(), u.clone()));
            eprintln!("halo bifurcation near C = {c:.5}");
        }
        prev_zz = ev.zz;
        let planar = |v: &DVector<f64>| DVector::from_vec(vec![v[0], v[2]]);
        if last_sample_c - c > 0.01 {
            last_sample_c = c;
            records.push(record(&sh, Family::Lyapunov, &planar(u), ev, format!("lyap-{lyap_count:04}")));
            lyap_count += 1;
        }
        for &(k, level) in &lyap_levels {
            if (c_prev - level) * (c - level) <= 0.0 && c_prev != level {
                let (us, evs) = solve_at_c(&sh, Family::Lyapunov, &planar(u), level)
                    .expect("Lyapunov level solve failed");
                let id = if k == 0 { "lyap-target".to_string() } else { format!("lyap-t{k:+}") };
                let r = record(&sh, Family::Lyapunov, &us, &evs, id);
                eprintln!("{} C = {:.8} T = {:.6}", r.id, r.jacobi, r.period);
                records.push(r);
            }
        }
        c > LYAP_TARGET_C - (N_SIDE as f64 + 2.0) * LYAP_DC
    });

    // Branch switch onto the northern halo family.
    let (a, b) = bif.expect("no halo bifurcation detected");
    let u_b = (&a + &b) * 0.5;
    let ez = DVector::from_vec(vec![0.0, 1.0, 0.0]);
    let step = 1e-3;
    let ub_c = u_b.clone();
    let (u_h, ev_h) = sh
        .correct(Family::Halo, &u_b + &ez * step, |v| ((v - &ub_c).dot(&ez) - step, ez.clone()))
        .expect("branch switch failed");
    let mut th = null_vector(&ev_h.jac);
    if th[1] < 0.0 {
        th = -th;
    }
    let halo_levels = level_grid(HALO_TARGET_C, HALO_DC);
    let mut halo_count = 0usize;
    let mut last_sample_c = f64::INFINITY;
    let mut prev_t = 2.0 * ev_h.half_period;
    continue_family(&sh, Family::Halo, u_h, th, 1e-3, 1e-2, |prev, u, ev| {
        let c_prev = sh.jacobi(prev);
        let c = sh.jacobi(u);
        let period = 2.0 * ev.half_period;
        if (period - prev_t).abs() > 0.5 {
            eprintln!("period jump {prev_t} -> {period} at C = {c}");
        }
        prev_t = period;
        if (last_sample_c - c).abs() > 0.02 {
            last_sample_c = c;
            records.push(record(&sh, Family::Halo, u, ev, format!("halo-{halo_count:04}")));
            halo_count += 1;
            eprintln!("halo C = {c:.5} T = {period:.5} x0 = {:.5} z0 = {:.5}", u[0], u[1]);
        }
        for &(k, level) in &halo_levels {
            if (c_prev - level) * (c - level) <= 0.0 && c_prev != level {
                if let Some((us, evs)) = solve_at_c(&sh, Family::Halo, u, level) {
                    let id = if k == 0 { "halo-target".to_string() } else { format!("halo-t{k:+}") };
                    let r = record(&sh, Family::Halo, &us, &evs, id);
                    eprintln!("{} C = {:.8} T = {:.6}", r.id, r.jacobi, r.period);
                    records.push(r);
                }
            }
        }
        c > HALO_TARGET_C - (N_SIDE as f64 + 2.0) * HALO_DC && c < 3.2
    });

    records.sort_by(|a, b| a.jacobi.partial_cmp(&b.jacobi).unwrap());
    let mut out = String::from("id,family,x,y,z,vx,vy,vz,period,jacobi\n");
    for r in &records {
        let s = &r.state;
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.id, r.family, s[0], s[1], s[2], s[3], s[4], s[5], r.period, r.jacobi
        ));
    }
    std::fs::write(&out_path, out)?;
    eprintln!("wrote {} records to {out_path}", records.len());
    Ok(())
}
