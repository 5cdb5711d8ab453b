//! Rotating-frame equations of motion of the circular restricted three-body
//! problem, in nondimensional units (LU, TU).
//!
//! The primaries sit at `(-mu, 0, 0)` and `(1 - mu, 0, 0)`; `d` and `r` are the
//! distances from the particle to the larger and smaller primary.

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nondimensional state `(x, y, z, vx, vy, vz)`.
pub type StateVector = Vector6<f64>;

pub const EARTH_MOON_MU: f64 = 1.215059e-2;
pub const EARTH_MOON_LU_KM: f64 = 389_703.0;
pub const EARTH_MOON_TU_S: f64 = 382_981.0;
pub const DEFAULT_SINGULARITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub mu: f64,
    pub length_unit_km: f64,
    pub time_unit_s: f64,
    /// Minimum admissible distance to either primary [LU].
    #[serde(default = "default_floor")]
    pub singularity_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_SINGULARITY_FLOOR
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::earth_moon()
    }
}

impl SystemParams {
    pub fn earth_moon() -> Self {
        Self {
            mu: EARTH_MOON_MU,
            length_unit_km: EARTH_MOON_LU_KM,
            time_unit_s: EARTH_MOON_TU_S,
            singularity_floor: DEFAULT_SINGULARITY_FLOOR,
        }
    }

    pub fn new(mu: f64, length_unit_km: f64, time_unit_s: f64) -> Result<Self> {
        let p = Self {
            mu,
            length_unit_km,
            time_unit_s,
            singularity_floor: DEFAULT_SINGULARITY_FLOOR,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "mass ratio must lie in (0, 1/2), got {}",
                self.mu
            )));
        }
        if !(self.length_unit_km > 0.0 && self.time_unit_s > 0.0) {
            return Err(Error::InvalidParameter(
                "length and time units must be positive".into(),
            ));
        }
        if !(self.singularity_floor >= 0.0) {
            return Err(Error::InvalidParameter(
                "singularity floor must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Distances `(d, r)` from `pos` to the larger and smaller primary.
    fn distances(&self, x: f64, y: f64, z: f64) -> Result<(f64, f64)> {
        let d = ((x + self.mu).powi(2) + y * y + z * z).sqrt();
        let r = ((x - 1.0 + self.mu).powi(2) + y * y + z * z).sqrt();
        if !(d > self.singularity_floor && r > self.singularity_floor) {
            return Err(Error::Singularity {
                d,
                r,
                floor: self.singularity_floor,
            });
        }
        Ok((d, r))
    }
}

/// Gradient of the effective potential, `(Ux, Uy, Uz)`.
fn potential_gradient(x: f64, y: f64, z: f64, p: &SystemParams) -> Result<Vector3<f64>> {
    let mu = p.mu;
    let (d, r) = p.distances(x, y, z)?;
    let d3 = d * d * d;
    let r3 = r * r * r;
    let ux = x - (1.0 - mu) * (x + mu) / d3 - mu * (x - 1.0 + mu) / r3;
    let uy = y - (1.0 - mu) * y / d3 - mu * y / r3;
    let uz = -(1.0 - mu) * z / d3 - mu * z / r3;
    Ok(Vector3::new(ux, uy, uz))
}

/// Time derivative of `s` under the CR3BP vector field.
pub fn cr3bp_derivative(s: &StateVector, p: &SystemParams) -> Result<StateVector> {
    let g = potential_gradient(s[0], s[1], s[2], p)?;
    Ok(Vector6::new(
        s[3],
        s[4],
        s[5],
        2.0 * s[4] + g[0],
        -2.0 * s[3] + g[1],
        g[2],
    ))
}

/// `(x^2 + y^2)/2 + mu/r + (1 - mu)/d`.
pub fn effective_potential(pos: &Vector3<f64>, p: &SystemParams) -> Result<f64> {
    let (d, r) = p.distances(pos[0], pos[1], pos[2])?;
    Ok(0.5 * (pos[0] * pos[0] + pos[1] * pos[1]) + p.mu / r + (1.0 - p.mu) / d)
}

/// Jacobi constant `C = 2U - V^2`.
pub fn jacobi_constant(s: &StateVector, p: &SystemParams) -> Result<f64> {
    let u = effective_potential(&s.fixed_rows::<3>(0).into_owned(), p)?;
    let v2 = s[3] * s[3] + s[4] * s[4] + s[5] * s[5];
    Ok(2.0 * u - v2)
}

/// Analytic Jacobian of [`cr3bp_derivative`] with respect to the state.
pub fn variational_jacobian(s: &StateVector, p: &SystemParams) -> Result<Matrix6<f64>> {
    let (x, y, z) = (s[0], s[1], s[2]);
    let mu = p.mu;
    let (d, r) = p.distances(x, y, z)?;
    let d3 = d.powi(3);
    let r3 = r.powi(3);
    let d5 = d3 * d * d;
    let r5 = r3 * r * r;
    let (a, b) = (1.0 - mu, mu);
    let xd = x + mu;
    let xr = x - 1.0 + mu;

    let uxx = 1.0 - a / d3 + 3.0 * a * xd * xd / d5 - b / r3 + 3.0 * b * xr * xr / r5;
    let uyy = 1.0 - a / d3 + 3.0 * a * y * y / d5 - b / r3 + 3.0 * b * y * y / r5;
    let uzz = -a / d3 + 3.0 * a * z * z / d5 - b / r3 + 3.0 * b * z * z / r5;
    let uxy = 3.0 * a * xd * y / d5 + 3.0 * b * xr * y / r5;
    let uxz = 3.0 * a * xd * z / d5 + 3.0 * b * xr * z / r5;
    let uyz = 3.0 * a * y * z / d5 + 3.0 * b * y * z / r5;

    let mut j = Matrix6::zeros();
    j[(0, 3)] = 1.0;
    j[(1, 4)] = 1.0;
    j[(2, 5)] = 1.0;
    j[(3, 0)] = uxx;
    j[(3, 1)] = uxy;
    j[(3, 2)] = uxz;
    j[(4, 0)] = uxy;
    j[(4, 1)] = uyy;
    j[(4, 2)] = uyz;
    j[(5, 0)] = uxz;
    j[(5, 1)] = uyz;
    j[(5, 2)] = uzz;
    j[(3, 4)] = 2.0;
    j[(4, 3)] = -2.0;
    Ok(j)
}

/// Converts a nondimensional speed to m/s.
pub fn velocity_to_si(v_nondim: f64, p: &SystemParams) -> f64 {
    v_nondim * (p.length_unit_km * 1000.0 / p.time_unit_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LagrangeLabel {
    L1,
    L2,
    L3,
    L4,
    L5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangePoint {
    pub label: LagrangeLabel,
    pub position: Vector3<f64>,
    pub jacobi: f64,
}

impl LagrangePoint {
    pub fn state(&self) -> StateVector {
        Vector6::new(self.position[0], self.position[1], self.position[2], 0.0, 0.0, 0.0)
    }
}

/// The five equilibria of the rotating frame, ordered L1..L5.
pub fn lagrange_points(p: &SystemParams) -> Result<[LagrangePoint; 5]> {
    p.validate()?;
    let mu = p.mu;
    let eps = 1e-9;
    let axis = |x: f64| -> f64 {
        potential_gradient(x, 0.0, 0.0, p)
            .map(|g| g[0])
            .unwrap_or(f64::NAN)
    };
    let x1 = bracketed_root(axis, -mu + eps, 1.0 - mu - eps)?;
    let x2 = bracketed_root(axis, 1.0 - mu + eps, 2.0)?;
    let x3 = bracketed_root(axis, -2.0, -mu - eps)?;

    let tri_x = 0.5 - mu;
    let tri_y = 3f64.sqrt() / 2.0;
    let make = |label, x: f64, y: f64| -> Result<LagrangePoint> {
        let position = Vector3::new(x, y, 0.0);
        let jacobi = 2.0 * effective_potential(&position, p)?;
        Ok(LagrangePoint {
            label,
            position,
            jacobi,
        })
    };
    Ok([
        make(LagrangeLabel::L1, x1, 0.0)?,
        make(LagrangeLabel::L2, x2, 0.0)?,
        make(LagrangeLabel::L3, x3, 0.0)?,
        make(LagrangeLabel::L4, tri_x, tri_y)?,
        make(LagrangeLabel::L5, tri_x, -tri_y)?,
    ])
}

/// Bisection down to a narrow bracket, then guarded secant steps.
pub(crate) fn bracketed_root<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (f(a), f(b));
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return Err(Error::RootNotConverged { lo, hi });
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
        if (b - a).abs() < 1e-10 * (1.0 + a.abs()) {
            break;
        }
    }
    let mut x0 = a;
    let mut x1 = b;
    let (mut f0, mut f1) = (f(x0), f(x1));
    for _ in 0..20 {
        if f1 == 0.0 || f1 == f0 {
            break;
        }
        let x2 = x1 - f1 * (x1 - x0) / (f1 - f0);
        if !(x2 > lo && x2 < hi) {
            break;
        }
        x0 = x1;
        f0 = f1;
        x1 = x2;
        f1 = f(x1);
        if (x1 - x0).abs() < 1e-16 * (1.0 + x1.abs()) {
            break;
        }
    }
    let best = if f(x1).abs() <= f(a).abs().min(f(b).abs()) {
        x1
    } else if f(a).abs() < f(b).abs() {
        a
    } else {
        b
    };
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::RootNotConverged { lo, hi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em() -> SystemParams {
        SystemParams::earth_moon()
    }

    // Termwise evaluation written independently of the module code.
    fn oracle_derivative(s: [f64; 6], mu: f64) -> [f64; 6] {
        let [x, y, z, vx, vy, vz] = s;
        let d = ((x + mu) * (x + mu) + y * y + z * z).sqrt();
        let r = ((x - 1.0 + mu) * (x - 1.0 + mu) + y * y + z * z).sqrt();
        let ax = 2.0 * vy + x - (1.0 - mu) * (x + mu) / d.powi(3) - mu / r.powi(3) * (x - 1.0 + mu);
        let ay = -2.0 * vx + y - (1.0 - mu) / d.powi(3) * y - mu / r.powi(3) * y;
        let az = -(1.0 - mu) / d.powi(3) * z - mu / r.powi(3) * z;
        [vx, vy, vz, ax, ay, az]
    }

    fn oracle_jacobi(s: [f64; 6], mu: f64) -> f64 {
        let [x, y, z, vx, vy, vz] = s;
        let d = ((x + mu).powi(2) + y.powi(2) + z.powi(2)).sqrt();
        let r = ((x - 1.0 + mu).powi(2) + y.powi(2) + z.powi(2)).sqrt();
        let u = (x.powi(2) + y.powi(2)) / 2.0 + mu / r + (1.0 - mu) / d;
        2.0 * u - (vx.powi(2) + vy.powi(2) + vz.powi(2))
    }

    #[test]
    fn derivative_matches_termwise_oracle() {
        let s = [0.3, 0.2, 0.1, 0.01, 0.02, 0.03];
        let got = cr3bp_derivative(&StateVector::from_row_slice(&s), &em()).unwrap();
        let want = oracle_derivative(s, EARTH_MOON_MU);
        for i in 0..6 {
            assert!((got[i] - want[i]).abs() <= 1e-15 * (1.0 + want[i].abs()), "component {i}");
        }
    }

    #[test]
    fn planar_states_stay_planar() {
        let s = StateVector::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.0);
        let ds = cr3bp_derivative(&s, &em()).unwrap();
        assert_eq!(ds[2], 0.0);
        assert_eq!(ds[5], 0.0);
    }

    #[test]
    fn singularity_is_reported() {
        let s = StateVector::new(-EARTH_MOON_MU, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(cr3bp_derivative(&s, &em()), Err(Error::Singularity { .. })));
        let s = StateVector::new(1.0 - EARTH_MOON_MU, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(jacobi_constant(&s, &em()), Err(Error::Singularity { .. })));
    }

    #[test]
    fn jacobi_matches_oracle_and_static_case() {
        let s = [0.9, 0.1, 0.0, 0.1, -0.2, 0.0];
        let got = jacobi_constant(&StateVector::from_row_slice(&s), &em()).unwrap();
        assert!((got - oracle_jacobi(s, EARTH_MOON_MU)).abs() < 1e-14);

        let pos = Vector3::new(0.4, -0.3, 0.2);
        let u = effective_potential(&pos, &em()).unwrap();
        let c = jacobi_constant(&StateVector::new(0.4, -0.3, 0.2, 0.0, 0.0, 0.0), &em()).unwrap();
        assert_eq!(c, 2.0 * u);
    }

    #[test]
    fn potential_symmetries_and_value() {
        let p = em();
        let u = |x, y, z| effective_potential(&Vector3::new(x, y, z), &p).unwrap();
        assert_eq!(u(0.7, 0.3, 0.2), u(0.7, -0.3, 0.2));
        assert_eq!(u(0.7, 0.3, 0.2), u(0.7, 0.3, -0.2));
        let mu = EARTH_MOON_MU;
        let want = 0.8f64.powi(2) / 2.0 + mu / (0.8f64 - 1.0 + mu).abs() + (1.0 - mu) / (0.8 + mu);
        assert!((u(0.8, 0.0, 0.0) - want).abs() < 1e-14);
    }

    #[test]
    fn lagrange_points_match_reference_table() {
        let pts = lagrange_points(&em()).unwrap();
        let table = [
            (0.837, 0.0, 3.188),
            (1.156, 0.0, 3.172),
            (-1.005, 0.0, 3.013),
            (0.488, 0.866, 2.988),
            (0.488, -0.866, 2.988),
        ];
        for (pt, (x, y, c)) in pts.iter().zip(table) {
            assert!((pt.position[0] - x).abs() < 1e-3, "{:?} x", pt.label);
            assert!((pt.position[1] - y).abs() < 1e-3, "{:?} y", pt.label);
            assert!((pt.jacobi - c).abs() < 1e-3, "{:?} C", pt.label);
            assert_eq!(pt.position[2], 0.0);
            let ds = cr3bp_derivative(&pt.state(), &em()).unwrap();
            assert!(ds.norm() < 1e-9, "{:?} not an equilibrium: {}", pt.label, ds.norm());
        }
    }

    #[test]
    fn jacobian_structure() {
        let s = StateVector::new(0.3, 0.2, 0.1, 0.01, 0.02, 0.03);
        let j = variational_jacobian(&s, &em()).unwrap();
        for i in 0..3 {
            for k in 0..6 {
                let want = if k == i + 3 { 1.0 } else { 0.0 };
                assert_eq!(j[(i, k)], want);
            }
        }
        assert_eq!(j[(3, 4)], 2.0);
        assert_eq!(j[(4, 3)], -2.0);
    }

    #[test]
    fn velocity_conversion() {
        let p = em();
        assert_eq!(velocity_to_si(0.0, &p), 0.0);
        assert!((velocity_to_si(1.0, &p) - 389_703_000.0 / 382_981.0).abs() < 1e-9);
        assert!((velocity_to_si(1.0, &p) - 1017.55).abs() < 1e-2);
        assert!((velocity_to_si(9.09e-11, &p) - 9.25e-8).abs() < 1e-10);
    }

    #[test]
    fn params_validation() {
        assert!(SystemParams::new(0.6, 1.0, 1.0).is_err());
        assert!(SystemParams::new(0.1, -1.0, 1.0).is_err());
        assert!(SystemParams::new(0.1, 1.0, 1.0).is_ok());
    }
}
