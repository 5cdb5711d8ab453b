//! Monodromy matrices at a section crossing, Floquet classification and the
//! sensitivity norm.

use nalgebra::{Complex, DMatrix, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::catalog::UpoRecord;
use crate::dynamics::{StateVector, SystemParams};
use crate::error::{Error, Result};
use crate::integrator::{propagate_with_stm, IntegratorConfig};
use crate::sections::{anchor_crossing, SectionDef};

pub type C64 = Complex<f64>;

/// Margin above unit magnitude required of the unstable multiplier.
pub const UNSTABLE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonodromyResult {
    pub m: Matrix6<f64>,
    /// Sorted by descending magnitude.
    pub eigenvalues: Vec<C64>,
    /// Unit-norm right eigenvectors, paired with `eigenvalues`.
    pub eigenvectors: Vec<Vec<C64>>,
    pub anchor_crossing: StateVector,
    /// Section with its crossing direction calibrated on the orbit.
    pub section: SectionDef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldDirections {
    pub nu_s: Vector6<f64>,
    pub nu_u: Vector6<f64>,
    pub lambda_s: f64,
    pub lambda_u: f64,
    /// Remaining multipliers.
    pub neutral: Vec<C64>,
}

/// Eigenvalues sorted by descending magnitude with unit eigenvectors.
pub fn eigen_decomposition(m: &Matrix6<f64>) -> (Vec<C64>, Vec<Vec<C64>>) {
    let mut vals: Vec<C64> = m.complex_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    let vecs = vals.iter().map(|&l| eigenvector(m, l)).collect();
    (vals, vecs)
}

/// Null vector of `m - lambda I` from the smallest singular triplet.
/// The phase is fixed so the largest component is real and positive.
pub fn eigenvector(m: &Matrix6<f64>, lambda: C64) -> Vec<C64> {
    let n = 6;
    let shifted = DMatrix::<C64>::from_fn(n, n, |i, j| {
        let v = C64::new(m[(i, j)], 0.0);
        if i == j {
            v - lambda
        } else {
            v
        }
    });
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let mut v: Vec<C64> = (0..n).map(|j| v_t[(k, j)].conj()).collect();
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(C64::new(1.0, 0.0));
    let phase = if pivot.norm() > 0.0 {
        pivot.conj() / pivot.norm()
    } else {
        C64::new(1.0, 0.0)
    };
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    for c in &mut v {
        *c = *c * phase / norm;
    }
    v
}

/// Propagates the orbit to its admissible crossing of `def`, then state and
/// STM for exactly one period from there.
pub fn monodromy_at(
    u: &UpoRecord,
    def: &SectionDef,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<MonodromyResult> {
    let (section, anchor, _) = anchor_crossing(u, def, cfg, p)?;
    let r = propagate_with_stm(&anchor, u.period, cfg, p)?;
    let (eigenvalues, eigenvectors) = eigen_decomposition(&r.stm);
    Ok(MonodromyResult {
        m: r.stm,
        eigenvalues,
        eigenvectors,
        anchor_crossing: anchor,
        section,
    })
}

/// Real unit direction representing a (possibly complex) eigenvector.
fn real_direction(v: &[C64]) -> Vector6<f64> {
    let re = Vector6::from_iterator(v.iter().map(|c| c.re));
    let re = if re.norm() > 0.0 {
        re
    } else {
        Vector6::from_iterator(v.iter().map(|c| c.im))
    };
    let mut d = re.normalize();
    let (imax, _) = d.iamax_full();
    if d[imax] < 0.0 {
        d = -d;
    }
    d
}

/// Unstable/stable multipliers and directions; everything else is neutral.
pub fn classify_floquet(r: &MonodromyResult) -> Result<ManifoldDirections> {
    let n = r.eigenvalues.len();
    if n < 2 || r.eigenvalues[0].norm() <= 1.0 + UNSTABLE_TOL {
        return Err(Error::NotUnstable(1.0 + UNSTABLE_TOL));
    }
    let neutral = r.eigenvalues[1..n - 1].to_vec();
    Ok(ManifoldDirections {
        nu_u: real_direction(&r.eigenvectors[0]),
        nu_s: real_direction(&r.eigenvectors[n - 1]),
        lambda_u: r.eigenvalues[0].norm(),
        lambda_s: r.eigenvalues[n - 1].norm(),
        neutral,
    })
}

/// Induced 2-norm (largest singular value) of the monodromy matrix.
pub fn sensitivity_norm(r: &MonodromyResult) -> f64 {
    spectral_norm(&r.m)
}

pub fn spectral_norm(m: &Matrix6<f64>) -> f64 {
    m.singular_values().max()
}

/// Frobenius norm, reported alongside the spectral norm as a diagnostic.
pub fn frobenius_norm(r: &MonodromyResult) -> f64 {
    r.m.norm()
}
