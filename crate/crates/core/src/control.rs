//! Gain synthesis by LMI feasibility with a bound on the decision variables.
//!
//! The discrete closed loop `x+ = (A + B K) x` is Schur stable iff there are
//! `Q = P^-1 > 0` and `Y = K Q` with
//!
//! ```text
//! [ Q         Q A^T + Y^T B^T ]
//! [ A Q + B Y       Q         ] > 0,
//! ```
//!
//! solved here in the section's active subspace with a margin `eps` on both
//! blocks and `|Q|_F^2 + |Y|_F^2 < R^2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3x6, Matrix6, Matrix6x3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::discovery::LinearizedMap;
use crate::error::{Error, Result};
use crate::sections::SectionDef;
use crate::stability::C64;

/// Relative margin: `eps = DEFAULT_MARGIN_SCALE * max(1, |A|_2)`.
pub const DEFAULT_MARGIN_SCALE: f64 = 1e-12;

const MAX_NEWTON: usize = 200;
const MAX_OUTER: usize = 60;

/// Maps a 3-vector impulse onto the velocity states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationProjection {
    pub r: Matrix6x3<f64>,
}

impl Default for ActuationProjection {
    fn default() -> Self {
        let mut r = Matrix6x3::zeros();
        for k in 0..3 {
            r[(3 + k, k)] = 1.0;
        }
        Self { r }
    }
}

impl ActuationProjection {
    /// State index each impulse channel acts on.
    pub fn channel_targets(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.r.column(k).iamax();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controllability {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub full_rank: bool,
}

/// `[B | AB | ... | A^(n-1) B]` and its numerical rank.
pub fn controllability(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Controllability> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let k = b.ncols();
    let mut c = DMatrix::zeros(n, n * k);
    let mut block = b.clone();
    for i in 0..n {
        c.view_mut((0, i * k), (n, k)).copy_from(&block);
        block = a * block;
    }
    let rank = if c.is_empty() {
        0
    } else {
        let sv = c.singular_values();
        let smax = sv.max();
        let tol = n as f64 * f64::EPSILON * smax;
        sv.iter().filter(|&&s| s > tol && s > 0.0).count()
    };
    Ok(Controllability {
        matrix: c,
        rank,
        full_rank: rank == n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub radius: f64,
    pub margin: f64,
    /// Active state indices (rows/columns of `a` in the full state).
    pub active: Vec<usize>,
    /// Impulse channel (0..3) of each column of `b`.
    pub channels: Vec<usize>,
}

impl LmiProblem {
    /// Problem on raw matrices with identity embedding; mainly for tests.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, radius: f64, margin: f64) -> Result<Self> {
        let n = a.nrows();
        let k = b.ncols();
        let p = Self {
            a,
            b,
            radius,
            margin,
            active: (0..n).collect(),
            channels: (0..k).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 {
            return Err(Error::EmptyActiveBlock);
        }
        if self.a.ncols() != n || self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(Error::Dimension("inconsistent LMI problem dimensions".into()));
        }
        if !(self.radius > 0.0 && self.margin > 0.0) {
            return Err(Error::InvalidParameter("radius and margin must be positive".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self {
            radius,
            ..self.clone()
        }
    }

    /// Pads an active-subspace gain into the 3 x 6 full gain.
    pub fn embed(&self, k_active: &DMatrix<f64>) -> Matrix3x6<f64> {
        let mut full = Matrix3x6::zeros();
        for (r, &ch) in self.channels.iter().enumerate() {
            for (c, &j) in self.active.iter().enumerate() {
                full[(ch, j)] = k_active[(r, c)];
            }
        }
        full
    }

    /// Inverse of [`embed`](Self::embed) on gains with the matching zero pattern.
    pub fn reduce(&self, k_full: &Matrix3x6<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.k(), self.n(), |r, c| k_full[(self.channels[r], self.active[c])])
    }
}

/// Default margin for a given active block.
pub fn default_margin(a_active: &DMatrix<f64>) -> f64 {
    let scale = if a_active.is_empty() {
        1.0
    } else {
        a_active.singular_values().max().max(1.0)
    };
    DEFAULT_MARGIN_SCALE * scale
}

/// Active blocks of `A` and `B = A R`. Channels whose target state is not
/// active (z-dot on planar sections) are dropped.
pub fn reduce_and_embed(
    lin: &LinearizedMap,
    r: &ActuationProjection,
    def: &SectionDef,
    radius: f64,
    margin: Option<f64>,
) -> Result<LmiProblem> {
    let active = def.active_coordinates();
    if active.is_empty() {
        return Err(Error::EmptyActiveBlock);
    }
    let targets = r.channel_targets();
    let channels: Vec<usize> = (0..3).filter(|&c| active.contains(&targets[c])).collect();
    let n = active.len();
    let a = DMatrix::from_fn(n, n, |i, j| lin.a[(active[i], active[j])]);
    let ar: Matrix6x3<f64> = lin.a * r.r;
    let b = DMatrix::from_fn(n, channels.len(), |i, c| ar[(active[i], channels[c])]);
    let margin = margin.unwrap_or_else(|| default_margin(&a));
    let p = LmiProblem {
        a,
        b,
        radius,
        margin,
        active,
        channels,
    };
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiSolution {
    pub q: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub k_active: DMatrix<f64>,
    pub k_full: Matrix3x6<f64>,
    pub iterations: usize,
}

/// Independent eigenvalue check of a candidate `(Q, Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub min_eig_q: f64,
    pub min_eig_block: f64,
    /// Smallest eigenvalue of `[[R I, d], [d^T, R]]`.
    pub min_eig_ball: f64,
    pub decision_norm: f64,
    pub spectral_radius: f64,
    pub valid: bool,
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    let s = 0.5 * (m + m.transpose());
    SymmetricEigen::new(s).eigenvalues.min()
}

fn block_lmi(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let off = a * q + b * y;
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(q);
    m.view_mut((n, n), (n, n)).copy_from(q);
    m.view_mut((n, 0), (n, n)).copy_from(&off);
    m.view_mut((0, n), (n, n)).copy_from(&off.transpose());
    m
}

pub fn verify_certificate(prob: &LmiProblem, q: &DMatrix<f64>, y: &DMatrix<f64>) -> Certificate {
    let min_eig_q = min_sym_eig(q);
    let min_eig_block = min_sym_eig(&block_lmi(&prob.a, &prob.b, q, y));
    let d: Vec<f64> = q.iter().chain(y.iter()).copied().collect();
    let nd = d.len();
    let mut ball = DMatrix::identity(nd + 1, nd + 1) * prob.radius;
    for (i, v) in d.iter().enumerate() {
        ball[(i, nd)] = *v;
        ball[(nd, i)] = *v;
    }
    let min_eig_ball = min_sym_eig(&ball);
    let decision_norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let spectral_radius = match Cholesky::new(q.clone()) {
        Some(ch) => {
            let k = y * ch.inverse();
            let cl = &prob.a + &prob.b * k;
            cl.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
        }
        None => f64::INFINITY,
    };
    // Relative slack for rounding in the eigen-solvers.
    let tol = 1e-9;
    let valid = min_eig_q >= prob.margin * (1.0 - tol)
        && min_eig_block >= prob.margin * (1.0 - tol)
        && min_eig_ball > 0.0
        && decision_norm < prob.radius
        && spectral_radius < 1.0;
    Certificate {
        min_eig_q,
        min_eig_block,
        min_eig_ball,
        decision_norm,
        spectral_radius,
        valid,
    }
}

// Barrier machinery on the unit ball. Decision vector: Q upper triangle
// (row major), then Y column major, then optionally the phase-1 slack.
struct Barrier {
    n: usize,
    k: usize,
    /// Basis matrices of the Q block and of the block LMI, per variable.
    g1: Vec<DMatrix<f64>>,
    g2: Vec<DMatrix<f64>>,
    /// Frobenius weights of the decision entries (2 for off-diagonal Q).
    w: DVector<f64>,
    margin: f64,
}

impl Barrier {
    fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, margin: f64, with_slack: bool) -> Self {
        let n = a.nrows();
        let k = b.ncols();
        let mut g1 = Vec::new();
        let mut g2 = Vec::new();
        let mut w = Vec::new();
        for i in 0..n {
            for j in i..n {
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                g2.push(block_lmi(a, b, &e, &DMatrix::zeros(k, n)));
                g1.push(e);
                w.push(if i == j { 1.0 } else { 2.0 });
            }
        }
        for c in 0..n {
            for r in 0..k {
                let mut e = DMatrix::zeros(k, n);
                e[(r, c)] = 1.0;
                g1.push(DMatrix::zeros(n, n));
                g2.push(block_lmi(a, b, &DMatrix::zeros(n, n), &e));
                w.push(1.0);
            }
        }
        if with_slack {
            g1.push(-DMatrix::identity(n, n));
            g2.push(-DMatrix::identity(2 * n, 2 * n));
            w.push(0.0);
        }
        Self {
            n,
            k,
            g1,
            g2,
            w: DVector::from_vec(w),
            margin,
        }
    }

    fn dim(&self) -> usize {
        self.w.len()
    }

    fn assemble(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut m1 = DMatrix::identity(n, n) * -self.margin;
        let mut m2 = DMatrix::identity(2 * n, 2 * n) * -self.margin;
        for (j, v) in x.iter().enumerate() {
            if *v != 0.0 {
                m1 += &self.g1[j] * *v;
                m2 += &self.g2[j] * *v;
            }
        }
        (m1, m2)
    }

    fn ball_slack(&self, x: &DVector<f64>) -> f64 {
        1.0 - x.iter().zip(self.w.iter()).map(|(v, w)| w * v * v).sum::<f64>()
    }

    /// Barrier value, or None outside the domain.
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        let s = self.ball_slack(x);
        if !(s > 0.0) {
            return None;
        }
        let (m1, m2) = self.assemble(x);
        let c1 = Cholesky::new(m1)?;
        let c2 = Cholesky::new(m2)?;
        let logdet = |c: &Cholesky<f64, Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(-logdet(&c1) - logdet(&c2) - s.ln())
    }

    fn grad_hess(&self, x: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let m = self.dim();
        let (m1, m2) = self.assemble(x);
        let i1 = Cholesky::new(m1)?.inverse();
        let i2 = Cholesky::new(m2)?.inverse();
        let s1: Vec<DMatrix<f64>> = self.g1.iter().map(|g| &i1 * g).collect();
        let s2: Vec<DMatrix<f64>> = self.g2.iter().map(|g| &i2 * g).collect();
        let mut grad = DVector::zeros(m);
        let mut hess = DMatrix::zeros(m, m);
        for j in 0..m {
            grad[j] = -s1[j].trace() - s2[j].trace();
            for l in j..m {
                let h = s1[j].component_mul(&s1[l].transpose()).sum()
                    + s2[j].component_mul(&s2[l].transpose()).sum();
                hess[(j, l)] = h;
                hess[(l, j)] = h;
            }
        }
        let s = self.ball_slack(x);
        let wx = self.w.component_mul(x);
        grad += &wx * (2.0 / s);
        hess += DMatrix::from_diagonal(&self.w) * (2.0 / s) + &wx * wx.transpose() * (4.0 / (s * s));
        Some((grad, hess))
    }

    fn unpack(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut q = DMatrix::zeros(n, n);
        let mut idx = 0;
        for i in 0..n {
            for j in i..n {
                q[(i, j)] = x[idx];
                q[(j, i)] = x[idx];
                idx += 1;
            }
        }
        let y = DMatrix::from_column_slice(self.k, n, &x.as_slice()[idx..idx + self.k * n]);
        (q, y)
    }
}

/// Damped Newton on `t * c^T x + barrier(x)`. Returns the number of steps.
fn centre(bar: &Barrier, x: &mut DVector<f64>, c: &DVector<f64>, t: f64, stop: &dyn Fn(&DVector<f64>) -> bool) -> Result<usize> {
    let f = |x: &DVector<f64>| bar.value(x).map(|v| v + t * c.dot(x));
    let mut fx = f(x).ok_or_else(|| Error::Numerical("barrier start point infeasible".into()))?;
    for it in 0..MAX_NEWTON {
        if stop(x) {
            return Ok(it);
        }
        let (g, h) = bar
            .grad_hess(x)
            .ok_or_else(|| Error::Numerical("lost positive definiteness".into()))?;
        let g = g + c * t;
        let dx = match Cholesky::new(h.clone()) {
            Some(ch) => -ch.solve(&g),
            None => -h.pseudo_inverse(1e-14).map_err(|e| Error::Numerical(e.into()))? * &g,
        };
        let decrement2 = -g.dot(&dx);
        if decrement2 / 2.0 < 1e-12 {
            return Ok(it);
        }
        let mut step = 1.0;
        loop {
            let trial = &*x + &dx * step;
            if let Some(ft) = f(&trial) {
                if ft <= fx - 0.25 * step * decrement2 {
                    *x = trial;
                    fx = ft;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-14 {
                return Ok(it);
            }
        }
    }
    Ok(MAX_NEWTON)
}

/// Phase 1 on the unit ball: maximize the common slack `s` of both blocks.
/// With `early_exit`, stops as soon as `s > 0`. Returns `(x, s, steps)`.
fn maximize_slack(a: &DMatrix<f64>, b: &DMatrix<f64>, margin: f64, early_exit: bool) -> Result<(DVector<f64>, f64, usize)> {
    let bar = Barrier::new(a, b, margin, true);
    let m = bar.dim();
    let mut x = DVector::zeros(m);
    x[m - 1] = -(1.0 + margin);
    let mut c = DVector::zeros(m);
    c[m - 1] = -1.0;
    let barrier_dim = (3 * bar.n + 1) as f64;
    let mut t = 1.0;
    let mut steps = 0;
    let stop = |x: &DVector<f64>| early_exit && x[x.len() - 1] > 0.0;
    for _ in 0..MAX_OUTER {
        steps += centre(&bar, &mut x, &c, t, &stop)?;
        let s = x[m - 1];
        if early_exit && s > 0.0 {
            break;
        }
        if barrier_dim / t < 1e-9 * s.abs().max(1e-300) || t > 1e30 {
            break;
        }
        t *= 8.0;
    }
    let s = x[m - 1];
    Ok((x, s, steps))
}

/// Largest common slack of both blocks over `|(Q, Y)|_F <= 1` with no margin.
/// Feasibility at radius `R` needs `R * depth > margin`.
pub fn lmi_depth(prob: &LmiProblem) -> Result<f64> {
    prob.validate()?;
    Ok(maximize_slack(&prob.a, &prob.b, 0.0, false)?.1)
}

/// Smallest radius for which the problem with its margin is feasible.
pub fn minimal_radius(prob: &LmiProblem) -> Result<f64> {
    let depth = lmi_depth(prob)?;
    if !(depth > 0.0) {
        return Err(Error::Infeasible {
            iterations: 0,
            best_min_eig: depth,
        });
    }
    Ok(prob.margin / depth)
}

/// Phase 1 for a strictly feasible point, then the analytic centre of the
/// feasible set. The result always carries a verified certificate.
pub fn solve_lmi(prob: &LmiProblem) -> Result<LmiSolution> {
    prob.validate()?;
    // Work on the unit ball: (Q, Y) = R (Q~, Y~), margin eps / R.
    let eps = prob.margin / prob.radius;
    let (x1, s, steps1) = maximize_slack(&prob.a, &prob.b, eps, true)?;
    if !(s > 0.0) {
        return Err(Error::Infeasible {
            iterations: steps1,
            best_min_eig: (s + eps) * prob.radius,
        });
    }
    let bar = Barrier::new(&prob.a, &prob.b, eps, false);
    let mut x = x1.rows(0, bar.dim()).into_owned();
    let zero = DVector::zeros(bar.dim());
    let steps2 = centre(&bar, &mut x, &zero, 0.0, &|_| false)?;
    let (q, y) = bar.unpack(&x);
    let (q, y) = (q * prob.radius, y * prob.radius);
    let cert = verify_certificate(prob, &q, &y);
    if !cert.valid {
        return Err(Error::Infeasible {
            iterations: steps1 + steps2,
            best_min_eig: cert.min_eig_block.min(cert.min_eig_q),
        });
    }
    let qinv = Cholesky::new(q.clone())
        .ok_or_else(|| Error::Numerical("Q is not positive definite".into()))?
        .inverse();
    let k_active = &y * qinv;
    Ok(LmiSolution {
        k_full: prob.embed(&k_active),
        q,
        y,
        k_active,
        iterations: steps1 + steps2,
    })
}

/// `A + A R K` and its eigenvalues, descending magnitude.
pub fn closed_loop_matrix(a: &Matrix6<f64>, r: &ActuationProjection, k_full: &Matrix3x6<f64>) -> (Matrix6<f64>, Vec<C64>) {
    let cl = a + a * r.r * k_full;
    let mut eig: Vec<C64> = cl.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|x, y| y.norm().total_cmp(&x.norm()));
    (cl, eig)
}

/// Eigenvalues of the active block of the closed loop, descending magnitude.
pub fn active_closed_loop_spectrum(prob: &LmiProblem, k_active: &DMatrix<f64>) -> Vec<C64> {
    let cl = &prob.a + &prob.b * k_active;
    let mut eig: Vec<C64> = cl.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|x, y| y.norm().total_cmp(&x.norm()));
    eig
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainExport {
    pub k_full: Vec<Vec<f64>>,
    pub radius: f64,
    pub margin: f64,
    pub closed_loop_eigenvalues: Vec<[f64; 2]>,
    pub certificate: Certificate,
}

pub fn export_gain(prob: &LmiProblem, sol: &LmiSolution) -> GainExport {
    GainExport {
        k_full: (0..3).map(|r| sol.k_full.row(r).iter().copied().collect()).collect(),
        radius: prob.radius,
        margin: prob.margin,
        closed_loop_eigenvalues: active_closed_loop_spectrum(prob, &sol.k_active)
            .iter()
            .map(|c| [c.re, c.im])
            .collect(),
        certificate: verify_certificate(prob, &sol.q, &sol.y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controllability_trivial_cases() {
        let a = DMatrix::zeros(3, 3);
        let c = controllability(&a, &DMatrix::identity(3, 3)).unwrap();
        assert!(c.full_rank);
        let c = controllability(&a, &DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(c.rank, 0);
        assert!(!c.full_rank);
    }

    #[test]
    fn scalar_stable_system() {
        let p = LmiProblem::new(DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.0), 1e9, 1e-12).unwrap();
        let sol = solve_lmi(&p).unwrap();
        assert!((0.5 + sol.k_active[(0, 0)]).abs() < 1.0);
        assert!(verify_certificate(&p, &sol.q, &sol.y).valid);
    }

    #[test]
    fn unstable_scalar_radius_threshold() {
        let p = LmiProblem::new(DMatrix::from_element(1, 1, 3.0), DMatrix::from_element(1, 1, 1.0), 1.0, 1e-3).unwrap();
        let r_min = minimal_radius(&p).unwrap();
        assert!(solve_lmi(&p.with_radius(r_min * 1.01)).is_ok());
        assert!(matches!(solve_lmi(&p.with_radius(r_min * 0.99)), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn embed_reduce_round_trip() {
        let p = LmiProblem {
            a: DMatrix::identity(3, 3),
            b: DMatrix::zeros(3, 2),
            radius: 1.0,
            margin: 1e-6,
            active: vec![0, 3, 4],
            channels: vec![0, 1],
        };
        let k = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let full = p.embed(&k);
        assert_eq!(full[(1, 4)], 6.0);
        assert_eq!(full.row(2).sum(), 0.0);
        assert_eq!(p.reduce(&full), k);
    }
}
