//! Closed-loop runs: one impulse per admissible crossing, gated by distance
//! to the fixed point.

use std::io::Write;

use nalgebra::{DVector, Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};

use crate::catalog::UpoRecord;
use crate::control::ActuationProjection;
use crate::dynamics::{velocity_to_si, StateVector, SystemParams};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::sections::{admissible_crossings, anchor_crossing, SectionDef};
use crate::stability::ManifoldDirections;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizationConfig {
    pub eta_control: f64,
    pub max_periods: usize,
    pub divergence_radius: f64,
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        Self {
            eta_control: 1.0,
            max_periods: 20,
            divergence_radius: 2.0,
        }
    }
}

impl StabilizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_control > 0.0) {
            return Err(Error::InvalidParameter("eta_control must be positive".into()));
        }
        if !(self.divergence_radius > self.eta_control) {
            return Err(Error::InvalidParameter("divergence_radius must exceed eta_control".into()));
        }
        if self.max_periods == 0 {
            return Err(Error::InvalidParameter("max_periods must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingRecord {
    /// Time since the start of the run [TU].
    pub time: f64,
    /// State at the crossing, before the impulse.
    pub state: StateVector,
    pub deviation: f64,
    /// Zero when the crossing was outside the control ball.
    pub impulse: Vector3<f64>,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationRun {
    pub anchor: StateVector,
    pub crossings: Vec<CrossingRecord>,
    pub periods_completed: usize,
    pub diverged: bool,
}

impl StabilizationRun {
    pub fn impulses(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.crossings.iter().filter(|c| c.applied).map(|c| &c.impulse)
    }

    pub fn max_deviation(&self) -> f64 {
        self.crossings.iter().map(|c| c.deviation).fold(0.0, f64::max)
    }

    /// CSV: time, six state components, deviation, three impulse components.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header = [
            "time", "x", "y", "z", "vx", "vy", "vz", "deviation", "ux", "uy", "uz",
        ];
        out.write_record(header).map_err(csv_err)?;
        for c in &self.crossings {
            let mut row = vec![fmt17(c.time)];
            row.extend(c.state.iter().map(|v| fmt17(*v)));
            row.push(fmt17(c.deviation));
            row.extend(c.impulse.iter().map(|v| fmt17(*v)));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs the controlled map from `anchor + initial_offset`. Divergence ends the
/// run early and is flagged rather than returned as an error.
#[allow(clippy::too_many_arguments)]
pub fn stabilize(
    u: &UpoRecord,
    def: &SectionDef,
    k_full: &Matrix3x6<f64>,
    r: &ActuationProjection,
    cfg: &StabilizationConfig,
    icfg: &IntegratorConfig,
    p: &SystemParams,
    initial_offset: &StateVector,
) -> Result<StabilizationRun> {
    cfg.validate()?;
    let (section, anchor, _) = anchor_crossing(u, def, icfg, p)?;
    let mut state = anchor + initial_offset;
    if section.planar {
        state[2] = 0.0;
        state[5] = 0.0;
    }
    let mut time = 0.0;
    let mut run = StabilizationRun {
        anchor,
        crossings: Vec::new(),
        periods_completed: 0,
        diverged: false,
    };
    while run.periods_completed < cfg.max_periods {
        let hits = admissible_crossings(&state, &section, 1, false, 1.5 * u.period, icfg, p)?;
        let Some(&(dt, x)) = hits.first() else {
            run.diverged = true;
            break;
        };
        time += dt;
        let dev = x - anchor;
        let deviation = dev.norm();
        if deviation > cfg.divergence_radius {
            run.crossings.push(CrossingRecord {
                time,
                state: x,
                deviation,
                impulse: Vector3::zeros(),
                applied: false,
            });
            run.diverged = true;
            break;
        }
        let applied = deviation <= cfg.eta_control;
        let impulse = if applied { k_full * dev } else { Vector3::zeros() };
        state = x + r.r * impulse;
        run.crossings.push(CrossingRecord {
            time,
            state: x,
            deviation,
            impulse,
            applied,
        });
        run.periods_completed += 1;
    }
    Ok(run)
}

/// Sum of impulse norms over crossings `first..=last` (1-based) [m/s].
pub fn total_delta_v(run: &StabilizationRun, first: usize, last: usize, p: &SystemParams) -> Result<f64> {
    if first < 1 || first > last || last > run.periods_completed {
        return Err(Error::RangeOutOfBounds {
            first,
            last,
            len: run.periods_completed,
        });
    }
    Ok(run.crossings[first - 1..last]
        .iter()
        .map(|c| velocity_to_si(c.impulse.norm(), p))
        .sum())
}

/// Which part of the stable direction the impulses are compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AngleReading {
    /// Position components paired with the actuated velocities
    /// (x, y for planar sections; x, y, z for halo).
    #[default]
    Position,
    /// Actuated velocity components themselves.
    Velocity,
}

/// Mean over applied impulses of `acos |<u, nu>|` in degrees, both vectors
/// normalized in the actuated subspace.
pub fn impulse_manifold_angle(
    run: &StabilizationRun,
    dirs: &ManifoldDirections,
    def: &SectionDef,
    reading: AngleReading,
) -> Result<f64> {
    let vel = def.actuated_velocities();
    let comps: Vec<usize> = match reading {
        AngleReading::Velocity => vel.clone(),
        AngleReading::Position => vel.iter().map(|i| i - 3).collect(),
    };
    let nu = DVector::from_iterator(comps.len(), comps.iter().map(|&i| dirs.nu_s[i]));
    let nu_norm = nu.norm();
    if nu_norm == 0.0 {
        return Err(Error::Numerical("stable direction has no actuated component".into()));
    }
    let nu = nu / nu_norm;
    let mut acc = 0.0;
    let mut n = 0usize;
    for u in run.impulses() {
        let v = DVector::from_iterator(vel.len(), vel.iter().map(|&i| u[i - 3]));
        let vn = v.norm();
        if vn == 0.0 {
            continue;
        }
        let c = (v.dot(&nu) / vn).abs().min(1.0);
        acc += c.acos().to_degrees();
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoImpulse);
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub periods_completed: usize,
    pub diverged: bool,
    pub delta_v_ranges: Vec<DeltaVRange>,
    pub theta_deg: Option<f64>,
    pub theta_velocity_deg: Option<f64>,
    pub closed_loop_eigenvalues: Vec<[f64; 2]>,
    pub final_deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaVRange {
    pub first: usize,
    pub last: usize,
    pub delta_v_si: f64,
}

pub fn summarize(
    run: &StabilizationRun,
    dirs: Option<&ManifoldDirections>,
    def: &SectionDef,
    ranges: &[(usize, usize)],
    closed_loop_eigenvalues: &[crate::stability::C64],
    p: &SystemParams,
) -> RunSummary {
    let delta_v_ranges = ranges
        .iter()
        .filter_map(|&(first, last)| {
            let last = last.min(run.periods_completed);
            total_delta_v(run, first, last, p).ok().map(|delta_v_si| DeltaVRange {
                first,
                last,
                delta_v_si,
            })
        })
        .collect();
    let angle = |r| dirs.and_then(|d| impulse_manifold_angle(run, d, def, r).ok());
    RunSummary {
        periods_completed: run.periods_completed,
        diverged: run.diverged,
        delta_v_ranges,
        theta_deg: angle(AngleReading::Position),
        theta_velocity_deg: angle(AngleReading::Velocity),
        closed_loop_eigenvalues: closed_loop_eigenvalues.iter().map(|c| [c.re, c.im]).collect(),
        final_deviation: run.crossings.last().map_or(0.0, |c| c.deviation),
    }
}
