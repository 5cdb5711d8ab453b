//! Surfaces of section, crossing collection, and the augmented sampling of
//! section data around a target periodic orbit.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Family, UpoRecord};
use crate::dynamics::{StateVector, SystemParams};
use crate::error::{Error, Result};
use crate::integrator::{first_crossing, scan_events, Cr3bp, Direction, Flow, IntegratorConfig};

/// Distance from the hyperplane below which a state counts as on-section.
pub const ON_SECTION_TOL: f64 = 1e-10;

/// Crossings earlier than this after the start [TU] are the start itself.
const START_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    Less,
    Greater,
}

/// `state[coordinate] <op> threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPredicate {
    pub coordinate: usize,
    pub comparison: Comparison,
    pub threshold: f64,
}

impl RegionPredicate {
    pub fn admits(&self, s: &StateVector) -> bool {
        match self.comparison {
            Comparison::Less => s[self.coordinate] < self.threshold,
            Comparison::Greater => s[self.coordinate] > self.threshold,
        }
    }
}

/// The four named sections used in the Lyapunov and halo experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SectionName {
    S1L,
    S2L,
    S1H,
    S2H,
}

impl SectionName {
    pub const ALL: [SectionName; 4] = [Self::S1L, Self::S2L, Self::S1H, Self::S2H];

    pub fn family(self) -> Family {
        match self {
            Self::S1L | Self::S2L => Family::Lyapunov,
            Self::S1H | Self::S2H => Family::Halo,
        }
    }

    pub fn definition(self) -> SectionDef {
        let (comparison, coordinate, threshold, planar) = match self {
            Self::S1L => (Comparison::Less, 0, 0.8369, true),
            Self::S2L => (Comparison::Greater, 0, 0.8369, true),
            Self::S1H => (Comparison::Greater, 2, 0.0, false),
            Self::S2H => (Comparison::Less, 2, 0.0, false),
        };
        SectionDef {
            name: Some(self),
            zero_coordinate: 1,
            region: RegionPredicate {
                coordinate,
                comparison,
                threshold,
            },
            crossing_direction: Direction::Either,
            planar,
        }
    }
}

impl fmt::Display for SectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::S1L => "S1L",
            Self::S2L => "S2L",
            Self::S1H => "S1H",
            Self::S2H => "S2H",
        };
        f.write_str(s)
    }
}

impl FromStr for SectionName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1L" => Ok(Self::S1L),
            "S2L" => Ok(Self::S2L),
            "S1H" => Ok(Self::S1H),
            "S2H" => Ok(Self::S2H),
            other => Err(Error::InvalidParameter(format!("unknown section '{other}'"))),
        }
    }
}

/// Hyperplane `state[zero_coordinate] = 0` restricted by a region predicate
/// and a crossing direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionDef {
    pub name: Option<SectionName>,
    pub zero_coordinate: usize,
    pub region: RegionPredicate,
    /// `Either` until calibrated against an anchor orbit.
    pub crossing_direction: Direction,
    /// Planar families additionally pin z and z-dot to zero.
    pub planar: bool,
}

impl SectionDef {
    pub fn event_value(&self, s: &StateVector) -> f64 {
        s[self.zero_coordinate]
    }

    /// Sign of the zero coordinate's time derivative.
    fn crossing_sign(&self, s: &StateVector) -> f64 {
        if self.zero_coordinate < 3 {
            s[self.zero_coordinate + 3].signum()
        } else {
            0.0
        }
    }

    fn direction_admits(&self, s: &StateVector) -> bool {
        match self.crossing_direction {
            Direction::Either => true,
            Direction::Increasing => self.crossing_sign(s) > 0.0,
            Direction::Decreasing => self.crossing_sign(s) < 0.0,
        }
    }

    /// Region and direction test for a located zero of the event function.
    pub fn is_admissible(&self, s: &StateVector) -> bool {
        self.region.admits(s) && self.direction_admits(s)
    }

    /// Coordinates left free by the section (library inputs and fitted outputs).
    pub fn active_coordinates(&self) -> Vec<usize> {
        (0..6)
            .filter(|&i| i != self.zero_coordinate)
            .filter(|&i| !(self.planar && (i == 2 || i == 5)))
            .collect()
    }

    /// Velocity components an impulse may change on this section.
    pub fn actuated_velocities(&self) -> Vec<usize> {
        self.active_coordinates().into_iter().filter(|&i| i >= 3).collect()
    }

    /// Fixes the crossing direction from an admissible state.
    pub fn calibrated_with(mut self, s: &StateVector) -> Self {
        self.crossing_direction = if self.crossing_sign(s) > 0.0 {
            Direction::Increasing
        } else {
            Direction::Decreasing
        };
        self
    }

    pub fn is_compatible_with(&self, family: &Family) -> bool {
        match self.name {
            Some(n) => &n.family() == family,
            None => self.planar == family.is_planar(),
        }
    }
}

/// Event function of the section's hyperplane.
pub fn section_event(def: &SectionDef) -> impl Fn(&StateVector) -> f64 + Copy + '_ {
    move |s| def.event_value(s)
}

/// Locates the orbit's admissible crossing of `def` and calibrates the
/// crossing direction on it. Returns the calibrated section, the crossing
/// state (the anchor) and its time offset from the record's initial state.
pub fn anchor_crossing(
    u: &UpoRecord,
    def: &SectionDef,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<(SectionDef, StateVector, f64)> {
    if !def.is_compatible_with(&u.family) {
        return Err(Error::InvalidParameter(format!(
            "section is not defined for the {} family",
            u.family
        )));
    }
    let s0 = u.initial_state;
    if def.event_value(&s0).abs() < ON_SECTION_TOL && def.region.admits(&s0) {
        return Ok((def.calibrated_with(&s0), s0, 0.0));
    }
    let (t, s) = first_crossing(
        &s0,
        section_event(def),
        Direction::Either,
        |s| def.region.admits(s),
        1.5 * u.period,
        cfg,
        p,
    )?;
    Ok((def.calibrated_with(&s), s, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Velocity perturbation [LU/TU].
    pub delta_v: f64,
    /// Number of neighbouring orbits.
    pub m: usize,
    /// Jacobi-constant spacing of neighbours [LU^2/TU^2].
    pub dc: f64,
    /// Locality radius around the anchor.
    pub eta: f64,
    pub crossings_per_ic: usize,
    /// Also perturb z-dot. `None` decides from the family (non-planar only).
    pub perturb_vz: Option<bool>,
    /// Integration cap per initial condition, in target periods.
    pub time_cap_periods: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            delta_v: 2.5e-7,
            m: 10,
            dc: 1.75e-4,
            eta: 1.0,
            crossings_per_ic: 2,
            perturb_vz: None,
            time_cap_periods: 4.0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v >= 0.0 && self.eta > 0.0 && self.time_cap_periods > 0.0) {
            return Err(Error::InvalidParameter(
                "augmentation needs delta_v >= 0, eta > 0 and a positive time cap".into(),
            ));
        }
        if self.crossings_per_ic < 2 {
            return Err(Error::InvalidParameter(
                "at least two crossings per initial condition are needed to form a pair".into(),
            ));
        }
        Ok(())
    }
}

/// Each base state unperturbed, then `±delta_v` on vx and on vy (and on vz
/// when `perturb_vz`), in that order.
pub fn build_augmented_ics(base: &[StateVector], delta_v: f64, perturb_vz: bool) -> Vec<StateVector> {
    let axes: &[usize] = if perturb_vz { &[3, 4, 5] } else { &[3, 4] };
    let mut out = Vec::with_capacity(base.len() * (1 + 2 * axes.len()));
    for s in base {
        out.push(*s);
        for &k in axes {
            for sign in [1.0, -1.0] {
                let mut t = *s;
                t[k] += sign * delta_v;
                out.push(t);
            }
        }
    }
    out
}

/// Consecutive-crossing training pairs; `x2[i]` follows `x1[i]` on the
/// trajectory started from initial condition `source[i]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub x1: Vec<StateVector>,
    pub x2: Vec<StateVector>,
    pub source: Vec<usize>,
}

impl DatasetPair {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let names = ["x", "y", "z", "vx", "vy", "vz"];
        let header: Vec<String> = ["x1", "x2"]
            .iter()
            .flat_map(|p| names.iter().map(move |n| format!("{p}_{n}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (a, b) in self.x1.iter().zip(&self.x2) {
            let row: Vec<String> = a.iter().chain(b.iter()).map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Admissible crossings of `def` along the trajectory from `s0`, at most
/// `limit` of them. A start state lying admissibly on the section counts as
/// the first crossing when `include_start` is set.
pub fn admissible_crossings(
    s0: &StateVector,
    def: &SectionDef,
    limit: usize,
    include_start: bool,
    time_cap: f64,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<Vec<(f64, StateVector)>> {
    let mut hits = Vec::new();
    if include_start && def.event_value(s0).abs() < ON_SECTION_TOL && def.is_admissible(s0) {
        hits.push((0.0, *s0));
    }
    if hits.len() >= limit {
        return Ok(hits);
    }
    scan_events(
        &Cr3bp(p),
        0.0,
        *s0,
        time_cap,
        section_event(def),
        Direction::Either,
        cfg,
        |t, y| {
            // A start a rounding error off the plane is not a new crossing.
            if t > START_GUARD && def.is_admissible(y) {
                hits.push((t, *y));
                if hits.len() >= limit {
                    return Ok(Flow::Stop);
                }
            }
            Ok(Flow::Continue)
        },
    )?;
    Ok(hits)
}

/// Integrates every initial condition to its first `crossings_per_ic`
/// admissible crossings and forms consecutive pairs inside the `eta` ball
/// around `anchor`. An initial condition lying on the section counts as its
/// own first crossing. `period` scales the per-trajectory time cap.
pub fn collect_pairs(
    ics: &[StateVector],
    def: &SectionDef,
    anchor: &StateVector,
    period: f64,
    cfg: &AugmentationConfig,
    integ: &IntegratorConfig,
    p: &SystemParams,
) -> Result<DatasetPair> {
    cfg.validate()?;
    if def.event_value(anchor).abs() > ON_SECTION_TOL {
        return Err(Error::InvalidParameter("anchor does not lie on the section".into()));
    }
    let time_cap = cfg.time_cap_periods * period;
    let per_ic: Vec<Result<Vec<(f64, StateVector)>>> = ics
        .par_iter()
        .map(|s0| admissible_crossings(s0, def, cfg.crossings_per_ic, true, time_cap, integ, p))
        .collect();
    let mut data = DatasetPair::default();
    let inside = |s: &StateVector| (s - anchor).norm() <= cfg.eta;
    for (j, hits) in per_ic.into_iter().enumerate() {
        // A trajectory that hits a primary contributes nothing.
        let hits = match hits {
            Ok(h) => h,
            Err(Error::Singularity { .. }) => continue,
            Err(e) => return Err(e),
        };
        for w in hits.windows(2) {
            let (a, b) = (w[0].1, w[1].1);
            if inside(&a) && inside(&b) {
                data.x1.push(a);
                data.x2.push(b);
                data.source.push(j);
            }
        }
    }
    Ok(data)
}


/// Training data for one target orbit and section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledDataset {
    /// Section calibrated on the target orbit.
    pub section: SectionDef,
    pub anchor: StateVector,
    /// Target first, then its neighbours by increasing Jacobi constant.
    pub orbit_ids: Vec<String>,
    pub ics: Vec<StateVector>,
    pub pairs: DatasetPair,
}

/// Selects neighbours of `target`, augments the catalog initial states of
/// all of them and collects crossing pairs of `def`.
pub fn sample_dataset(
    catalog: &Catalog,
    target: &UpoRecord,
    def: &SectionDef,
    cfg: &AugmentationConfig,
    integ: &IntegratorConfig,
    p: &SystemParams,
) -> Result<SampledDataset> {
    cfg.validate()?;
    if !def.is_compatible_with(&target.family) {
        return Err(Error::InvalidParameter(format!(
            "section is not defined for the {} family",
            target.family
        )));
    }
    let (section, anchor, _) = anchor_crossing(target, def, integ, p)?;
    let mut orbits = vec![target.clone()];
    orbits.extend(catalog.select_neighbours(target, cfg.m, cfg.dc)?);
    let base: Vec<StateVector> = orbits.iter().map(|o| o.initial_state).collect();
    let perturb_vz = cfg.perturb_vz.unwrap_or(!target.family.is_planar());
    let ics = build_augmented_ics(&base, cfg.delta_v, perturb_vz);
    let pairs = collect_pairs(&ics, &section, &anchor, target.period, cfg, integ, p)?;
    Ok(SampledDataset {
        section,
        anchor,
        orbit_ids: orbits.into_iter().map(|o| o.id).collect(),
        ics,
        pairs,
    })
}
