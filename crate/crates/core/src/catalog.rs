//! Periodic-orbit catalog: CSV ingestion, neighbour selection by Jacobi
//! constant, and periodicity checks.
//!
//! File format: header `id,family,x,y,z,vx,vy,vz,period,jacobi`, one orbit per
//! line, values in nondimensional units.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{jacobi_constant, StateVector, SystemParams};
use crate::error::{Error, Result};
use crate::integrator::{propagate, IntegratorConfig};

/// Largest tolerated difference between a stored and recomputed Jacobi constant.
pub const JACOBI_MISMATCH_TOL: f64 = 1e-6;

pub const CSV_HEADER: [&str; 10] = [
    "id", "family", "x", "y", "z", "vx", "vy", "vz", "period", "jacobi",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Lyapunov,
    Halo,
    Other(String),
}

impl Family {
    pub fn is_planar(&self) -> bool {
        matches!(self, Family::Lyapunov)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Lyapunov => f.write_str("lyapunov"),
            Family::Halo => f.write_str("halo"),
            Family::Other(s) => f.write_str(s),
        }
    }
}

impl FromStr for Family {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "lyapunov" => Family::Lyapunov,
            "halo" => Family::Halo,
            other => Family::Other(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpoRecord {
    pub id: String,
    pub family: Family,
    pub initial_state: StateVector,
    /// [TU]
    pub period: f64,
    /// [LU^2/TU^2]
    pub jacobi: f64,
}

impl UpoRecord {
    /// Checks the record invariants against `p`.
    pub fn validate(&self, p: &SystemParams) -> Result<()> {
        let bad = |msg: String| Error::CatalogValidation {
            id: self.id.clone(),
            msg,
        };
        if !self.initial_state.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite state component".into()));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(bad(format!("period must be positive, got {}", self.period)));
        }
        let c = jacobi_constant(&self.initial_state, p)?;
        if (c - self.jacobi).abs() > JACOBI_MISMATCH_TOL {
            return Err(bad(format!(
                "stored Jacobi constant {} differs from recomputed {}",
                self.jacobi, c
            )));
        }
        Ok(())
    }
}

/// Records sorted by Jacobi constant with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    records: Vec<UpoRecord>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    family: String,
    x: f64,
    y: f64,
    z: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    period: f64,
    jacobi: f64,
}

impl Catalog {
    pub fn new(mut records: Vec<UpoRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.clone()) {
                return Err(Error::CatalogValidation {
                    id: r.id.clone(),
                    msg: "duplicate id".into(),
                });
            }
        }
        records.sort_by(|a, b| a.jacobi.total_cmp(&b.jacobi));
        Ok(Self { records })
    }

    pub fn records(&self) -> &[UpoRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UpoRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Parses and validates CSV text.
    pub fn from_reader<R: Read>(reader: R, p: &SystemParams) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::CatalogParse {
                line: e.position().map(|pos| pos.line() as usize).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let rec = UpoRecord {
                id: row.id,
                family: row.family.parse().unwrap(),
                initial_state: StateVector::new(row.x, row.y, row.z, row.vx, row.vy, row.vz),
                period: row.period,
                jacobi: row.jacobi,
            };
            rec.validate(p)?;
            records.push(rec);
        }
        Self::new(records)
    }

    /// Writes CSV with round-trip exact floats.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER).map_err(csv_io)?;
        for r in &self.records {
            let s = &r.initial_state;
            let mut row = vec![r.id.clone(), r.family.to_string()];
            row.extend(
                [s[0], s[1], s[2], s[3], s[4], s[5], r.period, r.jacobi]
                    .iter()
                    .map(|v| format!("{v:?}")),
            );
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Returns `m` neighbours of `target`: for `k = 1..` the catalog entry
    /// nearest each level `C_target ± k dc`, alternating above and below
    /// (the extra one goes below when `m` is odd). Sorted by C.
    pub fn select_neighbours(&self, target: &UpoRecord, m: usize, dc: f64) -> Result<Vec<UpoRecord>> {
        if m == 0 {
            return Ok(Vec::new());
        }
        if !(dc > 0.0) {
            return Err(Error::InvalidParameter("neighbour spacing must be positive".into()));
        }
        let above = m / 2;
        let below = m - above;
        let lo = target.jacobi - below as f64 * dc;
        let hi = target.jacobi + above as f64 * dc;
        let (min, max) = match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => (a.jacobi, b.jacobi),
            _ => (f64::NAN, f64::NAN),
        };
        if !(lo >= min - 0.5 * dc && hi <= max + 0.5 * dc) {
            return Err(Error::InsufficientSpan { lo, hi, min, max });
        }
        let mut used: HashSet<&str> = HashSet::new();
        used.insert(target.id.as_str());
        let mut out = Vec::with_capacity(m);
        let levels = (1..=below)
            .map(|k| target.jacobi - k as f64 * dc)
            .chain((1..=above).map(|k| target.jacobi + k as f64 * dc));
        for level in levels {
            let pick = self
                .records
                .iter()
                .filter(|r| r.family == target.family && !used.contains(r.id.as_str()))
                .min_by(|a, b| (a.jacobi - level).abs().total_cmp(&(b.jacobi - level).abs()))
                .ok_or(Error::InsufficientSpan { lo, hi, min, max })?;
            used.insert(pick.id.as_str());
            out.push(pick.clone());
        }
        out.sort_by(|a, b| a.jacobi.total_cmp(&b.jacobi));
        Ok(out)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn load_catalog(path: impl AsRef<Path>, p: &SystemParams) -> Result<Catalog> {
    let f = std::fs::File::open(path)?;
    Catalog::from_reader(f, p)
}

pub fn save_catalog(cat: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    cat.to_writer(f)
}

/// Position error [LU] after flowing the record for one period.
pub fn periodicity_residual(u: &UpoRecord, cfg: &IntegratorConfig, p: &SystemParams) -> Result<f64> {
    let end = propagate(&u.initial_state, u.period, cfg, p)?;
    Ok((end - u.initial_state).fixed_rows::<3>(0).norm())
}
