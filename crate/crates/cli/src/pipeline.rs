//! Stages shared by the subcommands. Each stage writes its own artifacts
//! as soon as it finishes, so a failure later on leaves them in place.

use anyhow::{anyhow, bail, Context as _};
use nalgebra::DMatrix;
use poincare_upo::catalog::{load_catalog, periodicity_residual, Catalog, UpoRecord};
use poincare_upo::closed_loop::{stabilize, summarize, RunSummary, StabilizationRun};
use poincare_upo::control::{
    active_closed_loop_spectrum, controllability, export_gain, minimal_radius, reduce_and_embed, solve_lmi,
    ActuationProjection, GainExport, LmiProblem, LmiSolution,
};
use poincare_upo::discovery::{
    discover_map, ensemble_discover, export_model, linearize_at, validate_map, DiscoveredMap, LinearizedMap,
    ModelExport, ValidationReport,
};
use poincare_upo::dynamics::{jacobi_constant, lagrange_points, LagrangeLabel};
use poincare_upo::integrator::{integrate, IntegratorConfig};
use poincare_upo::sections::{sample_dataset, SampledDataset, SectionDef, SectionName};
use poincare_upo::stability::{classify_floquet, frobenius_norm, monodromy_at, sensitivity_norm, ManifoldDirections, MonodromyResult};
use poincare_upo::SystemParams;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::output::{Artifacts, Cell, Table};

/// Loaded configuration, catalog and target.
pub struct Experiment {
    pub cfg: PipelineConfig,
    pub p: SystemParams,
    pub integ: IntegratorConfig,
    pub catalog: Catalog,
    pub target: UpoRecord,
    pub section: SectionName,
}

impl Experiment {
    pub fn new(cfg: PipelineConfig) -> anyhow::Result<Self> {
        cfg.validate().context("configuration")?;
        let section = cfg.section_name()?;
        if !cfg.catalog.exists() {
            bail!("configuration: catalog {} does not exist", cfg.catalog.display());
        }
        let p = SystemParams::earth_moon();
        let catalog = load_catalog(&cfg.catalog, &p).with_context(|| format!("loading {}", cfg.catalog.display()))?;
        let target = catalog
            .get(&cfg.target)
            .ok_or_else(|| anyhow!("configuration: target '{}' not in catalog", cfg.target))?
            .clone();
        if section.family() != target.family {
            bail!(
                "configuration: section {section} belongs to the {} family but target '{}' is {}",
                section.family(),
                target.id,
                target.family
            );
        }
        Ok(Self {
            integ: cfg.integrator(),
            cfg,
            p,
            catalog,
            target,
            section,
        })
    }

    pub fn def(&self) -> SectionDef {
        self.section.definition()
    }

    fn sections_of_family(&self) -> Vec<SectionName> {
        SectionName::ALL
            .into_iter()
            .filter(|s| s.family() == self.target.family)
            .collect()
    }
}

fn stage<T>(name: &str, r: anyhow::Result<T>) -> anyhow::Result<T> {
    r.with_context(|| format!("stage '{name}' failed"))
}

fn c64_pairs(v: &[poincare_upo::stability::C64]) -> Vec<[f64; 2]> {
    v.iter().map(|c| [c.re, c.im]).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Serialize)]
pub struct LagrangeEntry {
    pub label: String,
    pub position: [f64; 3],
    pub jacobi: f64,
}

pub fn cmd_lagrange(p: &SystemParams, art: &mut Artifacts) -> anyhow::Result<Vec<LagrangeEntry>> {
    let pts = lagrange_points(p)?;
    let out: Vec<LagrangeEntry> = pts
        .iter()
        .map(|l| LagrangeEntry {
            label: match l.label {
                LagrangeLabel::L1 => "L1",
                LagrangeLabel::L2 => "L2",
                LagrangeLabel::L3 => "L3",
                LagrangeLabel::L4 => "L4",
                LagrangeLabel::L5 => "L5",
            }
            .to_string(),
            position: [l.position[0], l.position[1], l.position[2]],
            jacobi: l.jacobi,
        })
        .collect();
    art.json("lagrange.json", &out)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct PropagateReport {
    pub target: String,
    pub duration: f64,
    pub steps: usize,
    pub final_state: Vec<f64>,
    pub jacobi_initial: f64,
    pub max_jacobi_drift: f64,
    pub periodicity_residual: f64,
}

pub fn cmd_propagate(ex: &Experiment, art: &mut Artifacts) -> anyhow::Result<PropagateReport> {
    let u = &ex.target;
    let duration = ex.cfg.propagate_periods * u.period;
    let traj = integrate(&u.initial_state, (0.0, duration), &ex.integ, &ex.p)?;
    let c0 = jacobi_constant(&u.initial_state, &ex.p)?;
    let mut t = Table::new(&["t", "x", "y", "z", "vx", "vy", "vz", "jacobi"]);
    let mut drift = 0.0f64;
    for (time, s) in traj.times.iter().zip(&traj.states) {
        let c = jacobi_constant(s, &ex.p)?;
        drift = drift.max((c - c0).abs());
        let mut row: Vec<Cell> = vec![(*time).into()];
        row.extend(s.iter().map(|v| Cell::F(*v)));
        row.push(c.into());
        t.push(row);
    }
    art.table("trajectory.csv", &t)?;
    let report = PropagateReport {
        target: u.id.clone(),
        duration,
        steps: traj.len() - 1,
        final_state: traj.states.last().map(|s| s.iter().copied().collect()).unwrap_or_default(),
        jacobi_initial: c0,
        max_jacobi_drift: drift,
        periodicity_residual: periodicity_residual(u, &ex.integ, &ex.p)?,
    };
    art.json("propagate.json", &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct SectionAnalysis {
    pub section: String,
    pub anchor: Vec<f64>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub neutral: Vec<[f64; 2]>,
    pub nu_s: Vec<f64>,
    pub nu_u: Vec<f64>,
    pub spectral_norm: f64,
    pub frobenius_norm: f64,
}

fn analysis_of(name: SectionName, mono: &MonodromyResult, dirs: &ManifoldDirections) -> SectionAnalysis {
    SectionAnalysis {
        section: name.to_string(),
        anchor: mono.anchor_crossing.iter().copied().collect(),
        eigenvalues: c64_pairs(&mono.eigenvalues),
        lambda_u: dirs.lambda_u,
        lambda_s: dirs.lambda_s,
        neutral: c64_pairs(&dirs.neutral),
        nu_s: dirs.nu_s.iter().copied().collect(),
        nu_u: dirs.nu_u.iter().copied().collect(),
        spectral_norm: sensitivity_norm(mono),
        frobenius_norm: frobenius_norm(mono),
    }
}

fn monodromy(ex: &Experiment, name: SectionName) -> anyhow::Result<(MonodromyResult, ManifoldDirections)> {
    let mono = monodromy_at(&ex.target, &name.definition(), &ex.integ, &ex.p)?;
    let dirs = classify_floquet(&mono)?;
    Ok((mono, dirs))
}

/// Monodromy summary at every section of the target's family.
pub fn cmd_analyze(ex: &Experiment, art: &mut Artifacts) -> anyhow::Result<Vec<SectionAnalysis>> {
    let mut out = Vec::new();
    for name in ex.sections_of_family() {
        let (mono, dirs) = monodromy(ex, name).with_context(|| format!("section {name}"))?;
        out.push(analysis_of(name, &mono, &dirs));
    }
    art.json("analyze.json", &out)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct SampleReport {
    pub section: String,
    pub orbit_ids: Vec<String>,
    pub n_ics: usize,
    pub n_pairs: usize,
    pub delta_v: f64,
}

pub fn cmd_sample(ex: &Experiment, art: &mut Artifacts) -> anyhow::Result<SampledDataset> {
    let ds = sample_dataset(&ex.catalog, &ex.target, &ex.def(), &ex.cfg.augmentation(), &ex.integ, &ex.p)?;
    let mut buf = Vec::new();
    ds.pairs.write_csv(&mut buf)?;
    art.write_bytes("dataset.csv", &buf)?;
    art.json(
        "dataset.json",
        &SampleReport {
            section: ex.section.to_string(),
            orbit_ids: ds.orbit_ids.clone(),
            n_ics: ds.ics.len(),
            n_pairs: ds.pairs.len(),
            delta_v: ex.cfg.delta_v,
        },
    )?;
    Ok(ds)
}

pub struct Discovery {
    pub map: DiscoveredMap,
    pub lin: LinearizedMap,
    pub validation: ValidationReport,
    pub rank_deficient: bool,
}

#[derive(Debug, Serialize)]
pub struct ValidationJson<'a> {
    pub section: String,
    pub n_pairs: usize,
    pub delta_v: f64,
    pub nonzero_terms: usize,
    pub rank_deficient: bool,
    pub active_block: Vec<Vec<f64>>,
    pub report: &'a ValidationReport,
}

fn fit(ex: &Experiment, ds: &SampledDataset, mono: &MonodromyResult) -> anyhow::Result<(Discovery, ModelExport)> {
    let active = ds.section.active_coordinates();
    let dcfg = ex.cfg.discovery();
    let (map, rank_deficient, model) = if ex.cfg.ensemble {
        let ens = ensemble_discover(&ds.pairs, &ds.anchor, &active, &dcfg, &ex.cfg.ensemble_config())?;
        let model = export_model(&ens.median_map, Some(&ens));
        (ens.median_map, ens.rank_deficient_fits > 0, model)
    } else {
        let (map, f) = discover_map(&ds.pairs, &ds.anchor, &active, &dcfg)?;
        let model = export_model(&map, None);
        (map, f.rank_deficient, model)
    };
    let lin = linearize_at(&map);
    let validation = validate_map(&lin, &mono.m)?;
    Ok((
        Discovery {
            map,
            lin,
            validation,
            rank_deficient,
        },
        model,
    ))
}

pub fn cmd_discover(
    ex: &Experiment,
    ds: &SampledDataset,
    mono: &MonodromyResult,
    art: &mut Artifacts,
) -> anyhow::Result<Discovery> {
    let (d, model) = fit(ex, ds, mono)?;
    art.json("model.json", &model)?;
    art.json(
        "validation.json",
        &ValidationJson {
            section: ex.section.to_string(),
            n_pairs: ds.pairs.len(),
            delta_v: ex.cfg.delta_v,
            nonzero_terms: d.map.nonzero_count(),
            rank_deficient: d.rank_deficient,
            active_block: rows(&d.lin.active_block()),
            report: &d.validation,
        },
    )?;
    Ok(d)
}

#[derive(Debug, Clone, Serialize)]
pub struct GainOutcome {
    pub label: String,
    pub radius: f64,
    pub feasible: bool,
    pub message: Option<String>,
    pub iterations: Option<usize>,
    pub k_active: Option<Vec<Vec<f64>>>,
    pub gain: Option<GainExport>,
}

pub struct Synthesis {
    pub base: LmiProblem,
    pub controllable_rank: usize,
    pub min_radius: Option<f64>,
    pub gains: Vec<(GainOutcome, Option<(LmiProblem, LmiSolution)>)>,
}

#[derive(Debug, Serialize)]
pub struct SynthesisJson {
    pub active: Vec<usize>,
    pub channels: Vec<usize>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub margin: f64,
    pub controllability_rank: usize,
    pub min_radius: Option<f64>,
    pub gains: Vec<GainOutcome>,
}

fn radius_label(i: usize, r: f64, is_min: bool) -> String {
    if is_min {
        format!("{i:02}_near_min")
    } else {
        format!("{i:02}_r{r:e}")
    }
}

pub fn cmd_synthesize(ex: &Experiment, lin: &LinearizedMap, def: &SectionDef, art: &mut Artifacts) -> anyhow::Result<Synthesis> {
    let r = ActuationProjection::default();
    let base = reduce_and_embed(lin, &r, def, 1.0, None)?;
    let ctrb = controllability(&base.a, &base.b)?;
    let min_radius = minimal_radius(&base).ok();
    let mut radii: Vec<(f64, bool)> = ex.cfg.radii.iter().map(|&r| (r, false)).collect();
    if let (true, Some(rm)) = (ex.cfg.include_min_radius, min_radius) {
        radii.push((rm * ex.cfg.min_radius_factor, true));
    }
    let mut gains = Vec::new();
    for (i, (radius, is_min)) in radii.into_iter().enumerate() {
        let prob = base.with_radius(radius);
        let label = radius_label(i, radius, is_min);
        let entry = match solve_lmi(&prob) {
            Ok(sol) => {
                let g = export_gain(&prob, &sol);
                art.json(&format!("gains/gain_{label}.json"), &g)?;
                (
                    GainOutcome {
                        label,
                        radius,
                        feasible: true,
                        message: None,
                        iterations: Some(sol.iterations),
                        k_active: Some(rows(&sol.k_active)),
                        gain: Some(g),
                    },
                    Some((prob, sol)),
                )
            }
            Err(e @ poincare_upo::Error::Infeasible { .. }) => (
                GainOutcome {
                    label,
                    radius,
                    feasible: false,
                    message: Some(e.to_string()),
                    iterations: None,
                    k_active: None,
                    gain: None,
                },
                None,
            ),
            Err(e) => return Err(e.into()),
        };
        gains.push(entry);
    }
    art.json(
        "synthesis.json",
        &SynthesisJson {
            active: base.active.clone(),
            channels: base.channels.clone(),
            a: rows(&base.a),
            b: rows(&base.b),
            margin: base.margin,
            controllability_rank: ctrb.rank,
            min_radius,
            gains: gains.iter().map(|g| g.0.clone()).collect(),
        },
    )?;
    Ok(Synthesis {
        base,
        controllable_rank: ctrb.rank,
        min_radius,
        gains,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub label: String,
    pub radius: f64,
    pub summary: RunSummary,
}

pub fn cmd_stabilize(
    ex: &Experiment,
    syn: &Synthesis,
    def: &SectionDef,
    dirs: &ManifoldDirections,
    art: &mut Artifacts,
) -> anyhow::Result<Vec<(RunOutcome, StabilizationRun)>> {
    let r = ActuationProjection::default();
    let scfg = ex.cfg.stabilization();
    let offset = dirs.nu_u * ex.cfg.offset_scale;
    let ranges: Vec<(usize, usize)> = ex.cfg.dv_ranges.iter().map(|[a, b]| (*a, *b)).collect();
    let mut out = Vec::new();
    let mut table = Table::new(&[
        "label",
        "radius",
        "periods",
        "diverged",
        "theta_deg",
        "theta_velocity_deg",
        "spectral_radius",
        "final_deviation",
        "delta_v_first",
        "delta_v_last",
        "delta_v_si",
    ]);
    for (g, solved) in &syn.gains {
        let Some((prob, sol)) = solved else {
            table.push(vec![
                g.label.as_str().into(),
                g.radius.into(),
                0usize.into(),
                "".into(),
                f64::NAN.into(),
                f64::NAN.into(),
                f64::NAN.into(),
                f64::NAN.into(),
                "".into(),
                "".into(),
                f64::NAN.into(),
            ]);
            continue;
        };
        let run = stabilize(&ex.target, def, &sol.k_full, &r, &scfg, &ex.integ, &ex.p, &offset)?;
        let eig = active_closed_loop_spectrum(prob, &sol.k_active);
        let summary = summarize(&run, Some(dirs), def, &ranges, &eig, &ex.p);
        let mut buf = Vec::new();
        run.write_csv(&mut buf)?;
        art.write_bytes(&format!("runs/run_{}.csv", g.label), &buf)?;
        let outcome = RunOutcome {
            label: g.label.clone(),
            radius: g.radius,
            summary,
        };
        art.json(&format!("runs/summary_{}.json", g.label), &outcome)?;
        let rho = eig.first().map_or(f64::NAN, |l| l.norm());
        let s = &outcome.summary;
        let dv_rows: Vec<(Cell, Cell, Cell)> = if s.delta_v_ranges.is_empty() {
            vec![("".into(), "".into(), f64::NAN.into())]
        } else {
            s.delta_v_ranges
                .iter()
                .map(|d| (d.first.into(), d.last.into(), d.delta_v_si.into()))
                .collect()
        };
        for (first, last, dv) in dv_rows {
            table.push(vec![
                g.label.as_str().into(),
                g.radius.into(),
                s.periods_completed.into(),
                s.diverged.into(),
                s.theta_deg.unwrap_or(f64::NAN).into(),
                s.theta_velocity_deg.unwrap_or(f64::NAN).into(),
                rho.into(),
                s.final_deviation.into(),
                first,
                last,
                dv,
            ]);
        }
        out.push((outcome, run));
    }
    art.table("radius_sweep.csv", &table)?;
    Ok(out)
}

/// Total eigenvalue error of the discovered map per δv.
pub fn delta_v_sweep(ex: &Experiment, mono: &MonodromyResult, art: &mut Artifacts) -> anyhow::Result<Table> {
    let mut t = Table::new(&["delta_v", "n_pairs", "total_error", "det", "nonzero_terms"]);
    for &dv in &ex.cfg.delta_v_sweep {
        let mut aug = ex.cfg.augmentation();
        aug.delta_v = dv;
        let ds = sample_dataset(&ex.catalog, &ex.target, &ex.def(), &aug, &ex.integ, &ex.p)?;
        let (d, _) = fit(ex, &ds, mono)?;
        t.push(vec![
            dv.into(),
            ds.pairs.len().into(),
            d.validation.total_error.into(),
            d.validation.det.into(),
            d.map.nonzero_count().into(),
        ]);
    }
    art.table("delta_v_sweep.csv", &t)?;
    Ok(t)
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub target: String,
    pub section: String,
    pub seed: u64,
    pub monodromy: SectionAnalysis,
    pub n_pairs: usize,
    pub validation: ValidationReport,
    pub min_radius: Option<f64>,
    pub controllability_rank: usize,
    pub gains: Vec<GainOutcome>,
    pub runs: Vec<RunOutcome>,
}

/// Runs the intermediate stages up to and including `last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Sample,
    Discover,
    Synthesize,
    Stabilize,
    Pipeline,
}

pub fn run_through(ex: &Experiment, last: Stage, art: &mut Artifacts) -> anyhow::Result<Option<RunReport>> {
    let (mono, dirs) = stage("analyze", monodromy(ex, ex.section))?;
    let analysis = analysis_of(ex.section, &mono, &dirs);
    if last == Stage::Pipeline {
        stage("analyze", cmd_analyze(ex, art))?;
    }
    let ds = stage("sample", cmd_sample(ex, art))?;
    if last == Stage::Sample {
        return Ok(None);
    }
    let disc = stage("discover", cmd_discover(ex, &ds, &mono, art))?;
    if last == Stage::Discover {
        return Ok(None);
    }
    let syn = stage("synthesize", cmd_synthesize(ex, &disc.lin, &ds.section, art))?;
    if last == Stage::Synthesize {
        return Ok(None);
    }
    let runs = stage("stabilize", cmd_stabilize(ex, &syn, &ds.section, &dirs, art))?;
    if last == Stage::Pipeline && !ex.cfg.delta_v_sweep.is_empty() {
        stage("delta-v sweep", delta_v_sweep(ex, &mono, art))?;
    }
    let report = RunReport {
        target: ex.target.id.clone(),
        section: ex.section.to_string(),
        seed: ex.cfg.seed,
        monodromy: analysis,
        n_pairs: ds.pairs.len(),
        validation: disc.validation,
        min_radius: syn.min_radius,
        controllability_rank: syn.controllable_rank,
        gains: syn.gains.into_iter().map(|g| g.0).collect(),
        runs: runs.into_iter().map(|r| r.0).collect(),
    };
    art.json("report.json", &report)?;
    Ok(Some(report))
}
