use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use poincare_upo::closed_loop::StabilizationConfig;
use poincare_upo::discovery::{DiscoveryConfig, EnsembleConfig, LsMethod};
use poincare_upo::integrator::IntegratorConfig;
use poincare_upo::sections::{AugmentationConfig, SectionName};
use serde::{Deserialize, Serialize};

/// Flat key-value experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub catalog: PathBuf,
    pub target: String,
    pub section: String,
    pub seed: u64,

    pub delta_v: f64,
    pub m: usize,
    pub dc: f64,
    pub eta: f64,
    pub crossings_per_ic: usize,
    pub time_cap_periods: f64,

    pub degree: u32,
    pub lambda_sparse: f64,
    pub ls_method: LsMethod,
    pub ensemble: bool,
    pub n_models: usize,
    pub rho: f64,

    pub radii: Vec<f64>,
    /// Also solve at `min_radius_factor` times the infeasibility threshold.
    pub include_min_radius: bool,
    pub min_radius_factor: f64,

    pub eta_control: f64,
    pub max_periods: usize,
    pub divergence_radius: f64,
    /// Initial offset along the unstable direction.
    pub offset_scale: f64,
    /// Inclusive 1-based crossing ranges for Δv totals.
    pub dv_ranges: Vec<[usize; 2]>,

    /// δv values for the error sweep; empty skips it.
    pub delta_v_sweep: Vec<f64>,

    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Duration of `propagate`, in target periods.
    pub propagate_periods: f64,

    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let aug = AugmentationConfig::default();
        let disc = DiscoveryConfig::default();
        let ens = EnsembleConfig::default();
        let stab = StabilizationConfig::default();
        let integ = IntegratorConfig::default();
        Self {
            catalog: PathBuf::from("data/catalog.csv"),
            target: "lyap-target".into(),
            section: "S1L".into(),
            seed: 0,
            delta_v: aug.delta_v,
            m: aug.m,
            dc: aug.dc,
            eta: aug.eta,
            crossings_per_ic: aug.crossings_per_ic,
            time_cap_periods: aug.time_cap_periods,
            degree: disc.degree,
            lambda_sparse: disc.lambda_sparse,
            ls_method: disc.method,
            ensemble: false,
            n_models: ens.n_models,
            rho: ens.rho,
            radii: vec![1e9, 1e-7, 1e-9, 1e-10],
            include_min_radius: true,
            min_radius_factor: 1.001,
            eta_control: stab.eta_control,
            max_periods: stab.max_periods,
            divergence_radius: stab.divergence_radius,
            offset_scale: 1e-7,
            dv_ranges: vec![[1, 14]],
            delta_v_sweep: Vec::new(),
            rel_tol: integ.rel_tol,
            abs_tol: integ.abs_tol,
            propagate_periods: 10.0,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn section_name(&self) -> anyhow::Result<SectionName> {
        Ok(self.section.parse()?)
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            delta_v: self.delta_v,
            m: self.m,
            dc: self.dc,
            eta: self.eta,
            crossings_per_ic: self.crossings_per_ic,
            perturb_vz: None,
            time_cap_periods: self.time_cap_periods,
        }
    }

    pub fn discovery(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            degree: self.degree,
            lambda_sparse: self.lambda_sparse,
            method: self.ls_method,
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_models: self.n_models,
            rho: self.rho,
            seed: self.seed,
        }
    }

    pub fn stabilization(&self) -> StabilizationConfig {
        StabilizationConfig {
            eta_control: self.eta_control,
            max_periods: self.max_periods,
            divergence_radius: self.divergence_radius,
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            ..Default::default()
        }
    }

    /// Checks everything that can be checked without integrating.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.section_name()?;
        self.augmentation().validate()?;
        self.stabilization().validate()?;
        self.integrator().validate()?;
        if self.degree == 0 {
            bail!("degree must be at least 1");
        }
        if !(self.lambda_sparse >= 0.0) {
            bail!("lambda_sparse must be non-negative");
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            bail!("radii must be positive");
        }
        if !(self.min_radius_factor > 1.0) {
            bail!("min_radius_factor must exceed 1");
        }
        if !(self.offset_scale >= 0.0) {
            bail!("offset_scale must be non-negative");
        }
        if self.dv_ranges.iter().any(|[a, b]| *a < 1 || a > b) {
            bail!("dv_ranges must be 1-based inclusive [first, last] with first <= last");
        }
        if self.delta_v_sweep.iter().any(|d| !(*d > 0.0)) {
            bail!("delta_v_sweep values must be positive");
        }
        if !(self.propagate_periods > 0.0) {
            bail!("propagate_periods must be positive");
        }
        Ok(())
    }
}
