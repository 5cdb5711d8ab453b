//! Sparse identification of Poincaré maps: polynomial libraries, STLSQ,
//! bootstrap ensembles, linearization at the anchor and validation against
//! the monodromy matrix.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::sections::DatasetPair;
use crate::stability::C64;

/// Monomials of total degree `<= degree` over a subset of the state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyLibrary {
    pub variable_indices: Vec<usize>,
    pub degree: u32,
    /// Exponents per active variable, constant term first, then graded
    /// lexicographic order.
    pub monomials: Vec<Vec<u32>>,
}

impl PolyLibrary {
    pub fn new(variable_indices: Vec<usize>, degree: u32) -> Result<Self> {
        if variable_indices.iter().any(|&i| i >= 6) {
            return Err(Error::InvalidParameter("library variable index out of range".into()));
        }
        let n = variable_indices.len();
        let mut monomials = Vec::new();
        for d in 0..=degree {
            let mut cur = vec![0; n];
            push_compositions(&mut monomials, &mut cur, 0, d);
        }
        Ok(Self {
            variable_indices,
            degree,
            monomials,
        })
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Column of the degree-1 monomial in active variable `k`.
    pub fn linear_column(&self, k: usize) -> Option<usize> {
        self.monomials
            .iter()
            .position(|e| e.iter().sum::<u32>() == 1 && e[k] == 1)
    }

    /// Library row for a single deviation vector.
    pub fn evaluate(&self, dev: &StateVector) -> DVector<f64> {
        let vals: Vec<f64> = self.variable_indices.iter().map(|&i| dev[i]).collect();
        DVector::from_iterator(
            self.len(),
            self.monomials.iter().map(|e| {
                e.iter()
                    .zip(&vals)
                    .fold(1.0, |acc, (&k, &v)| acc * v.powi(k as i32))
            }),
        )
    }
}

// Exponent vectors summing to `left`, first variable's exponent descending.
fn push_compositions(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 >= cur.len() {
        if let Some(last) = cur.last_mut() {
            *last = left;
            out.push(cur.clone());
        } else if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        push_compositions(out, cur, pos + 1, left - k);
    }
    cur[pos] = 0;
}

/// Feature matrix: one row per (already centred) sample.
pub fn build_library(deviations: &[StateVector], lib: &PolyLibrary) -> DMatrix<f64> {
    let mut theta = DMatrix::zeros(deviations.len(), lib.len());
    for (r, d) in deviations.iter().enumerate() {
        theta.set_row(r, &lib.evaluate(d).transpose());
    }
    theta
}

/// How a rank-deficient least-squares subproblem is resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LsMethod {
    /// Minimum-norm solution from the SVD.
    MinNorm,
    /// Basic solution from QR with column-norm pivoting: at most `rank`
    /// nonzero entries, dependent columns left at zero.
    #[default]
    PivotedQr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StlsqFit {
    pub coefficients: DMatrix<f64>,
    /// Some least-squares solve on a surviving support was rank deficient.
    pub rank_deficient: bool,
    pub iterations: usize,
}

fn rank_tol(rows: usize, cols: usize, largest: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * largest
}

fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let (rows, cols) = a.shape();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rank_tol(rows, cols, smax);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd
        .solve(b, tol)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((x, rank < cols))
}

// Householder QR with column-norm pivoting (norms downdated each step).
fn lstsq_pivoted_qr(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let (rows, cols) = a.shape();
    let mut r = a.clone();
    let mut qtb = b.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let steps = rows.min(cols);
    let mut norms: Vec<f64> = (0..cols).map(|j| r.column(j).norm()).collect();
    let mut diag = Vec::with_capacity(steps);
    for k in 0..steps {
        let (piv, _) = norms[k..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let piv = piv + k;
        if piv != k {
            r.swap_columns(k, piv);
            perm.swap(k, piv);
            norms.swap(k, piv);
        }
        let mut v: DVector<f64> = r.view((k, k), (rows - k, 1)).column(0).into_owned();
        let alpha = v.norm();
        if alpha == 0.0 {
            diag.push(0.0);
            continue;
        }
        let beta = if v[0] > 0.0 { -alpha } else { alpha };
        v[0] -= beta;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..cols {
                let mut col = r.view_mut((k, j), (rows - k, 1));
                let s = 2.0 * v.dot(&col.column(0)) / vnorm2;
                col.column_mut(0).axpy(-s, &v, 1.0);
            }
            let mut tail = qtb.rows_mut(k, rows - k);
            let s = 2.0 * v.dot(&tail) / vnorm2;
            tail.axpy(-s, &v, 1.0);
        }
        r[(k, k)] = beta;
        diag.push(beta);
        for j in k + 1..cols {
            norms[j] = r.view((k + 1, j), (rows - k - 1, 1)).norm();
        }
    }
    let largest = diag.first().map(|d| d.abs()).unwrap_or(0.0);
    let tol = rank_tol(rows, cols, largest);
    let rank = diag.iter().take_while(|d| d.abs() > tol).count();
    let mut z = DVector::zeros(cols);
    for i in (0..rank).rev() {
        let mut acc = qtb[i];
        for j in i + 1..rank {
            acc -= r[(i, j)] * z[j];
        }
        z[i] = acc / r[(i, i)];
    }
    let mut x = DVector::zeros(cols);
    for (i, &p) in perm.iter().enumerate() {
        x[p] = z[i];
    }
    Ok((x, rank < cols))
}

pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, method: LsMethod) -> Result<(DVector<f64>, bool)> {
    if a.ncols() == 0 {
        return Ok((DVector::zeros(0), false));
    }
    match method {
        LsMethod::MinNorm => lstsq_min_norm(a, b),
        LsMethod::PivotedQr => lstsq_pivoted_qr(a, b),
    }
}

/// Sequentially thresholded least squares, one support per output column.
pub fn stlsq(theta: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, method: LsMethod) -> Result<StlsqFit> {
    if theta.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "library has {} rows but targets have {}",
            theta.nrows(),
            y.nrows()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("sparsity threshold must be positive".into()));
    }
    let d = theta.ncols();
    let mut coefficients = DMatrix::zeros(d, y.ncols());
    let mut rank_deficient = false;
    let mut iterations = 0;
    for k in 0..y.ncols() {
        let b = y.column(k).into_owned();
        let mut support: Vec<usize> = (0..d).collect();
        let mut xi = DVector::zeros(d);
        // The support only shrinks, so this terminates within d + 1 fits.
        loop {
            iterations += 1;
            xi.fill(0.0);
            if support.is_empty() {
                break;
            }
            let sub = theta.select_columns(support.iter());
            let (sol, deficient) = lstsq(&sub, &b, method)?;
            rank_deficient |= deficient;
            for (&j, &v) in support.iter().zip(sol.iter()) {
                xi[j] = v;
            }
            let next: Vec<usize> = support.iter().copied().filter(|&j| xi[j].abs() >= lambda).collect();
            if next.len() == support.len() {
                break;
            }
            support = next;
        }
        coefficients.set_column(k, &xi);
    }
    Ok(StlsqFit {
        coefficients,
        rank_deficient,
        iterations,
    })
}

/// Polynomial return map `F(x) = x̄ + Θ(x - x̄) Ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredMap {
    pub library: PolyLibrary,
    /// D x 6, zero columns for outputs outside the library variables.
    pub coefficients: DMatrix<f64>,
    pub anchor: StateVector,
}

impl DiscoveredMap {
    pub fn apply(&self, x: &StateVector) -> StateVector {
        let row = self.library.evaluate(&(x - self.anchor));
        let dev = self.coefficients.tr_mul(&row);
        self.anchor + StateVector::from_iterator(dev.iter().copied())
    }

    pub fn nonzero_count(&self) -> usize {
        self.coefficients.iter().filter(|v| **v != 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub degree: u32,
    pub lambda_sparse: f64,
    pub method: LsMethod,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            degree: 5,
            lambda_sparse: 1e-6,
            method: LsMethod::default(),
        }
    }
}

/// Centred library and targets for a dataset.
pub fn regression_problem(
    x1: &[StateVector],
    x2: &[StateVector],
    anchor: &StateVector,
    lib: &PolyLibrary,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let dev1: Vec<StateVector> = x1.iter().map(|s| s - anchor).collect();
    let theta = build_library(&dev1, lib);
    let n = lib.variable_indices.len();
    let y = DMatrix::from_fn(x2.len(), n, |r, k| {
        let i = lib.variable_indices[k];
        x2[r][i] - anchor[i]
    });
    (theta, y)
}

fn embed_coefficients(lib: &PolyLibrary, active: &DMatrix<f64>) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(lib.len(), 6);
    for (k, &i) in lib.variable_indices.iter().enumerate() {
        full.set_column(i, &active.column(k));
    }
    full
}

/// Single STLSQ fit of the centred return map.
pub fn discover_map(
    data: &DatasetPair,
    anchor: &StateVector,
    active: &[usize],
    cfg: &DiscoveryConfig,
) -> Result<(DiscoveredMap, StlsqFit)> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let lib = PolyLibrary::new(active.to_vec(), cfg.degree)?;
    let (theta, y) = regression_problem(&data.x1, &data.x2, anchor, &lib);
    let fit = stlsq(&theta, &y, cfg.lambda_sparse, cfg.method)?;
    let map = DiscoveredMap {
        coefficients: embed_coefficients(&lib, &fit.coefficients),
        library: lib,
        anchor: *anchor,
    };
    Ok((map, fit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub median_map: DiscoveredMap,
    /// D x 6, fraction of bootstrap models with a nonzero coefficient.
    pub inclusion_probability: DMatrix<f64>,
    /// D x 6 sample variance over all bootstrap models.
    pub variance: DMatrix<f64>,
    pub n_models: usize,
    pub rank_deficient_fits: usize,
}

impl EnsembleResult {
    pub fn total_variance(&self) -> f64 {
        self.variance.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_models: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_models: 100,
            rho: 0.6,
            seed: 0,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bootstrap ensemble of STLSQ fits. Model `i` draws its resample from
/// stream `i` of a ChaCha generator seeded with `ens.seed`, so the result
/// does not depend on thread scheduling.
pub fn ensemble_discover(
    data: &DatasetPair,
    anchor: &StateVector,
    active: &[usize],
    cfg: &DiscoveryConfig,
    ens: &EnsembleConfig,
) -> Result<EnsembleResult> {
    if ens.n_models < 2 {
        return Err(Error::InvalidParameter("ensemble needs at least two models".into()));
    }
    if !(0.0..1.0).contains(&ens.rho) {
        return Err(Error::InvalidParameter("inclusion threshold must lie in [0, 1)".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let lib = PolyLibrary::new(active.to_vec(), cfg.degree)?;
    let (theta, y) = regression_problem(&data.x1, &data.x2, anchor, &lib);
    let n = theta.nrows();
    let fits: Vec<Result<StlsqFit>> = (0..ens.n_models)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(ens.seed);
            rng.set_stream(i as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stlsq(&theta.select_rows(rows.iter()), &y.select_rows(rows.iter()), cfg.lambda_sparse, cfg.method)
        })
        .collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;

    let (d, k) = (lib.len(), y.ncols());
    let mut incl = DMatrix::zeros(d, k);
    let mut var = DMatrix::zeros(d, k);
    let mut med = DMatrix::zeros(d, k);
    let m = ens.n_models as f64;
    for r in 0..d {
        for c in 0..k {
            let draws: Vec<f64> = fits.iter().map(|f| f.coefficients[(r, c)]).collect();
            let mut nonzero: Vec<f64> = draws.iter().copied().filter(|v| *v != 0.0).collect();
            let p = nonzero.len() as f64 / m;
            incl[(r, c)] = p;
            let mean = draws.iter().sum::<f64>() / m;
            var[(r, c)] = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
            if !nonzero.is_empty() && p >= ens.rho {
                med[(r, c)] = median(&mut nonzero);
            }
        }
    }
    Ok(EnsembleResult {
        median_map: DiscoveredMap {
            coefficients: embed_coefficients(&lib, &med),
            library: lib.clone(),
            anchor: *anchor,
        },
        inclusion_probability: embed_coefficients(&lib, &incl),
        variance: embed_coefficients(&lib, &var),
        n_models: ens.n_models,
        rank_deficient_fits: fits.iter().filter(|f| f.rank_deficient).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedMap {
    pub a: Matrix6<f64>,
    pub anchor: StateVector,
    pub active: Vec<usize>,
}

impl LinearizedMap {
    pub fn active_block(&self) -> DMatrix<f64> {
        let n = self.active.len();
        DMatrix::from_fn(n, n, |i, j| self.a[(self.active[i], self.active[j])])
    }
}

/// Jacobian of the map at the anchor: the degree-1 coefficients.
pub fn linearize_at(map: &DiscoveredMap) -> LinearizedMap {
    let mut a = Matrix6::zeros();
    for (k, &j) in map.library.variable_indices.iter().enumerate() {
        if let Some(col) = map.library.linear_column(k) {
            for i in 0..6 {
                a[(i, j)] = map.coefficients[(col, i)];
            }
        }
    }
    LinearizedMap {
        a,
        anchor: map.anchor,
        active: map.library.variable_indices.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenClass {
    Unstable,
    Neutral,
    Stable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenComparison {
    pub class: EigenClass,
    pub monodromy: C64,
    pub model: C64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Active-block spectrum of the model, descending magnitude.
    pub model_eigenvalues: Vec<C64>,
    pub monodromy_eigenvalues: Vec<C64>,
    pub pairs: Vec<EigenComparison>,
    pub total_error: f64,
    pub det: f64,
}

fn by_magnitude(mut v: Vec<C64>) -> Vec<C64> {
    v.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    v
}

// (unstable, neutral, stable) representatives of a spectrum sorted by
// descending magnitude; the neutral one is the member closest to |λ| = 1.
fn classify_triple(sorted: &[C64]) -> Option<[C64; 3]> {
    let n = sorted.len();
    if n < 3 {
        return None;
    }
    let neutral = sorted[1..n - 1]
        .iter()
        .copied()
        .min_by(|a, b| (a.norm() - 1.0).abs().total_cmp(&(b.norm() - 1.0).abs()))?;
    Some([sorted[0], neutral, sorted[n - 1]])
}

fn eigen_distance(a: C64, b: C64) -> f64 {
    if a.im != 0.0 || b.im != 0.0 {
        (a.norm() - b.norm()).abs()
    } else {
        (a.re - b.re).abs()
    }
}

/// Compares the model's active-block spectrum with the monodromy spectrum.
pub fn validate_map(lin: &LinearizedMap, m: &Matrix6<f64>) -> Result<ValidationReport> {
    let block = lin.active_block();
    if block.nrows() == 0 {
        return Err(Error::EmptyActiveBlock);
    }
    let model = by_magnitude(block.complex_eigenvalues().iter().copied().collect());
    let mono = by_magnitude(m.complex_eigenvalues().iter().copied().collect());
    let det = block.determinant();
    let mut pairs = Vec::new();
    if let (Some(tm), Some(ta)) = (classify_triple(&mono), classify_triple(&model)) {
        for (class, (lm, la)) in [EigenClass::Unstable, EigenClass::Neutral, EigenClass::Stable]
            .into_iter()
            .zip(tm.into_iter().zip(ta))
        {
            pairs.push(EigenComparison {
                class,
                monodromy: lm,
                model: la,
                abs_error: eigen_distance(lm, la),
            });
        }
    } else {
        return Err(Error::Dimension("validation needs at least three active coordinates".into()));
    }
    let total_error = pairs.iter().map(|p| p.abs_error).sum();
    Ok(ValidationReport {
        model_eigenvalues: model,
        monodromy_eigenvalues: mono,
        pairs,
        total_error,
        det,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTerm {
    pub output: usize,
    pub exponents: BTreeMap<usize, u32>,
    pub coefficient: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inclusion_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExport {
    pub anchor: Vec<f64>,
    pub active_variables: Vec<usize>,
    pub degree: u32,
    pub monomials: Vec<Vec<u32>>,
    pub terms: Vec<ModelTerm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_models: Option<usize>,
}

/// Nonzero terms keyed by state index, plus ensemble statistics if given.
pub fn export_model(map: &DiscoveredMap, ensemble: Option<&EnsembleResult>) -> ModelExport {
    let lib = &map.library;
    let mut terms = Vec::new();
    for output in 0..6 {
        for (r, e) in lib.monomials.iter().enumerate() {
            let c = map.coefficients[(r, output)];
            if c == 0.0 {
                continue;
            }
            terms.push(ModelTerm {
                output,
                exponents: lib
                    .variable_indices
                    .iter()
                    .zip(e)
                    .filter(|(_, &k)| k > 0)
                    .map(|(&i, &k)| (i, k))
                    .collect(),
                coefficient: c,
                inclusion_probability: ensemble.map(|en| en.inclusion_probability[(r, output)]),
                variance: ensemble.map(|en| en.variance[(r, output)]),
            });
        }
    }
    ModelExport {
        anchor: map.anchor.iter().copied().collect(),
        active_variables: lib.variable_indices.clone(),
        degree: lib.degree,
        monomials: lib.monomials.clone(),
        terms,
        n_models: ensemble.map(|e| e.n_models),
    }
}
