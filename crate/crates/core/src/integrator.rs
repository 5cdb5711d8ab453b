//! Adaptive eighth-order Runge–Kutta propagation (Dormand–Prince 8(5,3)
//! tableau), event location on the integrated solution, and joint
//! state + state-transition-matrix propagation.

use nalgebra::{Matrix6, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{cr3bp_derivative, variational_jacobian, StateVector, SystemParams};
use crate::error::{Error, Result};

/// Autonomous first-order system `y' = f(y)`.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, y: &SVector<f64, N>) -> Result<SVector<f64, N>>;

    /// Multiplier applied to the absolute tolerance of component `i`.
    fn abs_tol_weight(&self, _i: usize) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest step [TU].
    pub max_step: f64,
    /// Smallest step before the integration is abandoned [TU].
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            max_step: 0.5,
            min_step: 1e-14,
            max_steps: 2_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.max_step) {
            return Err(Error::InvalidParameter(
                "need 0 < min_step <= max_step".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// The CR3BP state equations.
#[derive(Debug, Clone, Copy)]
pub struct Cr3bp<'a>(pub &'a SystemParams);

impl OdeSystem<6> for Cr3bp<'_> {
    fn rhs(&self, y: &SVector<f64, 6>) -> Result<SVector<f64, 6>> {
        cr3bp_derivative(y, self.0)
    }
}

/// State plus the 36 variational equations, Φ stored column-major in
/// components 6..42.
#[derive(Debug, Clone, Copy)]
pub struct Cr3bpWithStm<'a>(pub &'a SystemParams);

pub const STM_ABS_TOL_WEIGHT: f64 = 1e3;

impl OdeSystem<42> for Cr3bpWithStm<'_> {
    fn rhs(&self, y: &SVector<f64, 42>) -> Result<SVector<f64, 42>> {
        let s: StateVector = y.fixed_rows::<6>(0).into_owned();
        let ds = cr3bp_derivative(&s, self.0)?;
        let jac = variational_jacobian(&s, self.0)?;
        let phi = Matrix6::from_column_slice(&y.as_slice()[6..]);
        let dphi = jac * phi;
        let mut out = SVector::<f64, 42>::zeros();
        out.fixed_rows_mut::<6>(0).copy_from(&ds);
        out.as_mut_slice()[6..].copy_from_slice(dphi.as_slice());
        Ok(out)
    }

    fn abs_tol_weight(&self, i: usize) -> f64 {
        if i < 6 {
            1.0
        } else {
            STM_ABS_TOL_WEIGHT
        }
    }
}

/// Accepted samples of an integration, times strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, &StateVector)> {
        self.times.last().copied().zip(self.states.last())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmResult {
    pub final_state: StateVector,
    pub stm: Matrix6<f64>,
}

/// Sign requirement on the event function's change at a crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Decreasing,
    Either,
    Increasing,
}

impl Direction {
    pub fn from_sign(sign: i32) -> Self {
        match sign.signum() {
            -1 => Direction::Decreasing,
            1 => Direction::Increasing,
            _ => Direction::Either,
        }
    }

    fn admits(self, before: f64, after: f64) -> bool {
        match self {
            Direction::Increasing => after > before,
            Direction::Decreasing => after < before,
            Direction::Either => true,
        }
    }
}

/// Event value tolerance reached by crossing refinement.
pub const EVENT_TOL: f64 = 1e-13;

pub(crate) enum Flow {
    Continue,
    Stop,
}

// Dormand–Prince 8(5,3) coefficients. The nodes are not needed: the field
// is autonomous.
const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;

const B1: f64 = 5.42937341165687622380535766363E-2;
const B6: f64 = 4.45031289275240888144113950566E0;
const B7: f64 = 1.89151789931450038304281599044E0;
const B8: f64 = -5.8012039600105847814672114227E0;
const B9: f64 = 3.1116436695781989440891606237E-1;
const B10: f64 = -1.52160949662516078556178806805E-1;
const B11: f64 = 2.01365400804030348374776537501E-1;
const B12: f64 = 4.47106157277725905176885569043E-2;

const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;

const ER1: f64 = 0.1312004499419488073250102996E-01;
const ER6: f64 = -0.1225156446376204440720569753E+01;
const ER7: f64 = -0.4957589496572501915214079952E+00;
const ER8: f64 = 0.1664377182454986536961530415E+01;
const ER9: f64 = -0.3503288487499736816886487290E+00;
const ER10: f64 = 0.3341791187130174790297318841E+00;
const ER11: f64 = 0.8192320648511571246570742613E-01;
const ER12: f64 = -0.2235530786388629525884427845E-01;

struct StepOutput<const N: usize> {
    y: SVector<f64, N>,
    err: f64,
}

/// One DOP853 step of size `h` from `(y, k1 = f(y))`.
fn dop853_step<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    y: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<StepOutput<N>> {
    let k2 = sys.rhs(&(y + k1 * (A21 * h)))?;
    let k3 = sys.rhs(&(y + (k1 * A31 + k2 * A32) * h))?;
    let k4 = sys.rhs(&(y + (k1 * A41 + k3 * A43) * h))?;
    let k5 = sys.rhs(&(y + (k1 * A51 + k3 * A53 + k4 * A54) * h))?;
    let k6 = sys.rhs(&(y + (k1 * A61 + k4 * A64 + k5 * A65) * h))?;
    let k7 = sys.rhs(&(y + (k1 * A71 + k4 * A74 + k5 * A75 + k6 * A76) * h))?;
    let k8 = sys.rhs(&(y + (k1 * A81 + k4 * A84 + k5 * A85 + k6 * A86 + k7 * A87) * h))?;
    let k9 = sys.rhs(
        &(y + (k1 * A91 + k4 * A94 + k5 * A95 + k6 * A96 + k7 * A97 + k8 * A98) * h),
    )?;
    let k10 = sys.rhs(
        &(y + (k1 * A101 + k4 * A104 + k5 * A105 + k6 * A106 + k7 * A107 + k8 * A108 + k9 * A109)
            * h),
    )?;
    let k11 = sys.rhs(
        &(y + (k1 * A111
            + k4 * A114
            + k5 * A115
            + k6 * A116
            + k7 * A117
            + k8 * A118
            + k9 * A119
            + k10 * A1110)
            * h),
    )?;
    let y12 = y + (k1 * A121
        + k4 * A124
        + k5 * A125
        + k6 * A126
        + k7 * A127
        + k8 * A128
        + k9 * A129
        + k10 * A1210
        + k11 * A1211)
        * h;
    let k12 = sys.rhs(&y12)?;
    let incr = k1 * B1 + k6 * B6 + k7 * B7 + k8 * B8 + k9 * B9 + k10 * B10 + k11 * B11 + k12 * B12;
    let y_new = y + incr * h;

    let mut err5 = 0.0;
    let mut err3 = 0.0;
    for i in 0..N {
        let sk = cfg.abs_tol * sys.abs_tol_weight(i) + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
        let e3 = incr[i] - BHH1 * k1[i] - BHH2 * k9[i] - BHH3 * k12[i];
        let e5 = ER1 * k1[i]
            + ER6 * k6[i]
            + ER7 * k7[i]
            + ER8 * k8[i]
            + ER9 * k9[i]
            + ER10 * k10[i]
            + ER11 * k11[i]
            + ER12 * k12[i];
        err3 += (e3 / sk).powi(2);
        err5 += (e5 / sk).powi(2);
    }
    let mut deno = err5 + 0.01 * err3;
    if deno <= 0.0 {
        deno = 1.0;
    }
    let err = h.abs() * err5 * (1.0 / (deno * N as f64)).sqrt();
    Ok(StepOutput { y: y_new, err })
}

fn initial_step<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    y0: &SVector<f64, N>,
    f0: &SVector<f64, N>,
    cfg: &IntegratorConfig,
    span: f64,
) -> Result<f64> {
    let scale = |i: usize| cfg.abs_tol * sys.abs_tol_weight(i) + cfg.rel_tol * y0[i].abs();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..N {
        d0 += (y0[i] / scale(i)).powi(2);
        d1 += (f0[i] / scale(i)).powi(2);
    }
    d0 = (d0 / N as f64).sqrt();
    d1 = (d1 / N as f64).sqrt();
    let mut h = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(cfg.max_step).min(span);
    let y1 = y0 + f0 * h;
    let f1 = sys.rhs(&y1)?;
    let mut d2 = 0.0;
    for i in 0..N {
        d2 += ((f1[i] - f0[i]) / scale(i)).powi(2);
    }
    d2 = (d2 / N as f64).sqrt() / h;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (1e-6f64).max(h * 1e-3)
    } else {
        (0.01 / dmax).powf(1.0 / 8.0)
    };
    Ok((100.0 * h).min(h1).min(cfg.max_step).min(span))
}

/// Adaptive driver. `on_step` sees every accepted step as
/// `(t_old, y_old, f_old, t_new, y_new)` and may stop the integration.
/// Returns the final `(t, y)`; the last step lands exactly on `tf`.
pub(crate) fn drive<const N: usize, S, F>(
    sys: &S,
    t0: f64,
    y0: SVector<f64, N>,
    tf: f64,
    cfg: &IntegratorConfig,
    mut on_step: F,
) -> Result<(f64, SVector<f64, N>)>
where
    S: OdeSystem<N>,
    F: FnMut(f64, &SVector<f64, N>, &SVector<f64, N>, f64, &SVector<f64, N>) -> Result<Flow>,
{
    cfg.validate()?;
    if !(tf >= t0) {
        return Err(Error::InvalidParameter(format!(
            "integration span must satisfy tf >= t0 (t0 = {t0}, tf = {tf})"
        )));
    }
    if tf == t0 {
        return Ok((t0, y0));
    }
    const SAFE: f64 = 0.9;
    const FAC_MIN: f64 = 1.0 / 3.0;
    const FAC_MAX: f64 = 6.0;
    const BETA: f64 = 0.0;
    let expo = 1.0 / 8.0 - BETA * 0.2;

    let mut t = t0;
    let mut y = y0;
    let mut f = sys.rhs(&y)?;
    let mut h = initial_step(sys, &y, &f, cfg, tf - t0)?;
    let mut fac_old = 1e-4f64;
    let mut last_rejected = false;
    let mut steps = 0usize;

    loop {
        if steps >= cfg.max_steps {
            return Err(Error::MaxSteps(cfg.max_steps));
        }
        steps += 1;
        let remaining = tf - t;
        let last = h >= remaining * (1.0 - 1e-14) || remaining <= cfg.min_step;
        let h_try = if last { remaining } else { h };
        let out = dop853_step(sys, &y, &f, h_try, cfg)?;
        let err = out.err;
        let fac11 = err.powf(expo);
        let fac = (fac11 / fac_old.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
        let mut h_new = h_try / fac;

        if err <= 1.0 {
            fac_old = err.max(1e-4);
            let t_new = if last { tf } else { t + h_try };
            let f_new = sys.rhs(&out.y)?;
            let flow = on_step(t, &y, &f, t_new, &out.y)?;
            t = t_new;
            y = out.y;
            f = f_new;
            if last || matches!(flow, Flow::Stop) {
                return Ok((t, y));
            }
            if last_rejected {
                h_new = h_new.min(h_try);
            }
            last_rejected = false;
        } else {
            h_new = h_try / (1.0 / FAC_MIN).min(fac11 / SAFE);
            last_rejected = true;
        }
        if !h_new.is_finite() {
            return Err(Error::Numerical(format!("non-finite step size at t = {t}")));
        }
        h = h_new.min(cfg.max_step);
        if h < cfg.min_step && tf - t > cfg.min_step {
            return Err(Error::StepUnderflow { t, h });
        }
    }
}

/// Propagates a state from `t_span.0` to `t_span.1`, recording every
/// accepted step.
pub fn integrate(
    s0: &StateVector,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<Trajectory> {
    let (t0, tf) = t_span;
    let mut times = vec![t0];
    let mut states = vec![*s0];
    drive(&Cr3bp(p), t0, *s0, tf, cfg, |_, _, _, t, y| {
        times.push(t);
        states.push(*y);
        Ok(Flow::Continue)
    })?;
    Ok(Trajectory { times, states })
}

/// Final state only.
pub fn propagate(
    s0: &StateVector,
    duration: f64,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<StateVector> {
    Ok(drive(&Cr3bp(p), 0.0, *s0, duration, cfg, |_, _, _, _, _| Ok(Flow::Continue))?.1)
}

/// Locates `g(y(t)) = 0` inside the accepted step `(t_a, y_a) -> t_b` by
/// Illinois regula falsi, evaluating the solution through fresh single
/// steps from the left endpoint.
fn refine_crossing<const N: usize, S, G>(
    sys: &S,
    t_a: f64,
    y_a: &SVector<f64, N>,
    f_a: &SVector<f64, N>,
    t_b: f64,
    y_b: &SVector<f64, N>,
    g: &G,
    cfg: &IntegratorConfig,
) -> Result<(f64, SVector<f64, N>)>
where
    S: OdeSystem<N>,
    G: Fn(&SVector<f64, N>) -> f64,
{
    let h = t_b - t_a;
    let mut lo = 0.0;
    let mut hi = h;
    let mut g_lo = g(y_a);
    let mut g_hi = g(y_b);
    let mut best = (t_b, *y_b, g_hi.abs());
    let mut side = 0i8;
    for _ in 0..100 {
        let mut tau = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
        if !(tau > lo && tau < hi) {
            tau = 0.5 * (lo + hi);
        }
        let y_tau = dop853_step(sys, y_a, f_a, tau, cfg)?.y;
        let g_tau = g(&y_tau);
        if g_tau.abs() < best.2 {
            best = (t_a + tau, y_tau, g_tau.abs());
        }
        if g_tau == 0.0 || g_tau.abs() < EVENT_TOL * 1e-2 {
            return Ok((t_a + tau, y_tau));
        }
        if g_tau.signum() == g_lo.signum() {
            lo = tau;
            g_lo = g_tau;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = tau;
            g_hi = g_tau;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
        if hi - lo < 1e-15 * (1.0 + t_a.abs()) {
            break;
        }
    }
    Ok((best.0, best.1))
}

/// Scans an integration for zeros of `g` in the requested direction.
/// `on_event` is called with each refined crossing and may stop the scan;
/// returns the final time and state reached.
pub(crate) fn scan_events<const N: usize, S, G, E>(
    sys: &S,
    t0: f64,
    y0: SVector<f64, N>,
    tf: f64,
    g: G,
    direction: Direction,
    cfg: &IntegratorConfig,
    mut on_event: E,
) -> Result<(f64, SVector<f64, N>)>
where
    S: OdeSystem<N>,
    G: Fn(&SVector<f64, N>) -> f64,
    E: FnMut(f64, &SVector<f64, N>) -> Result<Flow>,
{
    drive(sys, t0, y0, tf, cfg, |t_a, y_a, f_a, t_b, y_b| {
        let ga = g(y_a);
        let gb = g(y_b);
        let crossed = (ga < 0.0 && gb >= 0.0) || (ga > 0.0 && gb <= 0.0);
        if crossed && direction.admits(ga, gb) {
            let (tc, yc) = if gb == 0.0 {
                (t_b, *y_b)
            } else {
                refine_crossing(sys, t_a, y_a, f_a, t_b, y_b, &g, cfg)?
            };
            return on_event(tc, &yc);
        }
        Ok(Flow::Continue)
    })
}

/// Every crossing of `event(state) = 0` in the requested direction over
/// `t_span`. A start exactly on the surface is not reported.
pub fn integrate_to_events<G>(
    s0: &StateVector,
    t_span: (f64, f64),
    event: G,
    direction: Direction,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<Vec<(f64, StateVector)>>
where
    G: Fn(&StateVector) -> f64,
{
    let mut hits = Vec::new();
    scan_events(
        &Cr3bp(p),
        t_span.0,
        *s0,
        t_span.1,
        event,
        direction,
        cfg,
        |t, y| {
            hits.push((t, *y));
            Ok(Flow::Continue)
        },
    )?;
    Ok(hits)
}

pub(crate) fn pack_with_identity(s: &StateVector) -> SVector<f64, 42> {
    let mut y = SVector::<f64, 42>::zeros();
    y.fixed_rows_mut::<6>(0).copy_from(s);
    for i in 0..6 {
        y[6 + i * 6 + i] = 1.0;
    }
    y
}

pub(crate) fn unpack_stm(y: &SVector<f64, 42>) -> StmResult {
    StmResult {
        final_state: y.fixed_rows::<6>(0).into_owned(),
        stm: Matrix6::from_column_slice(&y.as_slice()[6..]),
    }
}

/// Jointly integrates the state and Φ' = f_x Φ, Φ(0) = I, over `duration`.
pub fn propagate_with_stm(
    s0: &StateVector,
    duration: f64,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<StmResult> {
    if !(duration >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "propagation time must be non-negative, got {duration}"
        )));
    }
    let y0 = pack_with_identity(s0);
    let (_, y) = drive(&Cr3bpWithStm(p), 0.0, y0, duration, cfg, |_, _, _, _, _| {
        Ok(Flow::Continue)
    })?;
    Ok(unpack_stm(&y))
}

/// First crossing of `event(state) = 0` in `direction` within `max_time`,
/// carrying the STM from the start to the crossing. `admissible` filters
/// located crossings (e.g. a region predicate); rejected ones are skipped.
pub fn first_crossing_with_stm<G, A>(
    s0: &StateVector,
    event: G,
    direction: Direction,
    admissible: A,
    max_time: f64,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<(f64, StmResult)>
where
    G: Fn(&StateVector) -> f64,
    A: Fn(&StateVector) -> bool,
{
    let mut found = None;
    scan_events(
        &Cr3bpWithStm(p),
        0.0,
        pack_with_identity(s0),
        max_time,
        |y: &SVector<f64, 42>| event(&y.fixed_rows::<6>(0).into_owned()),
        direction,
        cfg,
        |t, y| {
            if admissible(&y.fixed_rows::<6>(0).into_owned()) {
                found = Some((t, unpack_stm(y)));
                Ok(Flow::Stop)
            } else {
                Ok(Flow::Continue)
            }
        },
    )?;
    found.ok_or(Error::NoCrossing(max_time))
}

/// State-only counterpart of [`first_crossing_with_stm`].
pub fn first_crossing<G, A>(
    s0: &StateVector,
    event: G,
    direction: Direction,
    admissible: A,
    max_time: f64,
    cfg: &IntegratorConfig,
    p: &SystemParams,
) -> Result<(f64, StateVector)>
where
    G: Fn(&StateVector) -> f64,
    A: Fn(&StateVector) -> bool,
{
    let mut found = None;
    scan_events(&Cr3bp(p), 0.0, *s0, max_time, event, direction, cfg, |t, y| {
        if admissible(y) {
            found = Some((t, *y));
            Ok(Flow::Stop)
        } else {
            Ok(Flow::Continue)
        }
    })?;
    found.ok_or(Error::NoCrossing(max_time))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SVector;

    struct Harmonic;
    impl OdeSystem<2> for Harmonic {
        fn rhs(&self, y: &SVector<f64, 2>) -> Result<SVector<f64, 2>> {
            Ok(SVector::<f64, 2>::new(y[1], -y[0]))
        }
    }

    struct Decay;
    impl OdeSystem<1> for Decay {
        fn rhs(&self, y: &SVector<f64, 1>) -> Result<SVector<f64, 1>> {
            Ok(-y)
        }
    }

    #[test]
    fn harmonic_oscillator_is_accurate() {
        let cfg = IntegratorConfig::default();
        let y0 = SVector::<f64, 2>::new(1.0, 0.0);
        let tf = 10.0;
        let (t, y) = drive(&Harmonic, 0.0, y0, tf, &cfg, |_, _, _, _, _| Ok(Flow::Continue)).unwrap();
        assert_eq!(t, tf);
        assert!((y[0] - tf.cos()).abs() < 1e-11);
        assert!((y[1] + tf.sin()).abs() < 1e-11);
    }

    #[test]
    fn global_error_shrinks_at_eighth_order() {
        // Fixed steps: halving h should divide the error by about 2^8.
        let y0 = SVector::<f64, 1>::new(1.0);
        let cfg = IntegratorConfig::default();
        let err_for = |n: usize| {
            let h = 2.0 / n as f64;
            let mut y = y0;
            for _ in 0..n {
                let f = Decay.rhs(&y).unwrap();
                y = dop853_step(&Decay, &y, &f, h, &cfg).unwrap().y;
            }
            (y[0] - (-2.0f64).exp()).abs()
        };
        let e1 = err_for(4);
        let e2 = err_for(8);
        let order = (e1 / e2).log2();
        assert!(order > 7.5 && order < 9.5, "observed order {order}");
    }

    #[test]
    fn empty_span_returns_single_sample() {
        let p = SystemParams::earth_moon();
        let s = StateVector::new(0.8, 0.0, 0.0, 0.0, 0.1, 0.0);
        let tr = integrate(&s, (1.5, 1.5), &IntegratorConfig::default(), &p).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.states[0], s);
    }

    #[test]
    fn backwards_span_is_rejected() {
        let p = SystemParams::earth_moon();
        let s = StateVector::new(0.8, 0.0, 0.0, 0.0, 0.1, 0.0);
        assert!(integrate(&s, (1.0, 0.0), &IntegratorConfig::default(), &p).is_err());
    }

    #[test]
    fn events_on_harmonic_oscillator() {
        let cfg = IntegratorConfig::default();
        let y0 = SVector::<f64, 2>::new(1.0, 0.0);
        let mut hits = Vec::new();
        scan_events(
            &Harmonic,
            0.0,
            y0,
            10.0,
            |y: &SVector<f64, 2>| y[0],
            Direction::Either,
            &cfg,
            |t, y| {
                hits.push((t, *y));
                Ok(Flow::Continue)
            },
        )
        .unwrap();
        let pi = std::f64::consts::PI;
        let expected = [pi / 2.0, 3.0 * pi / 2.0, 5.0 * pi / 2.0];
        assert_eq!(hits.len(), expected.len());
        for ((t, y), e) in hits.iter().zip(expected) {
            assert!((t - e).abs() < 1e-12, "{t} vs {e}");
            assert!(y[0].abs() < EVENT_TOL);
        }
    }

    #[test]
    fn constant_sign_event_gives_nothing() {
        let p = SystemParams::earth_moon();
        let s = StateVector::new(0.8, 0.0, 0.0, 0.0, 0.1, 0.0);
        let hits = integrate_to_events(
            &s,
            (0.0, 1.0),
            |_| 1.0,
            Direction::Either,
            &IntegratorConfig::default(),
            &p,
        )
        .unwrap();
        assert!(hits.is_empty());
    }

    #[test]
    fn zero_duration_stm_is_identity() {
        let p = SystemParams::earth_moon();
        let s = StateVector::new(0.8, 0.0, 0.0, 0.0, 0.1, 0.0);
        let r = propagate_with_stm(&s, 0.0, &IntegratorConfig::default(), &p).unwrap();
        assert_eq!(r.stm, Matrix6::identity());
        assert_eq!(r.final_state, s);
    }

    #[test]
    fn reproducible_bitwise() {
        let p = SystemParams::earth_moon();
        let s = StateVector::new(0.82, 0.0, 0.01, 0.0, 0.15, 0.0);
        let cfg = IntegratorConfig::default();
        let a = propagate_with_stm(&s, 2.0, &cfg, &p).unwrap();
        let b = propagate_with_stm(&s, 2.0, &cfg, &p).unwrap();
        assert_eq!(a, b);
    }
}
