//! Funnel feedback: the continuous funnel controller, its adaptive funnel,
//! the sampled zero-order-hold variant with its constants, and the safety filter.

use std::cell::Cell;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::funnel::{fc_errors, grid_stats, strictly_inside, AuxiliaryDesign, FunnelFn, GainSpec};
use crate::linalg::{dist, norm};
use crate::model::{integrate_closed_loop, ControlAffineModel, DynBounds, Input, Monitor};
use crate::ocp::gain_sum;
use crate::reference::Reference;
use crate::trace::{SimulationTrace, FLAG_VIOLATED};

/// φ(t) = 1/(ψ₁(t) − ‖y_M − y_ref‖).
pub fn adaptive_phi(t: f64, y_model: &[f64], y_ref: &[f64], psi1: &dyn FunnelFn) -> Result<f64> {
    let p = psi1.value(t);
    let d = dist(y_model, y_ref);
    if !(d < p) {
        return Err(Error::PredictionOutsideFunnel { t });
    }
    Ok(1.0 / (p - d))
}

/// u = 𝔞(‖e_r‖)·N(γ(‖e_r‖²))·e_r with e the funnel controller errors of χ(y) − χ(y_ref).
pub fn funnel_control(chi_y: &[f64], chi_ref: &[f64], phi: f64, m: usize, gains: &GainSpec) -> Result<Vec<f64>> {
    let z: Vec<f64> = chi_y.iter().zip(chi_ref).map(|(a, b)| a - b).collect();
    let errs = fc_errors(phi, &z, m, gains)?;
    let r = z.len() / m;
    fc_output(errs.last(), r, gains)
}

/// The funnel controller output for a given last error component.
pub fn fc_output(e_r: &[f64], r: usize, gains: &GainSpec) -> Result<Vec<f64>> {
    let s = norm(e_r);
    let a = gains.activation.eval(s);
    if a == 0.0 {
        return Ok(vec![0.0; e_r.len()]);
    }
    let g = match gains.gamma.eval(s * s) {
        Some(g) if s < 1.0 => g,
        _ => return Err(Error::DomainViolation { index: r }),
    };
    let k = a * gains.n.eval(g);
    Ok(e_r.iter().map(|v| k * v).collect())
}

/// Constants ε_i, μ_i, η̄_i bounding the funnel controller errors, index 0 seeded with zeros.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FcBoundTable {
    pub eps: Vec<f64>,
    pub mu: Vec<f64>,
    pub eta_bar: Vec<f64>,
}

/// Solves γ(s²)s = c for s ∈ [0, 1).
fn invert_gamma_s(gains: &GainSpec, c: f64) -> f64 {
    let f = |s: f64| gains.gamma.eval(s * s).map(|g| g * s).unwrap_or(f64::INFINITY);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Builds the table for i = 1..r−1 from `bound` (a bound on ‖φ̇/φ‖) and the
/// initial error norms ‖e_i(t0)‖ (at least r − 1 of them, others ignored).
pub fn fc_bound_table(bound: f64, init_errors: &[f64], r: usize, gains: &GainSpec) -> FcBoundTable {
    let mut t = FcBoundTable { eps: vec![0.0], mu: vec![0.0], eta_bar: vec![0.0] };
    let gs = |s: f64| gains.gamma.eval(s * s).unwrap_or(f64::INFINITY);
    for i in 1..r {
        let (ep, hp) = (t.eps[i - 1], t.eta_bar[i - 1]);
        let lhs = bound * (1.0 + gs(ep) * ep) + 1.0 + hp;
        let eps_hat = invert_gamma_s(gains, lhs);
        let eps = init_errors.get(i - 1).copied().unwrap_or(0.0).max(eps_hat);
        let mu = bound * (1.0 + gs(ep) * ep) + 1.0 + gs(eps) * eps + hp;
        let dg = gains.gamma.deriv(eps * eps).unwrap_or(f64::INFINITY);
        let eta = 2.0 * dg * eps * eps * mu + gs(eps) * mu;
        t.eps.push(eps);
        t.mu.push(mu);
        t.eta_bar.push(eta);
    }
    t
}

/// sup φ, inf φ and sup ‖φ̇/φ‖ of a funnel controller scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiBounds {
    pub sup: f64,
    pub inf: f64,
    pub ratio: f64,
}

impl PhiBounds {
    /// Bounds of φ = 1/ψ over `horizon`.
    pub fn from_psi(psi: &dyn FunnelFn, horizon: (f64, f64)) -> Self {
        let st = grid_stats(psi, horizon);
        let n = crate::funnel::GRID_POINTS;
        let ratio = (0..=n)
            .map(|k| {
                let t = horizon.0 + (horizon.1 - horizon.0) * k as f64 / n as f64;
                (psi.deriv(t) / psi.value(t)).abs()
            })
            .fold(0.0, f64::max);
        PhiBounds { sup: 1.0 / st.inf, inf: 1.0 / st.sup, ratio }
    }
}

/// Gain, threshold and sampling step of the zero-order-hold funnel controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZohConfig {
    pub iota: f64,
    pub nu: f64,
    pub sample_step: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    /// ν/ι, the largest possible input norm.
    pub u_cap: f64,
    /// 2κ₀/(g_min·inf φ); ν must exceed it.
    pub nu_min: f64,
    pub table: FcBoundTable,
}

impl ZohConfig {
    /// Replaces ν and 𝔯 by user values, keeping the certified constants for reference.
    pub fn with_override(mut self, nu: f64, sample_step: f64) -> Self {
        self.nu = nu;
        self.sample_step = sample_step;
        self.u_cap = nu / self.iota;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ZohInputs {
    pub bounds: DynBounds,
    pub phi: PhiBounds,
    pub yref_r_sup: f64,
    /// ‖e_i(t0)‖ for i = 1..r.
    pub init_errors: Vec<f64>,
    pub gains: GainSpec,
    pub r: usize,
    pub iota: f64,
    /// Factor applied to the minimal gain.
    pub safety: f64,
    /// 𝔯 used when κ₀ = 0.
    pub step_cap: f64,
    /// ‖φ‖∞·g_max·u_max_data enters the step bound when a safety filter is used.
    pub data_bound: Option<f64>,
}

impl ZohInputs {
    pub fn new(bounds: DynBounds, phi: PhiBounds, yref_r_sup: f64, init_errors: Vec<f64>, r: usize, iota: f64) -> Self {
        ZohInputs {
            bounds,
            phi,
            yref_r_sup,
            init_errors,
            gains: GainSpec::default(),
            r,
            iota,
            safety: 1.001,
            step_cap: 0.1,
            data_bound: None,
        }
    }
}

pub fn zoh_constants(inp: &ZohInputs) -> Result<ZohConfig> {
    if !(inp.iota > 0.0 && inp.iota < 1.0) {
        return Err(Error::Config(format!("iota = {} not in (0, 1)", inp.iota)));
    }
    let g_min = inp.bounds.g_min.ok_or(Error::NotPositiveDefinite)?;
    let r = inp.r;
    let table = fc_bound_table(inp.phi.ratio, &inp.init_errors, r, &inp.gains);
    let (ep, hp) = (table.eps[r - 1], table.eta_bar[r - 1]);
    let gep = inp.gains.gamma.eval(ep * ep).unwrap_or(f64::INFINITY);
    let kappa0 = inp.phi.ratio * (1.0 + gep * ep) + inp.phi.sup * (inp.bounds.f_max + inp.yref_r_sup) + hp;
    let nu_min = 2.0 * kappa0 / (g_min * inp.phi.inf);
    let nu = if nu_min > 0.0 { inp.safety * nu_min } else { f64::MIN_POSITIVE.max(1e-12) };
    let kappa1 = kappa0 + inp.phi.sup * (nu / inp.iota) * inp.bounds.g_max;
    let sample_step = if kappa0 > 0.0 {
        let second = match inp.data_bound {
            Some(ud) => (1.0 - inp.iota) / (kappa0 + inp.phi.sup * inp.bounds.g_max * ud),
            None => (1.0 - inp.iota) / kappa0,
        };
        (kappa0 / (kappa1 * kappa1)).min(second)
    } else {
        inp.step_cap
    };
    Ok(ZohConfig { iota: inp.iota, nu, sample_step, kappa0, kappa1, u_cap: nu / inp.iota, nu_min, table })
}

/// 0 below the threshold ι, otherwise −ν·e_r/‖e_r‖².
pub fn zoh_control(e_r: &[f64], cfg: &ZohConfig) -> Vec<f64> {
    let n = norm(e_r);
    if n < cfg.iota {
        return vec![0.0; e_r.len()];
    }
    e_r.iter().map(|v| -cfg.nu * v / (n * n)).collect()
}

/// Passes `u_data` through below the threshold, otherwise the ZoH control.
pub fn safety_filter(e_r: &[f64], u_data: &[f64], cfg: &ZohConfig, u_max_data: f64) -> Result<Vec<f64>> {
    let nd = norm(u_data);
    if nd > u_max_data {
        return Err(Error::DataInputTooLarge { norm: nd, bound: u_max_data });
    }
    if norm(e_r) < cfg.iota {
        Ok(u_data.to_vec())
    } else {
        Ok(zoh_control(e_r, cfg))
    }
}

/// 0 if ‖ξ_r/ψ_r‖ < ½, else −ν·ψ_r·ξ_r/‖ξ_r‖².
pub fn zoh_feasibility_feedback(
    t: f64,
    x: &[f64],
    design: &AuxiliaryDesign,
    reference: &dyn Reference,
    nu: f64,
    out: &mut [f64],
) {
    let (r, m) = (design.r, design.m);
    let refs = reference.stack(t, r - 1);
    let e: Vec<f64> = (0..r * m).map(|k| x[k] - refs[k]).collect();
    let mut xi = vec![0.0; m];
    design.xi_into(r - 1, &e, &mut xi);
    let psi = design.psi[r - 1].value(t);
    let n = norm(&xi);
    if n / psi < 0.5 {
        out.fill(0.0);
    } else {
        for (o, v) in out.iter_mut().zip(&xi) {
            *o = -nu * psi * v / (n * n);
        }
    }
}

/// Constants of sampled-data funnel MPC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampledConstants {
    pub kappa0: f64,
    pub nu: f64,
    pub kappa1: f64,
    pub step: f64,
    pub u_max: f64,
}

/// κ₀ = ‖1/ψ_r‖∞(f_max + ‖y_ref^{(r)}‖∞ + Σk_jμ_j^{r−j} + ‖ψ̇_r‖∞), ν > 2κ₀·inf ψ_r/g_min,
/// κ₁ = κ₀ + 2‖1/ψ_r‖∞g_max·ν, 𝔯 = min(κ₀/κ₁², 1/(2κ₀)), u_max = 2ν.
pub fn sampled_constants(bounds: &DynBounds, design: &AuxiliaryDesign, yref_r_sup: f64, horizon: (f64, f64)) -> Result<SampledConstants> {
    let g_min = bounds.g_min.ok_or(Error::NotPositiveDefinite)?;
    let st = grid_stats(design.psi[design.r - 1].as_ref(), horizon);
    let inv = 1.0 / st.inf;
    let kappa0 = inv * (bounds.f_max + yref_r_sup + gain_sum(design) + design.sup_psi_dot_last());
    let nu = 1.001 * 2.0 * kappa0 * st.inf / g_min;
    let kappa1 = kappa0 + 2.0 * inv * bounds.g_max * nu;
    let step = (kappa0 / (kappa1 * kappa1)).min(0.5 / kappa0);
    Ok(SampledConstants { kappa0, nu, kappa1, step, u_max: 2.0 * nu })
}

/// Moves the recorded input into the funnel controller column and records φ = 1/ψ.
fn as_fc_trace(mut tr: SimulationTrace) -> SimulationTrace {
    for row in &mut tr.rows {
        row.u_fc = std::mem::replace(&mut row.u_fmpc, vec![0.0; row.u_fc.len()]);
        row.phi = 1.0 / row.psi;
    }
    tr
}

/// Applies the continuous funnel controller with φ = 1/ψ to the system.
pub fn run_funnel_controller(
    system: &ControlAffineModel,
    reference: &dyn Reference,
    psi: &dyn FunnelFn,
    gains: &GainSpec,
    x0: &[f64],
    window: (f64, f64),
    h: f64,
) -> Result<SimulationTrace> {
    let (r, m) = (system.r, system.m);
    let failed = Cell::new(false);
    let mut refs = vec![0.0; r * m];
    let mut law = |t: f64, x: &[f64], u: &mut [f64]| {
        reference.eval(t, r - 1, &mut refs);
        match funnel_control(&x[..r * m], &refs, 1.0 / psi.value(t), m, gains) {
            Ok(v) => u.copy_from_slice(&v),
            Err(_) => {
                failed.set(true);
                u.fill(0.0);
            }
        }
    };
    let mon = Monitor { reference, psi, truncate: true };
    let mut tr = as_fc_trace(integrate_closed_loop(system, x0, window, h, Input::Feedback(&mut law), Some(&mon))?);
    if failed.get() {
        if let Some(row) = tr.rows.last_mut() {
            row.flags |= FLAG_VIOLATED;
        }
    }
    Ok(tr)
}

/// Data-driven input policy under the safety filter.
pub enum DataPolicy<'a> {
    /// u_data = 0, the plain sampled funnel controller.
    Zero,
    /// u_data = last applied input, clipped to the data bound.
    HoldLast,
    Custom(Box<dyn FnMut(f64, &[f64], &mut [f64]) + 'a>),
}

/// Applies the sampled funnel controller (optionally as a safety filter) with φ = 1/ψ.
#[allow(clippy::too_many_arguments)]
pub fn run_zoh(
    system: &ControlAffineModel,
    reference: &dyn Reference,
    psi: &dyn FunnelFn,
    cfg: &ZohConfig,
    gains: &GainSpec,
    policy: DataPolicy,
    u_max_data: f64,
    x0: &[f64],
    window: (f64, f64),
    h: f64,
) -> Result<SimulationTrace> {
    let (r, m) = (system.r, system.m);
    let failed = Cell::new(false);
    let mut refs = vec![0.0; r * m];
    let mut last = vec![0.0; m];
    let mut data = vec![0.0; m];
    let mut policy = policy;
    let mut law = |t: f64, x: &[f64], u: &mut [f64]| {
        reference.eval(t, r - 1, &mut refs);
        let z: Vec<f64> = (0..r * m).map(|k| x[k] - refs[k]).collect();
        let errs = match fc_errors(1.0 / psi.value(t), &z, m, gains) {
            Ok(e) => e,
            Err(_) => {
                failed.set(true);
                u.fill(0.0);
                return;
            }
        };
        match &mut policy {
            DataPolicy::Zero => data.fill(0.0),
            DataPolicy::HoldLast => {
                data.copy_from_slice(&last);
                crate::linalg::project_ball(&mut data, u_max_data);
            }
            DataPolicy::Custom(f) => {
                f(t, x, &mut data);
                crate::linalg::project_ball(&mut data, u_max_data);
            }
        }
        let v = safety_filter(errs.last(), &data, cfg, u_max_data).unwrap_or_else(|_| zoh_control(errs.last(), cfg));
        u.copy_from_slice(&v);
        last.copy_from_slice(&v);
    };
    let mon = Monitor { reference, psi, truncate: true };
    let input = Input::Sampled { period: cfg.sample_step, law: &mut law };
    let mut tr = as_fc_trace(integrate_closed_loop(system, x0, window, h, input, Some(&mon))?);
    if failed.get() {
        if let Some(row) = tr.rows.last_mut() {
            row.flags |= FLAG_VIOLATED;
        }
    }
    Ok(tr)
}

/// Largest ‖e_i‖ over all nodes of a trace (∞ once the recursion breaks down).
pub fn max_fc_errors(trace: &SimulationTrace, reference: &dyn Reference, psi: &dyn FunnelFn, gains: &GainSpec) -> Vec<f64> {
    let (r, m) = (trace.r, trace.m);
    let mut out = vec![0.0f64; r];
    for row in &trace.rows {
        let refs = reference.stack(row.t, r - 1);
        let z: Vec<f64> = (0..r * m).map(|k| row.x[k] - refs[k]).collect();
        match fc_errors(1.0 / psi.value(row.t), &z, m, gains) {
            Ok(e) => {
                for (o, n) in out.iter_mut().zip(e.norms()) {
                    *o = o.max(n);
                }
            }
            Err(_) => return vec![f64::INFINITY; r],
        }
    }
    out
}

/// True when every entry lies strictly below one.
pub fn all_below_one(norms: &[f64]) -> bool {
    norms.iter().all(|&n| strictly_inside(n, 1.0))
}
