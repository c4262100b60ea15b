//! Funnel functions, auxiliary error variables, auxiliary funnel designs and
//! funnel stage costs.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;

/// Saturation value carried by an infinite [`ExtendedCost`].
pub const COST_CAP: f64 = 1e12;
/// Relative margin used by every "strictly inside" test.
pub const STRICT_MARGIN: f64 = 1e-9;
/// Number of grid points used to estimate inf/sup of a funnel.
pub const GRID_POINTS: usize = 10_000;

/// `norm < radius` with a relative safety margin.
pub fn strictly_inside(norm: f64, radius: f64) -> bool {
    radius > 0.0 && norm <= radius - STRICT_MARGIN * radius
}

/// A funnel radius ψ with its derivative.
pub trait FunnelFn: Send + Sync + Debug {
    fn value(&self, t: f64) -> f64;
    fn deriv(&self, t: f64) -> f64;
}

/// ψ(t) = scale·exp(−rate·(t − t0)) + offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFunnel {
    pub scale: f64,
    pub rate: f64,
    pub offset: f64,
    pub t0: f64,
}

impl ExpFunnel {
    pub fn new(scale: f64, rate: f64, offset: f64) -> Self {
        ExpFunnel { scale, rate, offset, t0: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        ExpFunnel { scale: 0.0, rate: 0.0, offset: c, t0: 0.0 }
    }
}

impl FunnelFn for ExpFunnel {
    fn value(&self, t: f64) -> f64 {
        self.scale * (-self.rate * (t - self.t0)).exp() + self.offset
    }

    fn deriv(&self, t: f64) -> f64 {
        -self.rate * self.scale * (-self.rate * (t - self.t0)).exp()
    }
}

/// Sampled extrema of a funnel on a horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridStats {
    pub inf: f64,
    pub sup: f64,
    pub inf_dot: f64,
    pub sup_abs_dot: f64,
}

pub fn grid_stats(psi: &dyn FunnelFn, horizon: (f64, f64)) -> GridStats {
    let (a, b) = horizon;
    let n = GRID_POINTS;
    let mut s = GridStats {
        inf: f64::INFINITY,
        sup: f64::NEG_INFINITY,
        inf_dot: f64::INFINITY,
        sup_abs_dot: 0.0,
    };
    for i in 0..n {
        let t = a + (b - a) * i as f64 / (n - 1) as f64;
        let v = psi.value(t);
        let d = psi.deriv(t);
        s.inf = s.inf.min(v);
        s.sup = s.sup.max(v);
        s.inf_dot = s.inf_dot.min(d);
        s.sup_abs_dot = s.sup_abs_dot.max(d.abs());
    }
    s
}

/// Constants (α, β) with ψ(t0) ≥ β/α and ψ̇ ≥ −αψ + β on the horizon.
pub fn derive_alpha_beta(psi: &dyn FunnelFn, horizon: (f64, f64)) -> Result<(f64, f64)> {
    let s = grid_stats(psi, horizon);
    if !(s.inf > 0.0) {
        return Err(Error::NonPositiveFunnel { inf: s.inf });
    }
    if s.inf_dot >= 0.0 {
        Ok((1.0, s.inf))
    } else {
        let beta = -s.inf_dot;
        Ok((beta / (0.5 * s.inf), beta))
    }
}

/// Checks the growth condition for given (α, β) on the sampling grid.
pub fn check_alpha_beta(psi: &dyn FunnelFn, horizon: (f64, f64), alpha: f64, beta: f64) -> Result<()> {
    let (a, b) = horizon;
    let tol = 1e-12;
    if psi.value(a) < beta / alpha - tol {
        return Err(Error::InadmissibleConstants { alpha, beta, t: a });
    }
    for i in 0..GRID_POINTS {
        let t = a + (b - a) * i as f64 / (GRID_POINTS - 1) as f64;
        let lhs = psi.deriv(t);
        let rhs = -alpha * psi.value(t) + beta;
        if lhs < rhs - tol * (1.0 + rhs.abs()) {
            return Err(Error::InadmissibleConstants { alpha, beta, t });
        }
    }
    Ok(())
}

/// Funnel radius together with its bounds and growth constants.
#[derive(Debug, Clone)]
pub struct FunnelSpec {
    pub psi: Arc<dyn FunnelFn>,
    pub horizon: (f64, f64),
    pub inf_psi: f64,
    pub sup_psi: f64,
    pub sup_abs_dot: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl FunnelSpec {
    pub fn new(psi: Arc<dyn FunnelFn>, horizon: (f64, f64)) -> Result<Self> {
        let (alpha, beta) = derive_alpha_beta(psi.as_ref(), horizon)?;
        Ok(Self::assemble(psi, horizon, alpha, beta))
    }

    /// Uses user supplied constants after checking them on the grid.
    pub fn with_constants(psi: Arc<dyn FunnelFn>, horizon: (f64, f64), alpha: f64, beta: f64) -> Result<Self> {
        let s = grid_stats(psi.as_ref(), horizon);
        if !(s.inf > 0.0) {
            return Err(Error::NonPositiveFunnel { inf: s.inf });
        }
        check_alpha_beta(psi.as_ref(), horizon, alpha, beta)?;
        Ok(Self::assemble(psi, horizon, alpha, beta))
    }

    fn assemble(psi: Arc<dyn FunnelFn>, horizon: (f64, f64), alpha: f64, beta: f64) -> Self {
        let s = grid_stats(psi.as_ref(), horizon);
        FunnelSpec {
            psi,
            horizon,
            inf_psi: s.inf,
            sup_psi: s.sup,
            sup_abs_dot: s.sup_abs_dot,
            alpha,
            beta,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.psi.value(t)
    }
}

/// Lower triangular r×r coefficients with ξ_i = Σ_j c_ij z_j.
pub fn xi_coefficients(gains: &[f64], r: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; r]; r];
    rows[0][0] = 1.0;
    for i in 1..r {
        for j in 0..r {
            let shifted = if j > 0 { rows[i - 1][j - 1] } else { 0.0 };
            rows[i][j] = shifted + gains[i - 1] * rows[i - 1][j];
        }
    }
    rows
}

fn xi_level(level: usize, z: &[f64], gains: &[f64], m: usize) -> Vec<f64> {
    if level == 1 {
        return z[..m].to_vec();
    }
    let mut shifted = vec![0.0; z.len()];
    shifted[..z.len() - m].copy_from_slice(&z[m..]);
    let mut out = xi_level(level - 1, &shifted, gains, m);
    let own = xi_level(level - 1, z, gains, m);
    for (o, w) in out.iter_mut().zip(own) {
        *o += gains[level - 2] * w;
    }
    out
}

/// Auxiliary error variables ξ_1..ξ_r of the stack z = (z_1..z_r), returned stacked.
pub fn xi(z: &[f64], gains: &[f64], m: usize) -> Result<Vec<f64>> {
    let r = gains.len() + 1;
    if z.len() != r * m {
        return Err(Error::DimensionMismatch { expected: r * m, got: z.len() });
    }
    let mut out = Vec::with_capacity(r * m);
    for i in 1..=r {
        out.extend(xi_level(i, z, gains, m));
    }
    Ok(out)
}

/// The matrix mapping z to the stacked ξ(z).
pub fn xi_matrix(gains: &[f64], r: usize, m: usize) -> DMatrix<f64> {
    let c = xi_coefficients(gains, r);
    let mut s = DMatrix::zeros(r * m, r * m);
    for i in 0..r {
        for j in 0..=i {
            for l in 0..m {
                s[(i * m + l, j * m + l)] = c[i][j];
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignMode {
    Varying,
    Simplified,
    /// Gains and margin supplied by the user; funnels follow the varying closed form.
    Custom,
}

/// Auxiliary funnels ψ_1..ψ_r together with the gains k_1..k_{r−1}.
#[derive(Debug, Clone)]
pub struct AuxiliaryDesign {
    pub r: usize,
    pub m: usize,
    pub gains: Vec<f64>,
    pub psi: Vec<Arc<dyn FunnelFn>>,
    pub mode: DesignMode,
    pub gamma_margin: f64,
    pub alpha: f64,
    pub beta: f64,
    coeffs: Vec<Vec<f64>>,
    sup_psi: Vec<f64>,
    sup_psi_dot_last: f64,
}

impl AuxiliaryDesign {
    /// Assembles a design from explicit parts; sup values are sampled on `horizon`.
    pub fn from_parts(
        spec: &FunnelSpec,
        m: usize,
        gains: Vec<f64>,
        psi: Vec<Arc<dyn FunnelFn>>,
        mode: DesignMode,
        gamma_margin: f64,
    ) -> Self {
        let r = gains.len() + 1;
        assert_eq!(psi.len(), r, "one funnel per auxiliary error");
        let coeffs = xi_coefficients(&gains, r);
        let sup_psi = psi.iter().map(|p| grid_stats(p.as_ref(), spec.horizon).sup).collect();
        let sup_psi_dot_last = grid_stats(psi[r - 1].as_ref(), spec.horizon).sup_abs_dot;
        AuxiliaryDesign {
            r,
            m,
            gains,
            psi,
            mode,
            gamma_margin,
            alpha: spec.alpha,
            beta: spec.beta,
            coeffs,
            sup_psi,
            sup_psi_dot_last,
        }
    }

    /// Order-one design: the single funnel is ψ itself.
    pub fn first_order(spec: &FunnelSpec, m: usize) -> Self {
        Self::from_parts(spec, m, vec![], vec![spec.psi.clone()], DesignMode::Simplified, 0.5)
    }

    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    /// ‖ψ_i‖∞ on the design horizon (zero based).
    pub fn sup_psi(&self, i: usize) -> f64 {
        self.sup_psi[i]
    }

    /// ‖ψ̇_r‖∞ on the design horizon.
    pub fn sup_psi_dot_last(&self) -> f64 {
        self.sup_psi_dot_last
    }

    /// ξ_i for zero based `i`, written into `out` (length m).
    pub fn xi_into(&self, i: usize, e: &[f64], out: &mut [f64]) {
        let m = self.m;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &c) in self.coeffs[i].iter().enumerate().take(i + 1) {
            if c != 0.0 {
                for l in 0..m {
                    out[l] += c * e[j * m + l];
                }
            }
        }
    }

    /// ‖ξ_r(e)‖.
    pub fn xi_last_norm(&self, e: &[f64]) -> f64 {
        let m = self.m;
        let row = &self.coeffs[self.r - 1];
        let mut s = 0.0;
        for l in 0..m {
            let mut v = 0.0;
            for (j, &c) in row.iter().enumerate() {
                v += c * e[j * m + l];
            }
            s += v * v;
        }
        s.sqrt()
    }
}

fn first_block_norm(e: &[f64], m: usize) -> f64 {
    norm(&e[..m])
}

/// Builds ψ_2..ψ_r from the closed form with explicitly chosen γ and gains.
pub fn varying_funnels(spec: &FunnelSpec, init_error: &[f64], m: usize, gains: &[f64], gamma: f64) -> Vec<Arc<dyn FunnelFn>> {
    let r = gains.len() + 1;
    let t0 = spec.horizon.0;
    let (alpha, beta) = (spec.alpha, spec.beta);
    let mut out: Vec<Arc<dyn FunnelFn>> = vec![spec.psi.clone()];
    let xi0 = xi(init_error, gains, m).expect("dimension checked by caller");
    let mut shifted = vec![0.0; init_error.len()];
    shifted[..init_error.len() - m].copy_from_slice(&init_error[m..]);
    let xi_dot0 = xi(&shifted, gains, m).expect("dimension checked by caller");
    for i in 1..r {
        let xi_i = norm(&xi0[(i - 1) * m..i * m]);
        let xi_dot_i = norm(&xi_dot0[(i - 1) * m..i * m]);
        let scale = gamma.powi(-((r - i) as i32)) * (xi_dot_i + gains[i - 1] * xi_i);
        let offset = beta / (alpha * gamma.powi((r - 1) as i32));
        out.push(Arc::new(ExpFunnel { scale, rate: alpha, offset, t0 }));
    }
    out
}

/// Smallest γ in [0.1, 1) with ‖e_1(t0)‖ ≤ γ^r ψ(t0), grid search refined by bisection.
pub fn gamma_margin(e1_norm: f64, psi0: f64, r: usize) -> Option<f64> {
    let ok = |g: f64| e1_norm <= g.powi(r as i32) * psi0;
    let mut prev = None;
    for i in 1..=9 {
        let g = i as f64 / 10.0;
        if ok(g) {
            return Some(match prev {
                None => g,
                Some(lo) => bisect_threshold(lo, g, ok),
            });
        }
        prev = Some(g);
    }
    let hi = 1.0 - 1e-6;
    if ok(hi) {
        Some(bisect_threshold(0.9, hi, ok))
    } else {
        None
    }
}

fn bisect_threshold(mut lo: f64, mut hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Auxiliary design for the initial error stack `init_error` = χ(y_M⁰ − y_ref)(t0).
pub fn design_auxiliary(spec: &FunnelSpec, init_error: &[f64], r: usize, m: usize, mode: DesignMode) -> Result<AuxiliaryDesign> {
    if init_error.len() != r * m {
        return Err(Error::DimensionMismatch { expected: r * m, got: init_error.len() });
    }
    let t0 = spec.horizon.0;
    let psi0 = spec.value(t0);
    let e1 = first_block_norm(init_error, m);
    if !strictly_inside(e1, psi0) {
        return Err(Error::InitialErrorOutsideFunnel { index: 1 });
    }
    if r == 1 {
        let mut d = AuxiliaryDesign::first_order(spec, m);
        d.mode = mode;
        return Ok(d);
    }
    let (alpha, beta) = (spec.alpha, spec.beta);
    let design = match mode {
        DesignMode::Simplified => {
            let gains = vec![alpha + 2.0; r - 1];
            let mut psi: Vec<Arc<dyn FunnelFn>> = vec![spec.psi.clone()];
            for _ in 1..r {
                psi.push(Arc::new(ExpFunnel::constant(beta / alpha)));
            }
            AuxiliaryDesign::from_parts(spec, m, gains, psi, mode, 0.5)
        }
        DesignMode::Varying | DesignMode::Custom => {
            let gamma = gamma_margin(e1, psi0, r).ok_or(Error::InitialErrorOutsideFunnel { index: 1 })?;
            let gains = varying_gains(spec, init_error, r, m, gamma);
            let psi = varying_funnels(spec, init_error, m, &gains, gamma);
            AuxiliaryDesign::from_parts(spec, m, gains, psi, DesignMode::Varying, gamma)
        }
    };
    verify_initial(&design, init_error, t0)?;
    Ok(design)
}

/// Design with user supplied γ and gains (funnels from the varying closed form).
pub fn design_custom(spec: &FunnelSpec, init_error: &[f64], m: usize, gains: Vec<f64>, gamma: f64) -> Result<AuxiliaryDesign> {
    let r = gains.len() + 1;
    if init_error.len() != r * m {
        return Err(Error::DimensionMismatch { expected: r * m, got: init_error.len() });
    }
    let psi = varying_funnels(spec, init_error, m, &gains, gamma);
    let design = AuxiliaryDesign::from_parts(spec, m, gains, psi, DesignMode::Custom, gamma);
    verify_initial(&design, init_error, spec.horizon.0)?;
    Ok(design)
}

fn varying_gains(spec: &FunnelSpec, e0: &[f64], r: usize, m: usize, gamma: f64) -> Vec<f64> {
    let (alpha, beta) = (spec.alpha, spec.beta);
    let psi0 = spec.value(spec.horizon.0);
    let mut gains: Vec<f64> = Vec::with_capacity(r - 1);
    let gr1 = gamma.powi((r - 1) as i32);
    let e_dot = norm(&e0[m..2 * m]);
    gains.push(2.0 * e_dot / (gr1 * (1.0 - gamma) * psi0) + 2.0 * (alpha + 1.0 / gr1) / (1.0 - gamma));
    let mut shifted = vec![0.0; e0.len()];
    shifted[..e0.len() - m].copy_from_slice(&e0[m..]);
    for i in 2..r {
        // ξ_i depends only on k_1..k_{i−1}; pad the rest with zeros.
        let mut padded = gains.clone();
        padded.resize(r - 1, 0.0);
        let xi0 = xi(e0, &padded, m).expect("length checked");
        let xid = xi(&shifted, &padded, m).expect("length checked");
        let xi_i = norm(&xi0[(i - 1) * m..i * m]);
        let xi_dot = norm(&xid[(i - 1) * m..i * m]);
        let k = 2.0 * gamma * xi_dot / ((1.0 - gamma) * (xi_i + beta / (alpha * gamma.powi((i - 2) as i32))))
            + 2.0 * (1.0 + alpha) / (1.0 - gamma);
        gains.push(k);
    }
    gains
}

fn verify_initial(design: &AuxiliaryDesign, e0: &[f64], t0: f64) -> Result<()> {
    let (_, margins) = in_d(t0, e0, design);
    for (i, mg) in margins.iter().enumerate() {
        let p = design.psi[i].value(t0);
        if !strictly_inside(p - mg, p) {
            return Err(Error::InitialErrorOutsideFunnel { index: i + 1 });
        }
    }
    Ok(())
}

/// Membership of the error stack `e` in the set D at time t, with per-index margins ψ_i − ‖ξ_i‖.
pub fn in_d(t: f64, e: &[f64], design: &AuxiliaryDesign) -> (bool, Vec<f64>) {
    let mut buf = vec![0.0; design.m];
    let mut ok = true;
    let mut margins = Vec::with_capacity(design.r);
    for i in 0..design.r {
        design.xi_into(i, e, &mut buf);
        let n = norm(&buf);
        let p = design.psi[i].value(t);
        ok &= strictly_inside(n, p);
        margins.push(p - n);
    }
    (ok, margins)
}

/// Value in ℝ≥0 ∪ {∞}, with ∞ encoded by a flag and [`COST_CAP`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedCost {
    pub value: f64,
    pub infinite: bool,
}

impl ExtendedCost {
    pub const ZERO: ExtendedCost = ExtendedCost { value: 0.0, infinite: false };
    pub const INFINITE: ExtendedCost = ExtendedCost { value: COST_CAP, infinite: true };

    pub fn finite(value: f64) -> Self {
        if value.is_finite() && value < COST_CAP {
            ExtendedCost { value, infinite: false }
        } else {
            Self::INFINITE
        }
    }

    pub fn add(self, other: ExtendedCost) -> Self {
        if self.infinite || other.infinite {
            Self::INFINITE
        } else {
            Self::finite(self.value + other.value)
        }
    }

    /// Total order used by the optimizer: every finite value beats ∞.
    pub fn better_than(&self, other: &ExtendedCost) -> bool {
        match (self.infinite, other.infinite) {
            (false, true) => true,
            (false, false) => self.value < other.value,
            _ => false,
        }
    }
}

/// Numerator of the funnel penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyForm {
    /// ‖e‖²/(ψ² − ‖e‖²)
    Squared,
    /// ‖e‖/(ψ² − ‖e‖²)
    Norm,
}

pub fn penalty_value(form: PenaltyForm, e_norm: f64, psi: f64) -> ExtendedCost {
    if !strictly_inside(e_norm, psi) {
        return ExtendedCost::INFINITE;
    }
    let num = match form {
        PenaltyForm::Squared => e_norm * e_norm,
        PenaltyForm::Norm => e_norm,
    };
    ExtendedCost::finite(num / (psi * psi - e_norm * e_norm))
}

/// Funnel penalty ‖e‖²/(ψ(t)² − ‖e‖²), infinite on and outside the boundary.
pub fn funnel_penalty(t: f64, e: &[f64], psi: &dyn FunnelFn) -> ExtendedCost {
    penalty_value(PenaltyForm::Squared, norm(e), psi.value(t))
}

/// Funnel stage cost with control weight: penalty(ξ_r) + λ_u‖u‖².
pub fn stage_cost(t: f64, xi_r: &[f64], u: &[f64], psi_r: &dyn FunnelFn, lambda_u: f64) -> ExtendedCost {
    let u2: f64 = u.iter().map(|v| v * v).sum();
    funnel_penalty(t, xi_r, psi_r).add(ExtendedCost::finite(lambda_u * u2))
}

/// Error part of the stage cost used by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StageCost {
    /// Strict funnel penalty on ξ_r.
    Funnel(PenaltyForm),
    /// ‖ξ_r‖² inside the funnel, ∞ outside.
    NonStrict,
    /// ‖ξ_r‖² without any constraint.
    Quadratic,
}

impl StageCost {
    pub fn error_term(&self, xi_norm: f64, psi: f64) -> ExtendedCost {
        match self {
            StageCost::Funnel(form) => penalty_value(*form, xi_norm, psi),
            StageCost::NonStrict => {
                if strictly_inside(xi_norm, psi) {
                    ExtendedCost::finite(xi_norm * xi_norm)
                } else {
                    ExtendedCost::INFINITE
                }
            }
            StageCost::Quadratic => ExtendedCost::finite(xi_norm * xi_norm),
        }
    }

    pub fn constrained(&self) -> bool {
        !matches!(self, StageCost::Quadratic)
    }
}

/// γ: [0,1) → [1,∞) of the funnel controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bijection {
    /// γ(s) = 1/(1 − s)
    Reciprocal,
}

impl Bijection {
    pub fn eval(&self, s: f64) -> Option<f64> {
        match self {
            Bijection::Reciprocal => (s < 1.0).then(|| 1.0 / (1.0 - s)),
        }
    }

    pub fn deriv(&self, s: f64) -> Option<f64> {
        match self {
            Bijection::Reciprocal => (s < 1.0).then(|| 1.0 / ((1.0 - s) * (1.0 - s))),
        }
    }
}

/// N: ℝ≥0 → ℝ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Surjection {
    /// N(s) = −scale·s, for a known positive control direction.
    Negative { scale: f64 },
    /// N(s) = s·sin(s), for an unknown control direction.
    Oscillating,
}

impl Surjection {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Surjection::Negative { scale } => -scale * s,
            Surjection::Oscillating => s * s.sin(),
        }
    }
}

/// Activation 𝔞: [0,1] → [0, 𝔞⁺].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Always,
    /// 𝔞(s) = max(0, s − s_crit), so 𝔞⁺ = 1 − s_crit.
    Threshold { s_crit: f64 },
}

impl Activation {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Activation::Always => 1.0,
            Activation::Threshold { s_crit } => (s - s_crit).max(0.0),
        }
    }

    pub fn peak(&self) -> f64 {
        self.eval(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSpec {
    pub gamma: Bijection,
    pub n: Surjection,
    pub activation: Activation,
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec {
            gamma: Bijection::Reciprocal,
            n: Surjection::Negative { scale: 1.0 },
            activation: Activation::Always,
        }
    }
}

/// Funnel controller errors e_1..e_r, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct FcErrors {
    pub e: Vec<f64>,
    pub m: usize,
}

impl FcErrors {
    pub fn block(&self, i: usize) -> &[f64] {
        &self.e[i * self.m..(i + 1) * self.m]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.e.chunks(self.m).map(norm).collect()
    }

    pub fn last(&self) -> &[f64] {
        &self.e[self.e.len() - self.m..]
    }

    /// Membership in the ε-envelope: every ‖e_i‖ ≤ ε.
    pub fn within(&self, eps: f64) -> bool {
        self.norms().iter().all(|&n| n <= eps)
    }
}

/// e_1 = φz_1, e_{i+1} = φz_{i+1} + γ(‖e_i‖²)e_i.
pub fn fc_errors(phi: f64, z: &[f64], m: usize, gains: &GainSpec) -> Result<FcErrors> {
    if m == 0 || z.len() % m != 0 {
        return Err(Error::DimensionMismatch { expected: m, got: z.len() });
    }
    let r = z.len() / m;
    let mut e = vec![0.0; r * m];
    for l in 0..m {
        e[l] = phi * z[l];
    }
    for i in 1..r {
        let prev = &e[(i - 1) * m..i * m];
        let n2: f64 = prev.iter().map(|v| v * v).sum();
        let g = match gains.gamma.eval(n2) {
            Some(g) if n2 < 1.0 => g,
            _ => return Err(Error::DomainViolation { index: i }),
        };
        for l in 0..m {
            e[i * m + l] = phi * z[i * m + l] + g * e[(i - 1) * m + l];
        }
    }
    Ok(FcErrors { e, m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn horizon() -> (f64, f64) {
        (0.0, 4.0)
    }

    #[test]
    fn alpha_beta_reactor_funnel() {
        let psi = ExpFunnel::new(20.0, 2.0, 4.0);
        // long horizon so that the sampled infimum reaches the asymptote 4
        let (a, b) = derive_alpha_beta(&psi, (0.0, 40.0)).unwrap();
        assert_relative_eq!(a, 20.0, max_relative = 1e-12);
        assert_relative_eq!(b, 40.0, max_relative = 1e-12);
        assert!(psi.value(0.0) >= b / a);
        check_alpha_beta(&psi, horizon(), a, b).unwrap();
    }

    #[test]
    fn alpha_beta_constant_funnel() {
        let psi = ExpFunnel::constant(25.0);
        assert_eq!(derive_alpha_beta(&psi, horizon()).unwrap(), (1.0, 25.0));
    }

    #[test]
    fn alpha_beta_mass_on_car_admissible() {
        let psi = ExpFunnel::new(5.0, 2.0, 0.1);
        check_alpha_beta(&psi, (0.0, 10.0), 2.0, 0.2).unwrap();
    }

    #[test]
    fn alpha_beta_rejects_nonpositive() {
        let psi = ExpFunnel::new(1.0, 1.0, -0.5);
        assert!(matches!(derive_alpha_beta(&psi, (0.0, 5.0)), Err(Error::NonPositiveFunnel { .. })));
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi(&[2.0 / 3.0, 0.0], &[3.0], 1).unwrap(), vec![2.0 / 3.0, 2.0]);
        assert_eq!(xi(&[1.0, 1.0, 1.0], &[1.0, 2.0], 1).unwrap(), vec![1.0, 2.0, 6.0]);
        assert_eq!(xi(&[0.0; 6], &[1.0, 2.0], 2).unwrap(), vec![0.0; 6]);
        assert!(matches!(xi(&[1.0; 3], &[1.0], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn xi_matrix_examples() {
        assert_eq!(xi_matrix(&[], 1, 2), DMatrix::identity(2, 2));
        assert_eq!(xi_matrix(&[3.0], 2, 1), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 1.0]));
        let s = xi_matrix(&[1.0, 2.0], 3, 1);
        assert_eq!(s.row(2).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn penalty_and_stage_cost() {
        let psi = ExpFunnel::constant(2.0);
        assert_relative_eq!(funnel_penalty(0.0, &[1.0], &psi).value, 1.0 / 3.0, max_relative = 1e-15);
        assert_eq!(funnel_penalty(0.0, &[0.0], &psi), ExtendedCost::ZERO);
        assert!(funnel_penalty(0.0, &[2.0], &psi).infinite);
        assert_eq!(funnel_penalty(0.0, &[2.0], &psi).value, COST_CAP);
        let c = stage_cost(0.0, &[1.0], &[2.0, 0.0], &psi, 0.1);
        assert_relative_eq!(c.value, 1.0 / 3.0 + 0.4, max_relative = 1e-14);
        assert_eq!(stage_cost(0.0, &[0.0], &[0.0], &psi, 0.1), ExtendedCost::ZERO);
    }

    #[test]
    fn infinity_absorbs() {
        let c = ExtendedCost::finite(3.0).add(ExtendedCost::INFINITE);
        assert!(c.infinite);
        assert!(ExtendedCost::finite(1e11).better_than(&ExtendedCost::INFINITE));
        assert!(!ExtendedCost::INFINITE.better_than(&ExtendedCost::INFINITE));
    }

    #[test]
    fn simplified_design_and_membership() {
        let psi = Arc::new(ExpFunnel::constant(1.0));
        let spec = FunnelSpec::with_constants(psi, (0.0, 1.0), 1.0, 1.0 / 6.0).unwrap();
        let d = design_auxiliary(&spec, &[0.0, 0.0], 2, 1, DesignMode::Simplified).unwrap();
        assert_eq!(d.gains, vec![3.0]);
        assert_relative_eq!(d.psi[1].value(0.7), 1.0 / 6.0);
        let (ok, margins) = in_d(0.0, &[2.0 / 3.0, 0.0], &d);
        assert!(!ok);
        assert!(margins[0] > 0.0 && margins[1] < 0.0);
        let (ok, margins) = in_d(0.0, &[0.0, 0.0], &d);
        assert!(ok);
        assert_eq!(margins, vec![1.0, 1.0 / 6.0]);
        let err = design_auxiliary(&spec, &[0.1, 0.0], 2, 1, DesignMode::Simplified).unwrap_err();
        assert_eq!(err, Error::InitialErrorOutsideFunnel { index: 2 });
    }

    #[test]
    fn boundary_is_outside() {
        let psi = Arc::new(ExpFunnel::constant(1.0));
        let spec = FunnelSpec::new(psi, (0.0, 1.0)).unwrap();
        let d = AuxiliaryDesign::first_order(&spec, 1);
        assert!(!in_d(0.0, &[1.0], &d).0);
    }

    #[test]
    fn mass_on_car_custom_design() {
        let psi = Arc::new(ExpFunnel::new(5.0, 2.0, 0.1));
        let spec = FunnelSpec::with_constants(psi, (0.0, 10.0), 2.0, 0.2).unwrap();
        let d = design_custom(&spec, &[-1.0, 0.0], 1, vec![14.0], 0.2).unwrap();
        for &t in &[0.0, 0.3, 2.0, 9.0] {
            let expected = 14.0 / 0.2 * (-2.0f64 * t).exp() + 0.2 / (2.0 * 0.2);
            assert_relative_eq!(d.psi[1].value(t), expected, max_relative = 1e-14);
        }
    }

    #[test]
    fn varying_design_contains_initial_error() {
        let psi = Arc::new(ExpFunnel::new(5.0, 2.0, 0.1));
        let spec = FunnelSpec::new(psi, (0.0, 10.0)).unwrap();
        let e0 = [-1.0, 0.3, 2.0];
        let d = design_auxiliary(&spec, &e0, 3, 1, DesignMode::Varying).unwrap();
        assert!(in_d(0.0, &e0, &d).0);
        let g = d.gamma_margin;
        assert!(1.0 <= g.powi(3) * 5.1 + 1e-9);
        assert!(1.0 > (g - 2e-6).powi(3) * 5.1);
    }

    #[test]
    fn zero_initial_error_both_modes() {
        let psi = Arc::new(ExpFunnel::new(5.0, 2.0, 0.1));
        let spec = FunnelSpec::new(psi, (0.0, 10.0)).unwrap();
        for mode in [DesignMode::Varying, DesignMode::Simplified] {
            let d = design_auxiliary(&spec, &[0.0; 4], 2, 2, mode).unwrap();
            assert!(in_d(0.0, &[0.0; 4], &d).0);
        }
    }

    #[test]
    fn fc_errors_examples() {
        let g = GainSpec::default();
        let e = fc_errors(1.0, &[0.5, 0.0], 1, &g).unwrap();
        assert_relative_eq!(e.e[0], 0.5);
        assert_relative_eq!(e.e[1], 2.0 / 3.0, max_relative = 1e-15);
        let e = fc_errors(3.0, &[0.0, 0.0], 1, &g).unwrap();
        assert_eq!(e.e, vec![0.0, 0.0]);
        assert!(e.within(1e-3));
        assert_eq!(fc_errors(1.0, &[1.0, 0.0], 1, &g).unwrap_err(), Error::DomainViolation { index: 1 });
    }

    #[test]
    fn activation_threshold() {
        let a = Activation::Threshold { s_crit: 0.4 };
        assert_eq!(a.eval(0.3), 0.0);
        assert_eq!(a.eval(0.4), 0.0);
        assert_relative_eq!(a.peak(), 0.6);
    }
}
