//! Learning linear surrogate models inside a restricted model class.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funnel::AuxiliaryDesign;
use crate::linalg::{norm, op_norm, sym_lambda_max, vec_norm};
use crate::model::{ControlAffineModel, DynBounds, LinearInternal, Rk4};
use crate::ocp::{gain_sum, u_max_bound};

/// y^{(r)} = Σ R_i y^{(i−1)} + Sη + D₁ + Γu, η̇ = Qη + Py + D₂, η(t₀) = η₀.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelParams {
    pub r_mats: Vec<DMatrix<f64>>,
    pub s: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub d1: DVector<f64>,
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub d2: DVector<f64>,
    pub eta0: DVector<f64>,
}

impl LinearModelParams {
    /// Integrator chain with decoupled, stable internal dynamics η̇ = −σ·η.
    pub fn trivial(r: usize, m: usize, nu: usize, sigma: f64) -> Self {
        LinearModelParams {
            r_mats: vec![DMatrix::zeros(m, m); r],
            s: DMatrix::zeros(m, nu),
            gamma: DMatrix::identity(m, m),
            d1: DVector::zeros(m),
            q: -sigma * DMatrix::identity(nu, nu),
            p: DMatrix::zeros(nu, m),
            d2: DVector::zeros(nu),
            eta0: DVector::zeros(nu),
        }
    }

    pub fn r(&self) -> usize {
        self.r_mats.len()
    }

    pub fn m(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn nu(&self) -> usize {
        self.q.nrows()
    }

    pub fn to_model(&self, name: &str) -> ControlAffineModel {
        let internal = LinearInternal {
            r_mats: self.r_mats.clone(),
            s: self.s.clone(),
            q: self.q.clone(),
            p: self.p.clone(),
            d2: self.d2.clone(),
            eta0: self.eta0.clone(),
        };
        ControlAffineModel::linear(name, self.m(), internal, self.gamma.clone(), self.d1.clone())
    }
}

/// Bounds defining the admissible parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub r_bar: f64,
    pub s_bar: f64,
    pub gamma_bar: f64,
    pub d_bar: f64,
    pub p_bar: f64,
    pub eta_bar: f64,
    pub y_bar: f64,
}

impl ParamBounds {
    /// σ = (p̄ȳ + d̄)/η̄, the required stability margin of Q.
    pub fn sigma(&self) -> f64 {
        (self.p_bar * self.y_bar + self.d_bar) / self.eta_bar
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamViolation {
    R(usize),
    S,
    Gamma,
    GammaInverse,
    D1,
    D2,
    P,
    Eta0,
    QNotSymmetric,
    QNotStable { lambda_max: f64, required: f64 },
}

impl fmt::Display for ParamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamViolation::R(i) => write!(f, "norm of R_{} exceeds r_bar", i + 1),
            ParamViolation::S => write!(f, "norm of S exceeds s_bar"),
            ParamViolation::Gamma => write!(f, "norm of Gamma exceeds gamma_bar"),
            ParamViolation::GammaInverse => write!(f, "Gamma singular or its inverse exceeds gamma_bar"),
            ParamViolation::D1 => write!(f, "norm of D1 exceeds d_bar"),
            ParamViolation::D2 => write!(f, "norm of D2 exceeds d_bar"),
            ParamViolation::P => write!(f, "norm of P exceeds p_bar"),
            ParamViolation::Eta0 => write!(f, "norm of eta0 exceeds eta_bar"),
            ParamViolation::QNotSymmetric => write!(f, "Q is not symmetric"),
            ParamViolation::QNotStable { lambda_max, required } => {
                write!(f, "largest eigenvalue of Q is {lambda_max}, needs <= {required}")
            }
        }
    }
}

const SLACK: f64 = 1e-9;

fn within(v: f64, bound: f64) -> bool {
    v <= bound * (1.0 + SLACK) + SLACK * 1e-3
}

/// Checks every constraint of the admissible set, reporting the first violated one.
pub fn check_feasible_params(p: &LinearModelParams, b: &ParamBounds) -> std::result::Result<(), ParamViolation> {
    for (i, ri) in p.r_mats.iter().enumerate() {
        if !within(op_norm(ri), b.r_bar) {
            return Err(ParamViolation::R(i));
        }
    }
    if !within(op_norm(&p.s), b.s_bar) {
        return Err(ParamViolation::S);
    }
    if !within(op_norm(&p.gamma), b.gamma_bar) {
        return Err(ParamViolation::Gamma);
    }
    match p.gamma.clone().try_inverse() {
        Some(inv) if within(op_norm(&inv), b.gamma_bar) => {}
        _ => return Err(ParamViolation::GammaInverse),
    }
    if !within(vec_norm(&p.d1), b.d_bar) {
        return Err(ParamViolation::D1);
    }
    if !within(vec_norm(&p.d2), b.d_bar) {
        return Err(ParamViolation::D2);
    }
    if !within(op_norm(&p.p), b.p_bar) {
        return Err(ParamViolation::P);
    }
    if !within(vec_norm(&p.eta0), b.eta_bar) {
        return Err(ParamViolation::Eta0);
    }
    if p.nu() > 0 {
        let asym = (&p.q - p.q.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + p.q.abs().max()) {
            return Err(ParamViolation::QNotSymmetric);
        }
        let lmax = sym_lambda_max(&p.q);
        let required = -b.sigma();
        if lmax > required + SLACK * (1.0 + required.abs()) {
            return Err(ParamViolation::QNotStable { lambda_max: lmax, required });
        }
    }
    Ok(())
}

/// Smallest admissible (u_max, ρ̄) for the parameter set:
/// u_max = γ̄(r·r̄·ȳ + s̄η̄ + d̄ + ‖y_ref^{(r)}‖∞ + Σk_jμ_j^{r−j} + ‖ψ̇_r‖∞) and
/// ρ̄ = r·r̄·ȳ + s̄η̄ + d̄ + γ̄·u_max.
pub fn required_umax_rho(b: &ParamBounds, design: &AuxiliaryDesign, yref_r_sup: f64) -> (f64, f64) {
    let structural = design.r as f64 * b.r_bar * b.y_bar + b.s_bar * b.eta_bar + b.d_bar;
    let u_max = b.gamma_bar * (structural + yref_r_sup + gain_sum(design) + design.sup_psi_dot_last());
    (u_max, rho_for(b, design.r, u_max))
}

/// ρ̄ = r·r̄·ȳ + s̄η̄ + d̄ + γ̄·u_max.
pub fn rho_for(b: &ParamBounds, r: usize, u_max: f64) -> f64 {
    r as f64 * b.r_bar * b.y_bar + b.s_bar * b.eta_bar + b.d_bar + b.gamma_bar * u_max
}

/// Membership of a model with dynamics bounds `dyn_bounds` in the restricted class.
pub fn check_restricted_membership(
    dyn_bounds: &DynBounds,
    design: &AuxiliaryDesign,
    yref_r_sup: f64,
    u_max: f64,
    rho: f64,
) -> bool {
    u_max >= u_max_bound(dyn_bounds, design, yref_r_sup) && dyn_bounds.f_max + dyn_bounds.g_max * u_max <= rho
}

/// Append-only record of (t, χ(y), y_M, u_FMPC, u_FC).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalLog {
    pub m: usize,
    /// Width of the recorded output stack (r·m, or m when derivatives are not logged).
    pub width: usize,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub y_model: Vec<f64>,
    pub u_fmpc: Vec<f64>,
    pub u_fc: Vec<f64>,
}

/// Resampled log: outputs at the sample times, inputs averaged over the following interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl SignalLog {
    pub fn new(m: usize, width: usize) -> Self {
        SignalLog { m, width, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Appends a record; a record at the time of the last one replaces it.
    pub fn push(&mut self, t: f64, y: &[f64], y_model: &[f64], u_fmpc: &[f64], u_fc: &[f64]) {
        if let Some(&last) = self.t.last() {
            if t <= last + 1e-12 {
                if (t - last).abs() > 1e-12 {
                    return;
                }
                self.t.pop();
                self.y.truncate(self.y.len() - self.width);
                self.y_model.truncate(self.y_model.len() - self.m);
                self.u_fmpc.truncate(self.u_fmpc.len() - self.m);
                self.u_fc.truncate(self.u_fc.len() - self.m);
            }
        }
        self.t.push(t);
        self.y.extend_from_slice(&y[..self.width]);
        self.y_model.extend_from_slice(&y_model[..self.m]);
        self.u_fmpc.extend_from_slice(&u_fmpc[..self.m]);
        self.u_fc.extend_from_slice(&u_fc[..self.m]);
    }

    fn u_total(&self, i: usize) -> Vec<f64> {
        (0..self.m).map(|l| self.u_fmpc[i * self.m + l] + self.u_fc[i * self.m + l]).collect()
    }

    /// Samples on [a, b] every `dt` (snapped to recorded times).
    pub fn resample(&self, a: f64, b: f64, dt: f64) -> Samples {
        let mut out = Samples { t: Vec::new(), y: Vec::new(), u: Vec::new() };
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.t[i] >= a - 1e-12 && self.t[i] <= b + 1e-12).collect();
        if idx.is_empty() {
            return out;
        }
        let mut picks = vec![idx[0]];
        for &i in &idx[1..] {
            if self.t[i] - self.t[*picks.last().unwrap()] >= dt - 1e-9 {
                picks.push(i);
            }
        }
        for (n, &i) in picks.iter().enumerate() {
            out.t.push(self.t[i]);
            out.y.push(self.y[i * self.width..(i + 1) * self.width].to_vec());
            // time-weighted mean input until the next sample
            let end = picks.get(n + 1).copied().unwrap_or(i);
            let mut acc = vec![0.0; self.m];
            let mut len = 0.0;
            for j in i..end {
                let w = self.t[j + 1] - self.t[j];
                for (a, v) in acc.iter_mut().zip(self.u_total(j)) {
                    *a += w * v;
                }
                len += w;
            }
            out.u.push(if len > 0.0 { acc.iter().map(|v| v / len).collect() } else { self.u_total(i) });
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut head = vec!["t".to_string()];
        head.extend((1..=self.width).map(|i| format!("y_{i}")));
        head.extend((1..=self.m).map(|i| format!("yM_{i}")));
        head.extend((1..=self.m).map(|i| format!("u_fmpc_{i}")));
        head.extend((1..=self.m).map(|i| format!("u_fc_{i}")));
        wr.write_record(&head)?;
        for i in 0..self.len() {
            let mut rec = vec![self.t[i].to_string()];
            rec.extend(self.y[i * self.width..(i + 1) * self.width].iter().map(f64::to_string));
            for ch in [&self.y_model, &self.u_fmpc, &self.u_fc] {
                rec.extend(ch[i * self.m..(i + 1) * self.m].iter().map(f64::to_string));
            }
            wr.write_record(rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(rd: R, m: usize, width: usize) -> Result<Self> {
        let mut log = SignalLog::new(m, width);
        let mut reader = csv::Reader::from_reader(rd);
        for rec in reader.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Io(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != 1 + width + 3 * m {
                return Err(Error::DimensionMismatch { expected: 1 + width + 3 * m, got: v.len() });
            }
            let y = &v[1..1 + width];
            let rest = &v[1 + width..];
            log.push(v[0], y, &rest[..m], &rest[m..2 * m], &rest[2 * m..]);
        }
        Ok(log)
    }
}

/// Weights of the identification cost Σ a‖χ(z) − χ(y)‖²/N + b‖θ − θ_prev‖².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnOptions {
    pub a: f64,
    pub b: f64,
    /// Resampling step of the log and playback step.
    pub dt: f64,
    pub max_iter: usize,
    /// Length of the data window ending at the learning time; `None` uses the whole log.
    pub window: Option<f64>,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions { a: 1.0, b: 0.0, dt: 1e-3, max_iter: 60, window: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub params: LinearModelParams,
    /// RMS output residual before and after learning.
    pub residual_before: f64,
    pub residual: f64,
    /// Internal state of the learned model at the end of the window.
    pub eta_end: Vec<f64>,
    /// The data carried no information and the previous parameters were kept.
    pub degenerate: bool,
}

struct Layout {
    r: usize,
    m: usize,
    nu: usize,
}

impl Layout {
    fn len(&self) -> usize {
        let (r, m, nu) = (self.r, self.m, self.nu);
        r * m * m + m * nu + m + nu * nu + nu * m + nu + nu
    }
}

/// θ = [R₁..R_r, S, D₁, L, P, D₂, η₀] with Q = −LLᵀ − σI.
fn pack(p: &LinearModelParams, sigma: f64) -> Vec<f64> {
    let nu = p.nu();
    let mut v = Vec::new();
    for ri in &p.r_mats {
        v.extend(ri.iter());
    }
    v.extend(p.s.iter());
    v.extend(p.d1.iter());
    if nu > 0 {
        let mat = -&p.q - sigma * DMatrix::identity(nu, nu);
        let sym = 0.5 * (&mat + mat.transpose());
        let eig = SymmetricEigen::new(sym);
        let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let l = &eig.eigenvectors * sq;
        v.extend(l.iter());
    }
    v.extend(p.p.iter());
    v.extend(p.d2.iter());
    v.extend(p.eta0.iter());
    v
}

fn unpack(v: &[f64], lay: &Layout, gamma: &DMatrix<f64>, sigma: f64) -> LinearModelParams {
    let (r, m, nu) = (lay.r, lay.m, lay.nu);
    let mut at = 0;
    let mut take = |rows: usize, cols: usize| {
        let mtx = DMatrix::from_column_slice(rows, cols, &v[at..at + rows * cols]);
        at += rows * cols;
        mtx
    };
    let r_mats = (0..r).map(|_| take(m, m)).collect();
    let s = take(m, nu);
    let d1 = take(m, 1).column(0).into_owned();
    let l = take(nu, nu);
    let p = take(nu, m);
    let d2 = take(nu, 1).column(0).into_owned();
    let eta0 = take(nu, 1).column(0).into_owned();
    let q = -(&l * l.transpose()) - sigma * DMatrix::identity(nu, nu);
    LinearModelParams { r_mats, s, gamma: gamma.clone(), d1, q, p, d2, eta0 }
}

fn scale_into(v: &mut [f64], n: f64, bound: f64) {
    if n > bound && n > 0.0 {
        let f = bound / n;
        v.iter_mut().for_each(|x| *x *= f);
    }
}

/// Scaling projection of the norm-bounded blocks of θ.
fn project(v: &mut [f64], lay: &Layout, b: &ParamBounds) {
    let (r, m, nu) = (lay.r, lay.m, lay.nu);
    let mut at = 0;
    let mut block = |v: &mut [f64], rows: usize, cols: usize, bound: Option<f64>| {
        let sl = &mut v[at..at + rows * cols];
        if let Some(bd) = bound {
            let n = if cols == 1 { norm(sl) } else { op_norm(&DMatrix::from_column_slice(rows, cols, sl)) };
            scale_into(sl, n, bd);
        }
        at += rows * cols;
    };
    for _ in 0..r {
        block(v, m, m, Some(b.r_bar));
    }
    block(v, m, nu, Some(b.s_bar));
    block(v, m, 1, Some(b.d_bar));
    block(v, nu, nu, None);
    block(v, nu, m, Some(b.p_bar));
    block(v, nu, 1, Some(b.d_bar));
    block(v, nu, 1, Some(b.eta_bar));
}

/// Plays the model back along the samples; returns stacked output deviations and η at the end.
fn playback(p: &LinearModelParams, samples: &Samples) -> Option<(Vec<f64>, Vec<f64>)> {
    let model = p.to_model("candidate");
    let width = samples.y[0].len();
    let mut x: Vec<f64> = samples.y[0].clone();
    x.extend(p.eta0.iter());
    let rm = model.r * model.m;
    let mut rk = Rk4::new(x.len());
    let mut scratch = model.scratch();
    let mut res = Vec::with_capacity(samples.t.len() * width);
    for i in 0..samples.t.len() {
        for k in 0..width.min(rm) {
            res.push(x[k] - samples.y[i][k]);
        }
        if i + 1 < samples.t.len() {
            let (t, h) = (samples.t[i], samples.t[i + 1] - samples.t[i]);
            let u = &samples.u[i];
            rk.step(&mut |s, xs: &[f64], dx: &mut [f64]| model.rhs(s, xs, u, dx, &mut scratch), t, &mut x, h).ok()?;
        }
    }
    Some((res, x[rm..].to_vec()))
}

fn rms(res: &[f64], n: usize) -> f64 {
    (res.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt()
}

type Residuals<'a> = dyn Fn(&[f64]) -> Option<(Vec<f64>, Vec<f64>)> + 'a;

/// Second starting point with active internal coupling; at S = P = 0, L = 0
/// the internal block has zero gradient.
fn seeded(theta: &[f64], lay: &Layout, b: &ParamBounds) -> Option<Vec<f64>> {
    let (r, m, nu) = (lay.r, lay.m, lay.nu);
    if nu == 0 {
        return None;
    }
    let mut v = theta.to_vec();
    let s_at = r * m * m;
    let l_at = s_at + m * nu + m;
    let p_at = l_at + nu * nu;
    let scale = ((m * nu) as f64).sqrt();
    for k in 0..m * nu {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        v[s_at + k] += sign * 0.5 * b.s_bar / scale;
        v[p_at + k] += 0.5 * b.p_bar / scale;
    }
    for d in 0..nu {
        v[l_at + d * nu + d] += 0.5;
    }
    project(&mut v, lay, b);
    Some(v)
}

/// Projected Levenberg–Marquardt descent; returns (θ, residual vector, η at the end, cost).
fn descend(
    mut theta: Vec<f64>,
    mut r0: Vec<f64>,
    mut eta_end: Vec<f64>,
    residuals: &Residuals<'_>,
    lay: &Layout,
    bounds: &ParamBounds,
    max_iter: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let mut cost: f64 = r0.iter().map(|v| v * v).sum();
    let mut mu = -1.0;
    for _ in 0..max_iter {
        let np = theta.len();
        let mut jac = DMatrix::zeros(r0.len(), np);
        for j in 0..np {
            let step = 1e-7 * theta[j].abs().max(1e-2);
            let mut tp = theta.clone();
            tp[j] += step;
            let Some((rp, _)) = residuals(&tp) else { continue };
            for i in 0..r0.len() {
                jac[(i, j)] = (rp[i] - r0[i]) / step;
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r0);
        if mu < 0.0 {
            mu = 1e-3 * jtj.diagonal().max().max(1e-12);
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for d in 0..np {
                lhs[(d, d)] += mu * (1.0 + jtj[(d, d)]);
            }
            let Some(delta) = lhs.cholesky().map(|c| c.solve(&(-&jtr))) else {
                mu *= 4.0;
                continue;
            };
            let mut cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            project(&mut cand, lay, bounds);
            if let Some((rc, ec)) = residuals(&cand) {
                let cc: f64 = rc.iter().map(|v| v * v).sum();
                if cc < cost {
                    let rel = (cost - cc) / cost.max(1e-300);
                    theta = cand;
                    r0 = rc;
                    eta_end = ec;
                    cost = cc;
                    mu = (mu / 3.0).max(1e-15);
                    improved = rel > 1e-12;
                    break;
                }
            }
            mu *= 4.0;
        }
        if !improved || cost <= 1e-28 {
            break;
        }
    }
    (theta, r0, eta_end, cost)
}

/// Fits a linear model to the logged data on [a, b] by projected Levenberg–Marquardt
/// on the simulation residual, starting from `previous`.
pub fn learn_linear(log: &SignalLog, a: f64, b: f64, bounds: &ParamBounds, previous: &LinearModelParams, opts: &LearnOptions) -> Result<LearnOutcome> {
    let samples = log.resample(a, b, opts.dt);
    if samples.t.len() < 2 {
        return Err(Error::Config("learning window holds fewer than two samples".into()));
    }
    let n = samples.t.len();
    let sigma = bounds.sigma();
    let lay = Layout { r: previous.r(), m: previous.m(), nu: previous.nu() };
    let theta_prev = {
        let mut v = pack(previous, sigma);
        project(&mut v, &lay, bounds);
        debug_assert_eq!(v.len(), lay.len());
        v
    };
    let sa = (opts.a / n as f64).sqrt();
    let sb = opts.b.sqrt();
    let residuals = |theta: &[f64]| -> Option<(Vec<f64>, Vec<f64>)> {
        let p = unpack(theta, &lay, &previous.gamma, sigma);
        let (mut res, eta) = playback(&p, &samples)?;
        res.iter_mut().for_each(|v| *v *= sa);
        if sb > 0.0 {
            res.extend(theta.iter().zip(&theta_prev).map(|(x, y)| sb * (x - y)));
        }
        res.iter().all(|v| v.is_finite()).then_some((res, eta))
    };
    let out_rms = |theta: &[f64]| -> f64 {
        let p = unpack(theta, &lay, &previous.gamma, sigma);
        playback(&p, &samples).map(|(r, _)| rms(&r, n)).unwrap_or(f64::INFINITY)
    };
    let (r0, eta_end) = residuals(&theta_prev).ok_or(Error::NonFinite { t: a })?;
    let before = out_rms(&theta_prev);
    let excitation = {
        let spread = |vals: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        };
        spread(&mut samples.y.iter().flatten().copied()) + spread(&mut samples.u.iter().flatten().copied())
    };
    let prev_params = unpack(&theta_prev, &lay, &previous.gamma, sigma);
    if before <= 1e-14 || excitation <= 1e-12 {
        return Ok(LearnOutcome { params: prev_params, residual_before: before, residual: before, eta_end, degenerate: true });
    }
    let first = descend(theta_prev.clone(), r0, eta_end, &residuals, &lay, bounds, opts.max_iter);
    let (theta, _, eta_end, _) = match seeded(&theta_prev, &lay, bounds) {
        Some(seed) => match residuals(&seed) {
            Some((rs, es)) => {
                let second = descend(seed, rs, es, &residuals, &lay, bounds, opts.max_iter);
                if second.3 < first.3 {
                    second
                } else {
                    first
                }
            }
            None => first,
        },
        None => first,
    };
    let params = unpack(&theta, &lay, &previous.gamma, sigma);
    if let Err(v) = check_feasible_params(&params, bounds) {
        return Err(Error::InfeasibleProjection { reason: v.to_string() });
    }
    let residual = out_rms(&theta);
    Ok(LearnOutcome { params, residual_before: before, residual, eta_end, degenerate: false })
}

/// Model update produced by a learner.
pub struct Learned {
    pub model: ControlAffineModel,
    /// Internal state of the new model at the learning time.
    pub eta: Vec<f64>,
    pub residual: f64,
}

/// A learning scheme called by the learning-based robust loop.
pub trait Learner {
    /// A new model from the signals recorded up to `t`, or `None` to keep the current one.
    fn learn(&mut self, log: &SignalLog, t: f64) -> Result<Option<Learned>>;
}

/// Learner wrapping [`learn_linear`] with contract checks on its output.
pub struct LinearLearner {
    pub bounds: ParamBounds,
    pub params: LinearModelParams,
    pub opts: LearnOptions,
    pub history: Vec<LearnOutcome>,
}

impl LinearLearner {
    pub fn new(bounds: ParamBounds, initial: LinearModelParams, opts: LearnOptions) -> Result<Self> {
        check_feasible_params(&initial, &bounds).map_err(|v| Error::LearnerReturnedInfeasibleModel { reason: v.to_string() })?;
        Ok(LinearLearner { bounds, params: initial, opts, history: Vec::new() })
    }
}

impl Learner for LinearLearner {
    fn learn(&mut self, log: &SignalLog, t: f64) -> Result<Option<Learned>> {
        let Some(&t_first) = log.t.first() else { return Ok(None) };
        let a = self.opts.window.map_or(t_first, |w| (t - w).max(t_first));
        let out = match learn_linear(log, a, t, &self.bounds, &self.params, &self.opts) {
            Ok(o) => o,
            Err(Error::InfeasibleProjection { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        check_feasible_params(&out.params, &self.bounds)
            .map_err(|v| Error::LearnerReturnedInfeasibleModel { reason: v.to_string() })?;
        self.params = out.params.clone();
        let learned = Learned { model: out.params.to_model("learned"), eta: out.eta_end.clone(), residual: out.residual };
        self.history.push(out);
        Ok(Some(learned))
    }
}
