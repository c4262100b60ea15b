//! Receding-horizon loops: funnel MPC, robust funnel MPC (with optional
//! learning) and sampled-data funnel MPC, plus proper model initialisation.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::{adaptive_phi, fc_output, zoh_feasibility_feedback};
use crate::funnel::{fc_errors, in_d, strictly_inside, AuxiliaryDesign, FunnelFn, GainSpec, StageCost};
use crate::learning::{Learner, SignalLog};
use crate::linalg::{dist, norm};
use crate::model::{
    integrate_closed_loop, steps_in, ControlAffineModel, Input, ModelScratch, Monitor, Partition, Rk4, StepFunction,
    BLOWUP,
};
use crate::ocp::{cost_j, feasibility_warm_start, solve_ocp, OcpProblem, SolverOptions};
use crate::reference::Reference;
use crate::trace::{ReportSummary, SimulationTrace, TraceRow, FLAG_ESCAPED, FLAG_NAN, FLAG_VIOLATED};

/// Model (re-)initialisation at the start of every MPC step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InitStrategy {
    /// Continue from the model's own state.
    CarryOver,
    /// Proper (ε, λ) initialisation closest to the measurement; `None` picks the defaults.
    ProperInit { eps: Option<f64>, lambda: Option<f64> },
    /// Set the model output stack to the measured one, keep the internal state.
    ExactOutputMatch,
}

/// Warm start offered to the optimizer besides the shifted previous solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WarmStart {
    Feasibility,
    /// Sampled feedback 0 / −ν·ψ_r·ξ_r/‖ξ_r‖² held on the control partition.
    Zoh { nu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcConfig {
    pub t0: f64,
    pub t_end: f64,
    pub delta: f64,
    pub horizon: f64,
    pub control_step: f64,
    pub u_max: f64,
    pub lambda_u: f64,
    pub u_offset: Option<Vec<f64>>,
    pub cost: StageCost,
    pub h_model: f64,
    pub h_system: f64,
    #[serde(skip)]
    pub solver: SolverOptions,
    pub init: InitStrategy,
    pub warm: WarmStart,
    pub learn_every: Option<usize>,
    /// Funnel controller component; `None` applies the MPC input alone.
    pub fc: Option<GainSpec>,
}

impl MpcConfig {
    pub fn new(t_end: f64, delta: f64, horizon: f64, u_max: f64, lambda_u: f64, h: f64) -> Self {
        MpcConfig {
            t0: 0.0,
            t_end,
            delta,
            horizon,
            control_step: delta,
            u_max,
            lambda_u,
            u_offset: None,
            cost: StageCost::Funnel(crate::funnel::PenaltyForm::Squared),
            h_model: h,
            h_system: h,
            solver: SolverOptions { max_iter: 60, tol: 1e-9 },
            init: InitStrategy::CarryOver,
            warm: WarmStart::Feasibility,
            learn_every: None,
            fc: None,
        }
    }

    pub fn validate(&self) -> Result<usize> {
        let bad = |s: &str| Err(Error::Config(s.to_string()));
        if !(self.delta > 0.0 && self.horizon >= self.delta - 1e-12) {
            return bad("need 0 < delta <= horizon");
        }
        if !(self.u_max > 0.0) || self.lambda_u < 0.0 {
            return bad("need u_max > 0 and lambda_u >= 0");
        }
        if steps_in(self.delta, self.control_step).is_none() || steps_in(self.horizon, self.control_step).is_none() {
            return bad("control_step must divide delta and horizon");
        }
        if steps_in(self.control_step, self.h_model).is_none() || steps_in(self.control_step, self.h_system).is_none() {
            return bad("integration steps must divide control_step");
        }
        steps_in(self.t_end - self.t0, self.delta).ok_or(Error::Config("delta must divide the run interval".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub t: f64,
    pub cost: f64,
    pub feasible: bool,
    pub solver_iterations: usize,
    /// ‖x_M⁺ − x_M⁻‖ of the model re-initialisation.
    pub jump: f64,
    pub residual: Option<f64>,
    /// ‖ξ_r‖ < ψ_r on the applied interval implies every ξ_i margin positive.
    pub only_last_funnel_ok: bool,
    /// ‖y − y_M‖ < 1/φ at every node (robust runs).
    pub decomposition_ok: bool,
    /// ‖ξ₁(t_k)‖ < λψ₁(t_k) persisted over the interval (proper initialisation only).
    pub lambda_ok: Option<bool>,
    pub max_u_fmpc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RunStatus {
    Completed,
    OcpInfeasible { k: usize },
    PredictionOutsideFunnel { k: usize },
    MeasurementOutsideEnvelope { k: usize },
    LearnerFailed { k: usize, reason: String },
    Diverged { k: usize },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: SimulationTrace,
    pub iterations: Vec<IterationRecord>,
    pub summary: ReportSummary,
    pub status: RunStatus,
}

impl RunResult {
    pub(crate) fn finish(trace: SimulationTrace, iterations: Vec<IterationRecord>, status: RunStatus, start: Instant) -> Self {
        let mut summary = ReportSummary::from_trace(&trace);
        summary.runtime_s = start.elapsed().as_secs_f64();
        RunResult { trace, iterations, summary, status }
    }

    /// One JSON object per MPC step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.iterations {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn contained(&self) -> bool {
        self.status == RunStatus::Completed && !self.summary.violated
    }
}

fn shift_solution(prev: &StepFunction, cells: usize) -> Vec<f64> {
    let m = prev.m;
    let n = prev.partition.cells();
    let mut v = prev.values[(cells.min(n)) * m..].to_vec();
    let last = prev.cell(n - 1).to_vec();
    while v.len() < n * m {
        v.extend_from_slice(&last);
    }
    v
}

/// The ZoH feasibility feedback sampled at the cell starts of the problem partition.
pub fn zoh_warm_start(problem: &OcpProblem, nu: f64) -> Result<StepFunction> {
    let model = problem.model;
    let m = model.m;
    let part = Partition::uniform(problem.t_hat, problem.t_hat + problem.horizon, problem.control_step)?;
    let spc = steps_in(problem.control_step, problem.h).ok_or(Error::StepIncompatibleWithPartition {
        h: problem.h,
        a: problem.t_hat,
        b: problem.t_hat + problem.control_step,
    })?;
    let h = problem.control_step / spc as f64;
    let mut x = problem.initial.clone();
    let mut rk = Rk4::new(x.len());
    let mut scratch = model.scratch();
    let mut values = vec![0.0; part.cells() * m];
    let mut u = vec![0.0; m];
    for c in 0..part.cells() {
        let t = part.times[c];
        zoh_feasibility_feedback(t, &x, problem.design, problem.reference, nu, &mut u);
        crate::linalg::project_ball(&mut u, problem.u_max);
        values[c * m..(c + 1) * m].copy_from_slice(&u);
        for j in 0..spc {
            let s = t + j as f64 * h;
            if rk.step(&mut |tt, xs: &[f64], dx: &mut [f64]| model.rhs(tt, xs, &u, dx, &mut scratch), s, &mut x, h).is_err() {
                break;
            }
        }
    }
    StepFunction::new(part, m, values)
}

fn pick_warm_start(problem: &OcpProblem, cfg: &MpcConfig, prev: Option<&StepFunction>) -> Result<StepFunction> {
    let fresh = match cfg.warm {
        WarmStart::Feasibility => feasibility_warm_start(problem)?,
        WarmStart::Zoh { nu } => zoh_warm_start(problem, nu)?,
    };
    let Some(prev) = prev else { return Ok(fresh) };
    let shift = (cfg.delta / cfg.control_step).round() as usize;
    let shifted = StepFunction::new(fresh.partition.clone(), fresh.m, shift_solution(prev, shift))?;
    let (a, b) = (cost_j(&shifted, problem)?, cost_j(&fresh, problem)?);
    Ok(if a.better_than(&b) { shifted } else { fresh })
}

fn solve_step(problem: &OcpProblem, cfg: &MpcConfig, prev: Option<&StepFunction>) -> Result<crate::ocp::OcpSolution> {
    let warm = pick_warm_start(problem, cfg, prev)?;
    solve_ocp(problem, Some(&warm), cfg.solver)
}

/// Tracks whether ‖ξ_r‖ < ψ_r at every visited node implies all ξ_i margins positive.
struct OnlyLast<'a> {
    design: &'a AuxiliaryDesign,
    reference: &'a dyn Reference,
    last_inside: bool,
    all_inside: bool,
}

impl<'a> OnlyLast<'a> {
    fn new(design: &'a AuxiliaryDesign, reference: &'a dyn Reference) -> Self {
        OnlyLast { design, reference, last_inside: true, all_inside: true }
    }

    fn visit(&mut self, t: f64, x: &[f64]) {
        let (r, m) = (self.design.r, self.design.m);
        let refs = self.reference.stack(t, r - 1);
        let e: Vec<f64> = (0..r * m).map(|k| x[k] - refs[k]).collect();
        self.all_inside &= in_d(t, &e, self.design).0;
        self.last_inside &= strictly_inside(self.design.xi_last_norm(&e), self.design.psi[r - 1].value(t));
    }

    fn holds(&self) -> bool {
        !self.last_inside || self.all_inside
    }
}

/// Funnel MPC with the model as system (perfect model knowledge); also the
/// sampled-data variant when `cfg.warm` is [`WarmStart::Zoh`].
pub fn run_funnel_mpc(
    model: &ControlAffineModel,
    design: &AuxiliaryDesign,
    reference: &dyn Reference,
    x0: &[f64],
    cfg: &MpcConfig,
) -> Result<RunResult> {
    let start = Instant::now();
    let n_iter = cfg.validate()?;
    let monitor = Monitor { reference, psi: design.psi[0].as_ref(), truncate: false };
    let mut pieces: Vec<SimulationTrace> = Vec::new();
    let mut records = Vec::new();
    let mut x = x0.to_vec();
    let mut prev: Option<StepFunction> = None;
    let mut status = RunStatus::Completed;
    for k in 0..n_iter {
        let t_k = cfg.t0 + k as f64 * cfg.delta;
        let problem = OcpProblem {
            model,
            design,
            reference,
            t_hat: t_k,
            horizon: cfg.horizon,
            control_step: cfg.control_step,
            h: cfg.h_model,
            u_max: cfg.u_max,
            lambda_u: cfg.lambda_u,
            u_offset: cfg.u_offset.clone(),
            cost: cfg.cost,
            initial: x.clone(),
        };
        let sol = match solve_step(&problem, cfg, prev.as_ref()) {
            Ok(s) => s,
            Err(Error::NoFeasiblePoint) => {
                status = RunStatus::OcpInfeasible { k };
                break;
            }
            Err(e) => return Err(e),
        };
        let piece = integrate_closed_loop(model, &x, (t_k, t_k + cfg.delta), cfg.h_system, Input::Step(&sol.u_star), Some(&monitor))?;
        let mut check = OnlyLast::new(design, reference);
        piece.rows.iter().for_each(|row| check.visit(row.t, &row.x));
        let ok = check.holds();
        let max_u = piece.rows.iter().map(|r| norm(&r.u_fmpc)).fold(0.0, f64::max);
        records.push(IterationRecord {
            k,
            t: t_k,
            cost: sol.cost.value,
            feasible: sol.feasible,
            solver_iterations: sol.iterations,
            jump: 0.0,
            residual: None,
            only_last_funnel_ok: ok,
            decomposition_ok: true,
            lambda_ok: None,
            max_u_fmpc: max_u,
        });
        let flags = piece.flags();
        x = piece.rows.last().map(|r| r.x.clone()).unwrap_or_default();
        let complete = piece.end_time().is_some_and(|t| (t - (t_k + cfg.delta)).abs() < 1e-9);
        pieces.push(piece);
        prev = Some(sol.u_star);
        if flags & (FLAG_ESCAPED | FLAG_NAN) != 0 || !complete {
            status = RunStatus::Diverged { k };
            break;
        }
    }
    let trace = crate::trace::concatenate(pieces, &[])?;
    Ok(RunResult::finish(trace, records, status, start))
}

/// Sampled-data funnel MPC: controls are step functions on a partition of
/// width `cfg.control_step`, warm-started by the sampled feasibility feedback.
pub fn run_sampled_fmpc(
    model: &ControlAffineModel,
    design: &AuxiliaryDesign,
    reference: &dyn Reference,
    x0: &[f64],
    cfg: &MpcConfig,
    nu: f64,
) -> Result<RunResult> {
    let mut c = cfg.clone();
    c.warm = WarmStart::Zoh { nu };
    run_funnel_mpc(model, design, reference, x0, &c)
}

/// Proper initialisation parameters ε and λ; defaults derive from the design.
pub fn default_lambda(design: &AuxiliaryDesign) -> f64 {
    match (design.r, design.mode) {
        (1, _) => 1.0,
        (_, crate::funnel::DesignMode::Simplified) => 0.5f64.sqrt(),
        _ => (0.5 * (1.0 + design.gamma_margin)).sqrt(),
    }
}

pub fn default_eps(design: &AuxiliaryDesign, gains: &GainSpec) -> f64 {
    let table = crate::feedback::fc_bound_table(0.0, &[], design.r, gains);
    let e = table.eps[design.r - 1];
    if e > 0.0 {
        0.95 * e
    } else {
        0.95 * crate::feedback::fc_bound_table(0.0, &[], 2, gains).eps[1]
    }
}

fn is_proper(
    t: f64,
    cand: &[f64],
    meas: &[f64],
    refs: &[f64],
    design: &AuxiliaryDesign,
    eps: f64,
    lambda: f64,
    gains: &GainSpec,
) -> bool {
    let m = design.m;
    let e: Vec<f64> = cand.iter().zip(refs).map(|(a, b)| a - b).collect();
    if !in_d(t, &e, design).0 {
        return false;
    }
    let psi1 = design.psi[0].value(t);
    let d1 = norm(&e[..m]);
    if !(d1 < lambda * psi1) {
        return false;
    }
    let phi_hat = 1.0 / (psi1 - d1);
    let z: Vec<f64> = meas.iter().zip(cand).map(|(a, b)| a - b).collect();
    match fc_errors(phi_hat, &z, m, gains) {
        Ok(errs) => errs.norms().iter().all(|&n| n < eps),
        Err(_) => false,
    }
}

/// Closest proper (ε, λ) initial output stack on the segment from the
/// measurement towards χ(y_ref)(t); the internal state comes from `carry`.
#[allow(clippy::too_many_arguments)]
pub fn proper_init(
    t: f64,
    measurement: &[f64],
    carry: &[f64],
    design: &AuxiliaryDesign,
    reference: &dyn Reference,
    eps: f64,
    lambda: f64,
    gains: &GainSpec,
) -> Result<Vec<f64>> {
    let rm = design.r * design.m;
    let refs = reference.stack(t, design.r - 1);
    let at = |theta: f64| -> Vec<f64> { (0..rm).map(|k| measurement[k] + theta * (refs[k] - measurement[k])).collect() };
    let ok = |theta: f64| is_proper(t, &at(theta), measurement, &refs, design, eps, lambda, gains);
    // χ(y_ref) is proper exactly when the measurement lies in the ε-envelope.
    if !ok(1.0) {
        return Err(Error::MeasurementOutsideEnvelope { t });
    }
    let n = 400;
    let first = (0..=n).find(|&j| ok(j as f64 / n as f64)).unwrap_or(n);
    let mut theta = first as f64 / n as f64;
    if first > 0 {
        let (mut lo, mut hi) = ((first - 1) as f64 / n as f64, theta);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        theta = hi;
    }
    let mut out = at(theta);
    if !is_proper(t, &out, measurement, &refs, design, eps, lambda, gains) {
        out = at(first as f64 / n as f64);
    }
    out.extend_from_slice(&carry[rm..]);
    Ok(out)
}

/// System and model integrated side by side with u = u_FMPC + u_FC on the system.
struct Coupled<'a> {
    system: &'a ControlAffineModel,
    reference: &'a dyn Reference,
    psi1: &'a dyn FunnelFn,
    fc: Option<GainSpec>,
    r: usize,
    m: usize,
}

impl Coupled<'_> {
    /// (u_FC, φ) at time t.
    fn fc(&self, t: f64, xs: &[f64], xm: &[f64], yref: &mut [f64]) -> Result<(Vec<f64>, f64)> {
        let (r, m) = (self.r, self.m);
        let Some(gains) = &self.fc else {
            return Ok((vec![0.0; m], f64::NAN));
        };
        self.reference.eval(t, 0, yref);
        let phi = adaptive_phi(t, &xm[..m], yref, self.psi1)?;
        let z: Vec<f64> = (0..r * m).map(|k| xs[k] - xm[k]).collect();
        let errs = fc_errors(phi, &z, m, gains)?;
        Ok((fc_output(errs.last(), r, gains)?, phi))
    }

    fn row(&self, t: f64, xs: &[f64], xm: &[f64], u: &[f64], u_fc: Vec<f64>, phi: f64) -> TraceRow {
        let (r, m) = (self.r, self.m);
        let mut yref = vec![0.0; m];
        self.reference.eval(t, 0, &mut yref);
        let psi = self.psi1.value(t);
        TraceRow {
            t,
            x: xs.to_vec(),
            y: xs[..m].to_vec(),
            y_model: xm[..m].to_vec(),
            dy: xs[m..r * m].to_vec(),
            u_fmpc: u.to_vec(),
            u_fc,
            psi,
            phi,
            margin: psi - dist(&xs[..m], &yref),
            flags: if norm(xs) > BLOWUP { FLAG_ESCAPED } else { 0 },
        }
    }

    /// One RK4 step of the coupled system and model. A step after which the
    /// funnel controller is undefined is retried as two half steps, down to
    /// `MAX_HALVINGS` levels; `Ok(false)` reports that it still failed.
    #[allow(clippy::too_many_arguments)]
    fn coupled_step(
        &self,
        model: &ControlAffineModel,
        rk: &mut Rk4,
        s_sys: &mut ModelScratch,
        s_mod: &mut ModelScratch,
        u: &[f64],
        t: f64,
        aug: &mut [f64],
        h: f64,
        depth: u32,
    ) -> Result<bool> {
        const MAX_HALVINGS: u32 = 12;
        let ns = self.system.state_dim();
        let start = aug.to_vec();
        let mut failed = false;
        let mut yr = vec![0.0; self.m];
        let res = rk.step(
            &mut |s, x: &[f64], dx: &mut [f64]| {
                let (xs_, xm_) = x.split_at(ns);
                let (dxs, dxm) = dx.split_at_mut(ns);
                let ufc = match self.fc(s, xs_, xm_, &mut yr) {
                    Ok((v, _)) => v,
                    Err(_) => {
                        failed = true;
                        vec![0.0; self.m]
                    }
                };
                let ut: Vec<f64> = u.iter().zip(&ufc).map(|(p, q)| p + q).collect();
                self.system.rhs(s, xs_, &ut, dxs, s_sys);
                model.rhs(s, xm_, u, dxm, s_mod);
            },
            t,
            aug,
            h,
        );
        let ok = res.is_ok() && !failed && self.fc(t + h, &aug[..ns], &aug[ns..], &mut yr).is_ok();
        if ok || depth >= MAX_HALVINGS {
            res?;
            return Ok(ok);
        }
        aug.copy_from_slice(&start);
        let half = 0.5 * h;
        if !self.coupled_step(model, rk, s_sys, s_mod, u, t, aug, half, depth + 1)? {
            return Ok(false);
        }
        self.coupled_step(model, rk, s_sys, s_mod, u, t + half, aug, half, depth + 1)
    }

    /// Integrates over `window`; returns the trace and whether the loop stayed well defined.
    fn interval(
        &self,
        model: &ControlAffineModel,
        design: &AuxiliaryDesign,
        xs: &mut Vec<f64>,
        xm: &mut Vec<f64>,
        u_star: &StepFunction,
        window: (f64, f64),
        h: f64,
        log: &mut SignalLog,
    ) -> Result<(SimulationTrace, bool, bool)> {
        let (a, b) = window;
        let steps = steps_in(b - a, h).ok_or(Error::StepIncompatibleWithPartition { h, a, b })?;
        let ns = xs.len();
        let mut aug: Vec<f64> = xs.iter().chain(xm.iter()).copied().collect();
        let mut rk = Rk4::new(aug.len());
        let mut s_sys = self.system.scratch();
        let mut s_mod = model.scratch();
        let mut trace = SimulationTrace::new(self.m, self.r);
        let mut yref = vec![0.0; self.m];
        let mut ok = true;
        let mut model_check = OnlyLast::new(design, self.reference);
        for i in 0..=steps {
            let t = a + (b - a) * i as f64 / steps as f64;
            let last = i == steps;
            let u = u_star.eval(if last { t } else { t + 0.5 * h }).to_vec();
            let (u_fc, phi) = match self.fc(t, &aug[..ns], &aug[ns..], &mut yref) {
                Ok(v) => v,
                Err(_) => {
                    ok = false;
                    let mut row = self.row(t, &aug[..ns], &aug[ns..], &u, vec![0.0; self.m], f64::NAN);
                    row.flags |= FLAG_VIOLATED;
                    trace.push(row);
                    break;
                }
            };
            model_check.visit(t, &aug[ns..]);
            log.push(t, &aug[..self.r * self.m], &aug[ns..ns + self.m], &u, &u_fc);
            trace.push(self.row(t, &aug[..ns], &aug[ns..], &u, u_fc, phi));
            if last || trace.flags() & (FLAG_ESCAPED | FLAG_NAN) != 0 {
                ok &= !(trace.flags() & (FLAG_ESCAPED | FLAG_NAN) != 0);
                break;
            }
            let res = self.coupled_step(model, &mut rk, &mut s_sys, &mut s_mod, &u, t, &mut aug, h, 0);
            let failed = matches!(res, Ok(false));
            let res = res.map(|_| ());
            if res.is_err() || failed {
                ok = false;
                let tn = t + h;
                let mut row = self.row(tn, &aug[..ns], &aug[ns..], &u, vec![0.0; self.m], f64::NAN);
                row.flags |= if res.is_err() { FLAG_NAN } else { FLAG_VIOLATED };
                trace.push(row);
                break;
            }
        }
        xs.copy_from_slice(&aug[..ns]);
        xm.copy_from_slice(&aug[ns..]);
        Ok((trace, ok, model_check.holds()))
    }
}

/// Robust funnel MPC: the OCP is solved on `model`, the funnel controller
/// compensates the model-plant mismatch on `system`. With a learner and
/// `cfg.learn_every`, the model is replaced periodically.
#[allow(clippy::too_many_arguments)]
pub fn run_robust_fmpc(
    system: &ControlAffineModel,
    model: &ControlAffineModel,
    design: &AuxiliaryDesign,
    reference: &dyn Reference,
    xs0: &[f64],
    xm0: &[f64],
    cfg: &MpcConfig,
    learner: Option<&mut dyn Learner>,
) -> Result<RunResult> {
    let start = Instant::now();
    let n_iter = cfg.validate()?;
    let (r, m) = (system.r, system.m);
    let rm = r * m;
    if model.r != r || model.m != m || design.r != r {
        return Err(Error::DimensionMismatch { expected: r, got: model.r });
    }
    let coupled = Coupled { system, reference, psi1: design.psi[0].as_ref(), fc: cfg.fc, r, m };
    let gains = cfg.fc.unwrap_or_default();
    let (eps, lambda) = match cfg.init {
        InitStrategy::ProperInit { eps, lambda } => {
            let l = lambda.unwrap_or_else(|| default_lambda(design));
            if l >= 1.0 && r > 1 {
                return Err(Error::Config("lambda = 1 is only admissible for r = 1".into()));
            }
            (eps.unwrap_or_else(|| default_eps(design, &gains)), l)
        }
        _ => (0.0, 1.0),
    };
    let mut learner = learner;
    let mut model = model.clone();
    let mut xs = xs0.to_vec();
    let mut xm = xm0.to_vec();
    let mut log = SignalLog::new(m, design.r * m);
    let mut pieces = Vec::new();
    let mut jumps = Vec::new();
    let mut records = Vec::new();
    let mut prev: Option<StepFunction> = None;
    let mut status = RunStatus::Completed;
    let mut residual = None;
    for k in 0..n_iter {
        let t_k = cfg.t0 + k as f64 * cfg.delta;
        let before = xm.clone();
        match cfg.init {
            InitStrategy::CarryOver => {}
            InitStrategy::ExactOutputMatch => xm[..rm].copy_from_slice(&xs[..rm]),
            InitStrategy::ProperInit { .. } => {
                match proper_init(t_k, &xs[..rm], &xm, design, reference, eps, lambda, &gains) {
                    Ok(v) => xm = v,
                    Err(_) => {
                        status = RunStatus::MeasurementOutsideEnvelope { k };
                        break;
                    }
                }
            }
        }
        let jump = dist(&before, &xm);
        if k > 0 && jump > 0.0 {
            jumps.push(t_k);
        }
        let problem = OcpProblem {
            model: &model,
            design,
            reference,
            t_hat: t_k,
            horizon: cfg.horizon,
            control_step: cfg.control_step,
            h: cfg.h_model,
            u_max: cfg.u_max,
            lambda_u: cfg.lambda_u,
            u_offset: cfg.u_offset.clone(),
            cost: cfg.cost,
            initial: xm.clone(),
        };
        let sol = match solve_step(&problem, cfg, prev.as_ref()) {
            Ok(s) => s,
            Err(Error::NoFeasiblePoint) => {
                status = RunStatus::OcpInfeasible { k };
                break;
            }
            Err(e) => return Err(e),
        };
        let lambda_start = {
            let refs = reference.stack(t_k, r - 1);
            let e: Vec<f64> = (0..rm).map(|i| xm[i] - refs[i]).collect();
            let mut xi1 = vec![0.0; m];
            design.xi_into(0, &e, &mut xi1);
            norm(&xi1) < lambda * design.psi[0].value(t_k)
        };
        let (piece, ok, only_last) = coupled.interval(
            &model,
            design,
            &mut xs,
            &mut xm,
            &sol.u_star,
            (t_k, t_k + cfg.delta),
            cfg.h_system,
            &mut log,
        )?;
        let decomposition_ok = cfg.fc.is_none()
            || piece.rows.iter().all(|row| !row.phi.is_finite() || dist(&row.y, &row.y_model) < 1.0 / row.phi);
        let lambda_ok = matches!(cfg.init, InitStrategy::ProperInit { .. }).then(|| {
            !lambda_start
                || piece.rows.iter().all(|row| {
                    let refs = reference.stack(row.t, 0);
                    dist(&row.y_model, &refs) < lambda * design.psi[0].value(row.t) || r > 1
                })
        });
        let max_u = piece.rows.iter().map(|row| norm(&row.u_fmpc)).fold(0.0, f64::max);
        records.push(IterationRecord {
            k,
            t: t_k,
            cost: sol.cost.value,
            feasible: sol.feasible,
            solver_iterations: sol.iterations,
            jump,
            residual,
            only_last_funnel_ok: only_last,
            decomposition_ok,
            lambda_ok,
            max_u_fmpc: max_u,
        });
        pieces.push(piece);
        prev = Some(sol.u_star);
        if !ok {
            status = RunStatus::Diverged { k };
            break;
        }
        if let (Some(every), Some(l)) = (cfg.learn_every, learner.as_deref_mut()) {
            if (k + 1) % every == 0 && k + 1 < n_iter {
                let t_next = t_k + cfg.delta;
                match l.learn(&log, t_next) {
                    Ok(Some(learned)) => {
                        model = learned.model;
                        let mut x_new = xs[..rm].to_vec();
                        x_new.extend_from_slice(&learned.eta);
                        xm = x_new;
                        residual = Some(learned.residual);
                        prev = None;
                    }
                    Ok(None) => {}
                    Err(e) => {
                        status = RunStatus::LearnerFailed { k, reason: e.to_string() };
                        break;
                    }
                }
            }
        }
    }
    let mut trace = crate::trace::concatenate(pieces, &[])?;
    trace.jumps = jumps.into_iter().map(|t| (t, 0.0)).collect();
    Ok(RunResult::finish(trace, records, status, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::{design_custom, ExpFunnel, FunnelSpec};
    use crate::reference::{ScalarReference, Signal};
    use std::sync::Arc;

    fn two_funnel_design() -> AuxiliaryDesign {
        // ψ₁ ≡ 1, k₁ = 3, ψ₂ ≡ 1/6
        let spec = FunnelSpec::new(Arc::new(ExpFunnel::constant(1.0)), (0.0, 10.0)).unwrap();
        let mut d = design_custom(&spec, &[0.0, 0.0], 1, vec![3.0], 0.5).unwrap();
        d.psi[1] = Arc::new(ExpFunnel::constant(1.0 / 6.0));
        d
    }

    #[test]
    fn proper_init_first_order_matches_measurement() {
        let spec = FunnelSpec::new(Arc::new(ExpFunnel::constant(1.0)), (0.0, 1.0)).unwrap();
        let design = AuxiliaryDesign::first_order(&spec, 1);
        let reference = ScalarReference(Signal::Constant(0.0));
        let out = proper_init(0.0, &[0.4], &[0.1, 7.0], &design, &reference, 0.5, 1.0, &GainSpec::default()).unwrap();
        assert_eq!(out, vec![0.4, 7.0]);
    }

    #[test]
    fn proper_init_at_reference_is_identity() {
        let design = two_funnel_design();
        let reference = ScalarReference(Signal::Constant(0.0));
        let out = proper_init(0.0, &[0.0, 0.0], &[0.3, 0.2, 1.0, 2.0], &design, &reference, 0.5, 0.8, &GainSpec::default()).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn proper_init_moves_away_from_infeasible_measurement() {
        let design = two_funnel_design();
        let reference = ScalarReference(Signal::Constant(0.0));
        let g = GainSpec::default();
        let meas = [0.1, 0.0];
        let out = proper_init(0.0, &meas, &[0.0, 0.0], &design, &reference, 0.5, 0.8, &g).unwrap();
        assert_ne!(&out[..2], &meas);
        assert!(is_proper(0.0, &out, &meas, &[0.0, 0.0], &design, 0.5, 0.8, &g));
        // (2/3, 0) is outside the ε-envelope for any ε < 1
        assert!(matches!(
            proper_init(0.0, &[2.0 / 3.0, 0.0], &[0.0, 0.0], &design, &reference, 0.9, 0.8, &g),
            Err(Error::MeasurementOutsideEnvelope { .. })
        ));
    }

    #[test]
    fn shift_repeats_last_cell() {
        let p = Partition::uniform(0.0, 0.4, 0.1).unwrap();
        let u = StepFunction::new(p, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift_solution(&u, 1), vec![2.0, 3.0, 4.0, 4.0]);
        assert_eq!(shift_solution(&u, 2), vec![3.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        let cfg = MpcConfig::new(1.0, 0.1, 0.5, 1.0, 0.0, 0.01);
        assert_eq!(cfg.validate().unwrap(), 10);
        let mut bad = cfg.clone();
        bad.control_step = 0.03;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.horizon = 0.05;
        assert!(bad.validate().is_err());
    }
}
