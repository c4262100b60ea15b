//! Order-r control-affine models, step-function inputs and fixed-step integration.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::funnel::{AuxiliaryDesign, FunnelFn};
use crate::linalg::{norm, op_norm, sym_lambda_min};
use crate::reference::Reference;
use crate::trace::{SimulationTrace, TraceRow, FLAG_ESCAPED, FLAG_NAN};

pub const BLOWUP: f64 = 1e9;

pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type GainFn = Arc<dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync>;
pub type DisturbanceFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// (z, η, out) ↦ out
pub type InternalFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Linear internal dynamics η̇ = Qη + P z_1 + D_2 with output Σ R_j z_j + Sη.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInternal {
    pub r_mats: Vec<DMatrix<f64>>,
    pub s: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub d2: DVector<f64>,
    pub eta0: DVector<f64>,
}

impl LinearInternal {
    pub fn nu(&self) -> usize {
        self.q.nrows()
    }
}

#[derive(Clone)]
pub struct NonlinearInternal {
    pub nu: usize,
    pub q_dim: usize,
    pub eta0: Vec<f64>,
    pub dynamics: InternalFn,
    pub readout: InternalFn,
}

#[derive(Clone)]
pub enum OperatorSpec {
    /// The operator output is the state stack itself.
    None,
    Linear(LinearInternal),
    Nonlinear(NonlinearInternal),
}

/// y^{(r)} = f(T(z)) + g(T(z))u + d(t) with z = (y, …, y^{(r−1)}).
#[derive(Clone)]
pub struct ControlAffineModel {
    pub name: String,
    pub r: usize,
    pub m: usize,
    pub operator: OperatorSpec,
    pub f: DriftFn,
    pub g: GainFn,
    pub disturbance: Option<DisturbanceFn>,
}

impl fmt::Debug for ControlAffineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match &self.operator {
            OperatorSpec::None => "none".to_string(),
            OperatorSpec::Linear(l) => format!("linear(nu={})", l.nu()),
            OperatorSpec::Nonlinear(n) => format!("nonlinear(nu={})", n.nu),
        };
        f.debug_struct("ControlAffineModel")
            .field("name", &self.name)
            .field("r", &self.r)
            .field("m", &self.m)
            .field("operator", &op)
            .field("disturbed", &self.disturbance.is_some())
            .finish()
    }
}

/// Reusable buffers for right-hand side evaluations.
#[derive(Debug, Clone)]
pub struct ModelScratch {
    pub w: Vec<f64>,
    pub f: Vec<f64>,
    pub g: DMatrix<f64>,
    pub d: Vec<f64>,
}

impl ControlAffineModel {
    /// Linear model y^{(r)} = Σ R_j y^{(j−1)} + Sη + D_1 + Γu.
    pub fn linear(name: &str, m: usize, internal: LinearInternal, gamma: DMatrix<f64>, d1: DVector<f64>) -> Self {
        let r = internal.r_mats.len();
        let d1 = d1.clone();
        let f: DriftFn = Arc::new(move |w, out| {
            for (o, (wi, di)) in out.iter_mut().zip(w.iter().zip(d1.iter())) {
                *o = wi + di;
            }
        });
        let g: GainFn = Arc::new(move |_, out| out.copy_from(&gamma));
        ControlAffineModel {
            name: name.to_string(),
            r,
            m,
            operator: OperatorSpec::Linear(internal),
            f,
            g,
            disturbance: None,
        }
    }

    /// Integrator chain y^{(r)} = u.
    pub fn integrator(r: usize, m: usize) -> Self {
        ControlAffineModel {
            name: "integrator".into(),
            r,
            m,
            operator: OperatorSpec::None,
            f: Arc::new(|_, out| out.iter_mut().for_each(|v| *v = 0.0)),
            g: Arc::new(|_, out| out.fill_with_identity()),
            disturbance: None,
        }
    }

    pub fn with_disturbance(mut self, d: DisturbanceFn) -> Self {
        self.disturbance = Some(d);
        self
    }

    pub fn nu(&self) -> usize {
        match &self.operator {
            OperatorSpec::None => 0,
            OperatorSpec::Linear(l) => l.nu(),
            OperatorSpec::Nonlinear(n) => n.nu,
        }
    }

    pub fn q_dim(&self) -> usize {
        match &self.operator {
            OperatorSpec::None => self.r * self.m,
            OperatorSpec::Linear(_) => self.m,
            OperatorSpec::Nonlinear(n) => n.q_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.r * self.m + self.nu()
    }

    pub fn eta0(&self) -> Vec<f64> {
        match &self.operator {
            OperatorSpec::None => vec![],
            OperatorSpec::Linear(l) => l.eta0.iter().copied().collect(),
            OperatorSpec::Nonlinear(n) => n.eta0.clone(),
        }
    }

    /// Stacks the output stack χ(y)(t0) with the operator's initial internal state.
    pub fn initial_state(&self, chi: &[f64]) -> Vec<f64> {
        let mut x = chi.to_vec();
        x.extend(self.eta0());
        x
    }

    pub fn scratch(&self) -> ModelScratch {
        ModelScratch {
            w: vec![0.0; self.q_dim()],
            f: vec![0.0; self.m],
            g: DMatrix::zeros(self.m, self.m),
            d: vec![0.0; self.m],
        }
    }

    /// Evaluates f(T(z)) + d(t) into `s.f` and g(T(z)) into `s.g`.
    pub fn top_terms(&self, t: f64, x: &[f64], s: &mut ModelScratch) {
        let rm = self.r * self.m;
        let (z, eta) = x.split_at(rm);
        match &self.operator {
            OperatorSpec::None => s.w.copy_from_slice(z),
            OperatorSpec::Linear(l) => {
                for i in 0..self.m {
                    let mut acc = 0.0;
                    for (j, rj) in l.r_mats.iter().enumerate() {
                        for k in 0..self.m {
                            acc += rj[(i, k)] * z[j * self.m + k];
                        }
                    }
                    for (k, e) in eta.iter().enumerate() {
                        acc += l.s[(i, k)] * e;
                    }
                    s.w[i] = acc;
                }
            }
            OperatorSpec::Nonlinear(n) => (n.readout)(z, eta, &mut s.w),
        }
        (self.f)(&s.w, &mut s.f);
        (self.g)(&s.w, &mut s.g);
        if let Some(d) = &self.disturbance {
            d(t, &mut s.d);
            for (fi, di) in s.f.iter_mut().zip(&s.d) {
                *fi += di;
            }
        }
    }

    /// Right-hand side of the stacked first-order system.
    pub fn rhs(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64], s: &mut ModelScratch) {
        let m = self.m;
        let rm = self.r * m;
        dx[..rm - m].copy_from_slice(&x[m..rm]);
        self.top_terms(t, x, s);
        for i in 0..m {
            let mut acc = s.f[i];
            for k in 0..m {
                acc += s.g[(i, k)] * u[k];
            }
            dx[rm - m + i] = acc;
        }
        let (z, eta) = x.split_at(rm);
        let deta = &mut dx[rm..];
        match &self.operator {
            OperatorSpec::None => {}
            OperatorSpec::Linear(l) => {
                for i in 0..l.nu() {
                    let mut acc = l.d2[i];
                    for (k, e) in eta.iter().enumerate() {
                        acc += l.q[(i, k)] * e;
                    }
                    for k in 0..m {
                        acc += l.p[(i, k)] * z[k];
                    }
                    deta[i] = acc;
                }
            }
            OperatorSpec::Nonlinear(n) => (n.dynamics)(z, eta, deta),
        }
    }
}

/// Strictly increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub times: Vec<f64>,
    pub uniform_step: Option<f64>,
}

impl Partition {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("partition must be strictly increasing with at least one cell".into()));
        }
        Ok(Partition { times, uniform_step: None })
    }

    /// Uniform grid on [a, b]; `step` must divide the interval.
    pub fn uniform(a: f64, b: f64, step: f64) -> Result<Self> {
        let n = ((b - a) / step).round();
        if n < 1.0 || ((b - a) - n * step).abs() > 1e-9 * (b - a).abs().max(1.0) {
            return Err(Error::Config(format!("step {step} does not divide [{a}, {b}]")));
        }
        let n = n as usize;
        let times = (0..=n).map(|i| if i == n { b } else { a + i as f64 * step }).collect();
        Ok(Partition { times, uniform_step: Some(step) })
    }

    pub fn cells(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the right-open cell containing t (the last cell is closed).
    pub fn cell_index(&self, t: f64) -> usize {
        let n = self.cells();
        if let Some(step) = self.uniform_step {
            let raw = ((t - self.times[0]) / step + 1e-9).floor();
            return (raw.max(0.0) as usize).min(n - 1);
        }
        match self.times.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }
}

/// Piecewise-constant ℝ^m signal on a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    pub partition: Partition,
    pub m: usize,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn new(partition: Partition, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != partition.cells() * m {
            return Err(Error::DimensionMismatch { expected: partition.cells() * m, got: values.len() });
        }
        Ok(StepFunction { partition, m, values })
    }

    pub fn constant(partition: Partition, value: &[f64]) -> Self {
        let m = value.len();
        let values = value.iter().copied().cycle().take(partition.cells() * m).collect();
        StepFunction { partition, m, values }
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn eval(&self, t: f64) -> &[f64] {
        self.cell(self.partition.cell_index(t))
    }

    pub fn max_norm(&self) -> f64 {
        self.values.chunks(self.m).map(norm).fold(0.0, f64::max)
    }
}

/// Classical fourth-order Runge–Kutta stepper with preallocated stages.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    /// Advances `x` from t to t + h in place.
    pub fn step<F: FnMut(f64, &[f64], &mut [f64])>(&mut self, field: &mut F, t: f64, x: &mut [f64], h: f64) -> Result<()> {
        let n = x.len();
        field(t, x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        field(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        field(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        field(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t + h });
        }
        Ok(())
    }
}

/// One RK4 step of ẋ = field(t, x).
pub fn rk4_step<F: FnMut(f64, &[f64], &mut [f64])>(mut field: F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    Rk4::new(x.len()).step(&mut field, t, &mut out, h)?;
    Ok(out)
}

/// Number of steps of size ≈ h covering `len`; errors unless h divides len.
pub fn steps_in(len: f64, h: f64) -> Option<usize> {
    let n = (len / h).round();
    (n >= 1.0 && (len - n * h).abs() <= 1e-9 * len.max(h)).then_some(n as usize)
}

/// Control signal of a closed-loop integration.
pub enum Input<'a> {
    Step(&'a StepFunction),
    /// Evaluated at every Runge–Kutta stage.
    Feedback(&'a mut dyn FnMut(f64, &[f64], &mut [f64])),
    /// Evaluated on the grid t0 + i·period and held in between.
    Sampled { period: f64, law: &'a mut dyn FnMut(f64, &[f64], &mut [f64]) },
}

/// Funnel containment monitor attached to an integration.
pub struct Monitor<'a> {
    pub reference: &'a dyn Reference,
    pub psi: &'a dyn FunnelFn,
    /// Stop at the first violated node.
    pub truncate: bool,
}

/// Builds the trace row of a single-model run.
pub fn model_row(model: &ControlAffineModel, t: f64, x: &[f64], u: &[f64], monitor: Option<&Monitor>) -> TraceRow {
    let m = model.m;
    let rm = model.r * m;
    let y = x[..m].to_vec();
    let (psi, margin) = match monitor {
        Some(mon) => {
            let mut yr = vec![0.0; m];
            mon.reference.eval(t, 0, &mut yr);
            let p = mon.psi.value(t);
            (p, p - crate::linalg::dist(&y, &yr))
        }
        None => (f64::NAN, f64::NAN),
    };
    let escaped = norm(x) > BLOWUP;
    TraceRow {
        t,
        x: x.to_vec(),
        y: y.clone(),
        y_model: y,
        dy: x[m..rm].to_vec(),
        u_fmpc: u.to_vec(),
        u_fc: vec![0.0; m],
        psi,
        phi: f64::NAN,
        margin,
        flags: if escaped { FLAG_ESCAPED } else { 0 },
    }
}

/// Integrates the model from `x0` over `window` with step `h`.
///
/// The trace has one row per grid node; the input recorded at a node is the
/// value applied on the following step. Blow-up, non-finite states and (when
/// requested) funnel violations end the integration early.
pub fn integrate_closed_loop(
    model: &ControlAffineModel,
    x0: &[f64],
    window: (f64, f64),
    h: f64,
    input: Input,
    monitor: Option<&Monitor>,
) -> Result<SimulationTrace> {
    let (a, b) = window;
    let n = x0.len();
    if n != model.state_dim() {
        return Err(Error::DimensionMismatch { expected: model.state_dim(), got: n });
    }
    let m = model.m;
    // Node grid: cell boundaries of a step input must lie on it.
    let mut grid: Vec<f64> = Vec::new();
    match &input {
        Input::Step(sf) => {
            let p = &sf.partition;
            for c in 0..p.cells() {
                let (ca, cb) = (p.times[c], p.times[c + 1]);
                if cb <= a || ca >= b {
                    continue;
                }
                let (ca, cb) = (ca.max(a), cb.min(b));
                let k = steps_in(cb - ca, h).ok_or(Error::StepIncompatibleWithPartition { h, a: ca, b: cb })?;
                for i in 0..k {
                    grid.push(ca + (cb - ca) * i as f64 / k as f64);
                }
            }
            grid.push(b);
        }
        _ => {
            let k = steps_in(b - a, h).ok_or(Error::StepIncompatibleWithPartition { h, a, b })?;
            grid.extend((0..=k).map(|i| a + (b - a) * i as f64 / k as f64));
        }
    }
    let hold_every = match &input {
        Input::Sampled { period, .. } => {
            Some(steps_in(*period, h).ok_or(Error::StepIncompatibleWithPartition { h, a, b: a + period })?)
        }
        _ => None,
    };
    let mut input = input;
    let mut trace = SimulationTrace::new(m, model.r);
    let mut x = x0.to_vec();
    let mut u = vec![0.0; m];
    let mut scratch = model.scratch();
    let mut rk = Rk4::new(n);
    for (i, &t) in grid.iter().enumerate() {
        let last = i + 1 == grid.len();
        match &mut input {
            Input::Step(sf) => u.copy_from_slice(sf.eval(if last { t } else { 0.5 * (t + grid[i + 1]) })),
            Input::Feedback(law) => law(t, &x, &mut u),
            Input::Sampled { law, .. } => {
                if i % hold_every.unwrap() == 0 {
                    law(t, &x, &mut u);
                }
            }
        }
        let row = model_row(model, t, &x, &u, monitor);
        trace.push(row);
        let flags = trace.flags();
        let stop = flags & (FLAG_ESCAPED | FLAG_NAN) != 0
            || (monitor.is_some_and(|mo| mo.truncate) && trace.violated());
        if last || stop {
            break;
        }
        let h_i = grid[i + 1] - t;
        let res = match &mut input {
            Input::Feedback(law) => {
                let mut uu = vec![0.0; m];
                rk.step(
                    &mut |s, xs: &[f64], dx: &mut [f64]| {
                        law(s, xs, &mut uu);
                        model.rhs(s, xs, &uu, dx, &mut scratch)
                    },
                    t,
                    &mut x,
                    h_i,
                )
            }
            _ => rk.step(&mut |s, xs: &[f64], dx: &mut [f64]| model.rhs(s, xs, &u, dx, &mut scratch), t, &mut x, h_i),
        };
        if res.is_err() {
            let mut row = model_row(model, grid[i + 1], &x, &u, monitor);
            row.flags |= FLAG_NAN;
            trace.push(row);
            break;
        }
    }
    Ok(trace)
}

/// Uniform bounds on the dynamics over a compact set of states.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DynBounds {
    pub f_max: f64,
    pub g_max: f64,
    pub g_inv_max: f64,
    pub g_min: Option<f64>,
}

pub enum BoundsSource {
    Analytic(DynBounds),
    /// Sample states: the output stack from the funnel tube around the
    /// reference and the internal state from the ball of radius `eta_bound`.
    Sampling { samples: usize, eta_bound: f64, horizon: (f64, f64), seed: u64, require_g_min: bool },
}

pub fn dynamics_bounds(
    model: &ControlAffineModel,
    design: &AuxiliaryDesign,
    reference: &dyn Reference,
    source: BoundsSource,
) -> Result<DynBounds> {
    let (samples, eta_bound, horizon, seed, require) = match source {
        BoundsSource::Analytic(b) => return Ok(b),
        BoundsSource::Sampling { samples, eta_bound, horizon, seed, require_g_min } => {
            (samples, eta_bound, horizon, seed, require_g_min)
        }
    };
    let (r, m, nu) = (model.r, model.m, model.nu());
    let sinv = crate::funnel::xi_matrix(&design.gains, r, m)
        .try_inverse()
        .expect("block unit lower triangular");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = model.scratch();
    let mut out = DynBounds { f_max: 0.0, g_max: 0.0, g_inv_max: 0.0, g_min: Some(f64::INFINITY) };
    let mut x = vec![0.0; model.state_dim()];
    let mut yr = vec![0.0; r * m];
    for _ in 0..samples {
        let t = rng.gen_range(horizon.0..=horizon.1);
        reference.eval(t, r - 1, &mut yr);
        let mut xi = DVector::zeros(r * m);
        for i in 0..r {
            let rad = design.psi[i].value(t);
            let v = sample_ball(&mut rng, m, rad);
            for l in 0..m {
                xi[i * m + l] = v[l];
            }
        }
        let e = &sinv * xi;
        for k in 0..r * m {
            x[k] = e[k] + yr[k];
        }
        let eta = sample_ball(&mut rng, nu, eta_bound);
        x[r * m..].copy_from_slice(&eta);
        model.top_terms(t, &x, &mut scratch);
        out.f_max = out.f_max.max(norm(&scratch.f));
        out.g_max = out.g_max.max(op_norm(&scratch.g));
        let inv = scratch.g.clone().try_inverse().ok_or(Error::SingularG)?;
        out.g_inv_max = out.g_inv_max.max(op_norm(&inv));
        let lmin = sym_lambda_min(&scratch.g);
        if lmin <= 0.0 {
            if require {
                return Err(Error::NotPositiveDefinite);
            }
            out.g_min = None;
        } else if let Some(gm) = out.g_min {
            out.g_min = Some(gm.min(lmin));
        }
    }
    Ok(out)
}

fn sample_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    if n == 0 {
        return vec![];
    }
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    let scale = if nv > 0.0 { radius * rng.gen_range(0.0..1.0f64).powf(1.0 / n as f64) / nv } else { 0.0 };
    v.iter_mut().for_each(|c| *c *= scale);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rk4_constant_field() {
        let x = rk4_step(|_, _, dx: &mut [f64]| dx.fill(0.0), 0.0, &[3.5, -1.0], 0.7).unwrap();
        assert_eq!(x, vec![3.5, -1.0]);
    }

    #[test]
    fn rk4_exact_on_chain() {
        let h = 0.37;
        let x = rk4_step(|_, x: &[f64], dx: &mut [f64]| {
            dx[0] = x[1];
            dx[1] = 0.0;
        }, 0.0, &[0.0, 1.0], h)
        .unwrap();
        assert_eq!(x[0], h);
    }

    #[test]
    fn rk4_hand_step_on_decay() {
        let h: f64 = 0.1;
        let x = rk4_step(|_, x: &[f64], dx: &mut [f64]| dx[0] = -x[0], 0.0, &[1.0], h).unwrap();
        let expected = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert_relative_eq!(x[0], expected, max_relative = 1e-15);
        assert_relative_eq!(x[0], 0.9048375, epsilon = 1e-7);
    }

    #[test]
    fn rk4_flags_non_finite() {
        let res = rk4_step(|_, _, dx: &mut [f64]| dx[0] = f64::NAN, 0.0, &[1.0], 0.1);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn integrator_chain_free_motion() {
        let model = ControlAffineModel::integrator(2, 1);
        let p = Partition::uniform(0.0, 1.0, 0.25).unwrap();
        let u = StepFunction::constant(p, &[0.0]);
        let tr = integrate_closed_loop(&model, &[0.0, 1.0], (0.0, 1.0), 0.05, Input::Step(&u), None).unwrap();
        assert_eq!(tr.rows.len(), 21);
        for row in &tr.rows {
            assert_relative_eq!(row.y[0], row.t, epsilon = 1e-14);
        }
    }

    #[test]
    fn step_incompatible_with_partition() {
        let model = ControlAffineModel::integrator(1, 1);
        let p = Partition::uniform(0.0, 1.0, 0.25).unwrap();
        let u = StepFunction::constant(p, &[1.0]);
        let res = integrate_closed_loop(&model, &[0.0], (0.0, 1.0), 0.1, Input::Step(&u), None);
        assert!(matches!(res, Err(Error::StepIncompatibleWithPartition { .. })));
    }

    #[test]
    fn step_function_right_open_cells() {
        let p = Partition::uniform(0.0, 1.0, 0.5).unwrap();
        let u = StepFunction::new(p, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(u.eval(0.0), &[1.0]);
        assert_eq!(u.eval(0.4999), &[1.0]);
        assert_eq!(u.eval(0.5), &[2.0]);
        assert_eq!(u.eval(1.0), &[2.0]);
        let q = Partition::new(vec![0.0, 0.3, 1.0]).unwrap();
        let v = StepFunction::new(q, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(v.eval(0.3), &[2.0]);
        assert_eq!(v.eval(0.29), &[1.0]);
    }

    #[test]
    fn stage_inputs_stay_in_cell() {
        // The field records every input it sees; all must equal the cell value.
        let p = Partition::uniform(0.0, 0.4, 0.1).unwrap();
        let u = StepFunction::new(p, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = 0.025;
        for c in 0..4 {
            let t0 = 0.1 * c as f64;
            for j in 0..4 {
                let t = t0 + j as f64 * h;
                for s in [t, t + 0.5 * h, t + 0.999 * h] {
                    assert_eq!(u.eval(s), u.cell(c));
                }
            }
        }
    }

    #[test]
    fn identity_gain_bounds() {
        let model = ControlAffineModel::integrator(1, 2);
        let spec = crate::funnel::FunnelSpec::new(Arc::new(crate::funnel::ExpFunnel::constant(1.0)), (0.0, 1.0)).unwrap();
        let design = AuxiliaryDesign::first_order(&spec, 2);
        let reference = crate::reference::VectorReference(vec![crate::reference::Signal::Constant(0.0); 2]);
        let b = dynamics_bounds(
            &model,
            &design,
            &reference,
            BoundsSource::Sampling { samples: 200, eta_bound: 0.0, horizon: (0.0, 1.0), seed: 1, require_g_min: true },
        )
        .unwrap();
        assert_eq!(b.f_max, 0.0);
        assert_relative_eq!(b.g_max, 1.0, max_relative = 1e-12);
        assert_relative_eq!(b.g_inv_max, 1.0, max_relative = 1e-12);
        assert_relative_eq!(b.g_min.unwrap(), 1.0, max_relative = 1e-12);
    }
}
