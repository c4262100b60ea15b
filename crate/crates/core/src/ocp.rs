//! Finite-horizon optimal control over step functions with a funnel stage
//! cost, the constructive feasibility feedback and the resulting input bound.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::funnel::{strictly_inside, AuxiliaryDesign, ExtendedCost, StageCost};
use crate::linalg::{norm, project_ball};
use crate::model::{steps_in, ControlAffineModel, DynBounds, ModelScratch, Partition, Rk4, StepFunction, BLOWUP};
use crate::reference::Reference;

/// The optimal control problem on [t̂, t̂ + T].
#[derive(Debug, Clone)]
pub struct OcpProblem<'a> {
    pub model: &'a ControlAffineModel,
    pub design: &'a AuxiliaryDesign,
    pub reference: &'a dyn Reference,
    pub t_hat: f64,
    pub horizon: f64,
    /// Length of the cells of the control partition.
    pub control_step: f64,
    /// Runge–Kutta step; must divide `control_step`.
    pub h: f64,
    pub u_max: f64,
    pub lambda_u: f64,
    pub u_offset: Option<Vec<f64>>,
    pub cost: StageCost,
    /// Model state (output stack and internal state) at t̂.
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative cost decrease below which the descent stops.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iter: 200, tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub u_star: StepFunction,
    pub cost: ExtendedCost,
    pub feasible: bool,
    pub iterations: usize,
    pub warm_start_cost: ExtendedCost,
}

/// Problem data evaluated once per solve: reference stacks and ψ_r on the node grid.
pub struct Prepared<'a> {
    pub problem: &'a OcpProblem<'a>,
    pub partition: Partition,
    pub steps_per_cell: usize,
    pub h: f64,
    ref_stack: Vec<f64>,
    psi_r: Vec<f64>,
    rm: usize,
}

struct Sim {
    rk: Rk4,
    scratch: ModelScratch,
    x: Vec<f64>,
    e: Vec<f64>,
}

impl<'a> Prepared<'a> {
    pub fn new(problem: &'a OcpProblem<'a>) -> Result<Self> {
        let p = problem;
        let partition = Partition::uniform(p.t_hat, p.t_hat + p.horizon, p.control_step)?;
        let spc = steps_in(p.control_step, p.h).ok_or(Error::StepIncompatibleWithPartition {
            h: p.h,
            a: p.t_hat,
            b: p.t_hat + p.control_step,
        })?;
        let h = p.control_step / spc as f64;
        let nodes = partition.cells() * spc + 1;
        let (r, m) = (p.model.r, p.model.m);
        let rm = r * m;
        let mut ref_stack = vec![0.0; nodes * rm];
        let mut psi_r = vec![0.0; nodes];
        let mut buf = vec![0.0; rm];
        for i in 0..nodes {
            let t = node_time(&partition, spc, h, i);
            p.reference.eval(t, r - 1, &mut buf);
            ref_stack[i * rm..(i + 1) * rm].copy_from_slice(&buf);
            psi_r[i] = p.design.psi[r - 1].value(t);
        }
        Ok(Prepared { problem, partition, steps_per_cell: spc, h, ref_stack, psi_r, rm })
    }

    fn sim(&self) -> Sim {
        let n = self.problem.model.state_dim();
        Sim { rk: Rk4::new(n), scratch: self.problem.model.scratch(), x: vec![0.0; n], e: vec![0.0; self.rm] }
    }

    pub fn node_time(&self, i: usize) -> f64 {
        node_time(&self.partition, self.steps_per_cell, self.h, i)
    }

    fn control_term(&self, u: &[f64]) -> f64 {
        let p = self.problem;
        if p.lambda_u == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for (l, v) in u.iter().enumerate() {
            let d = v - p.u_offset.as_ref().map_or(0.0, |o| o[l]);
            s += d * d;
        }
        p.lambda_u * s
    }

    fn error_term(&self, node: usize, x: &[f64], e: &mut [f64]) -> ExtendedCost {
        let rm = self.rm;
        for k in 0..rm {
            e[k] = x[k] - self.ref_stack[node * rm + k];
        }
        let n = self.problem.design.xi_last_norm(e);
        self.problem.cost.error_term(n, self.psi_r[node])
    }

    /// Simulates from the start of `cell` with state `sim.x` and accumulated
    /// cost `acc`; optionally records (state, cost) at every later cell start.
    fn rollout(&self, values: &[f64], cell: usize, sim: &mut Sim, acc: f64, mut store: Option<&mut Vec<(Vec<f64>, f64)>>) -> ExtendedCost {
        let p = self.problem;
        let m = p.model.m;
        let model = p.model;
        let mut acc = acc;
        let cells = self.partition.cells();
        for c in cell..cells {
            if let Some(st) = store.as_deref_mut() {
                st.push((sim.x.clone(), acc));
            }
            let u = &values[c * m..(c + 1) * m];
            let cu = self.control_term(u);
            for j in 0..self.steps_per_cell {
                let node = c * self.steps_per_cell + j;
                let t = self.node_time(node);
                let stage = self.error_term(node, &sim.x, &mut sim.e);
                if stage.infinite {
                    return ExtendedCost::INFINITE;
                }
                acc += self.h * (stage.value + cu);
                let scratch = &mut sim.scratch;
                let ok = sim.rk.step(&mut |s, xs: &[f64], dx: &mut [f64]| model.rhs(s, xs, u, dx, scratch), t, &mut sim.x, self.h);
                if ok.is_err() || norm(&sim.x) > BLOWUP {
                    return ExtendedCost::INFINITE;
                }
            }
        }
        let last = cells * self.steps_per_cell;
        if self.error_term(last, &sim.x, &mut sim.e).infinite {
            return ExtendedCost::INFINITE;
        }
        ExtendedCost::finite(acc)
    }

    pub fn cost(&self, values: &[f64]) -> ExtendedCost {
        let mut sim = self.sim();
        sim.x.copy_from_slice(&self.problem.initial);
        self.rollout(values, 0, &mut sim, 0.0, None)
    }

    fn cost_with_prefix(&self, values: &[f64]) -> (ExtendedCost, Vec<(Vec<f64>, f64)>) {
        let mut sim = self.sim();
        sim.x.copy_from_slice(&self.problem.initial);
        let mut prefix = Vec::with_capacity(self.partition.cells());
        let c = self.rollout(values, 0, &mut sim, 0.0, Some(&mut prefix));
        (c, prefix)
    }

    /// Central finite-difference gradient; one-sided where one side is infinite.
    fn gradient(&self, values: &[f64], base: f64, prefix: &[(Vec<f64>, f64)]) -> Vec<f64> {
        let m = self.problem.model.m;
        let mut g = vec![0.0; values.len()];
        let mut sim = self.sim();
        let mut trial = values.to_vec();
        for c in 0..self.partition.cells() {
            for l in 0..m {
                let k = c * m + l;
                let eps = 1e-6 * values[k].abs().max(1.0);
                let mut eval = |delta: f64, trial: &mut Vec<f64>| {
                    trial[k] = values[k] + delta;
                    sim.x.copy_from_slice(&prefix[c].0);
                    let v = self.rollout(trial, c, &mut sim, prefix[c].1, None);
                    trial[k] = values[k];
                    v
                };
                let plus = eval(eps, &mut trial);
                let minus = eval(-eps, &mut trial);
                g[k] = match (plus.infinite, minus.infinite) {
                    (false, false) => (plus.value - minus.value) / (2.0 * eps),
                    (false, true) => (plus.value - base) / eps,
                    (true, false) => (base - minus.value) / eps,
                    (true, true) => 0.0,
                };
            }
        }
        g
    }

    fn project(&self, values: &mut [f64]) {
        let m = self.problem.model.m;
        for cell in values.chunks_mut(m) {
            project_ball(cell, self.problem.u_max);
        }
    }
}

fn node_time(partition: &Partition, spc: usize, h: f64, i: usize) -> f64 {
    let c = i / spc;
    let j = i % spc;
    if c >= partition.cells() {
        partition.end()
    } else {
        partition.times[c] + j as f64 * h
    }
}

/// Cost functional J(u) by left-rectangle quadrature on the Runge–Kutta grid.
pub fn cost_j(u: &StepFunction, problem: &OcpProblem) -> Result<ExtendedCost> {
    let prep = Prepared::new(problem)?;
    Ok(prep.cost(&u.values))
}

/// Projected gradient descent with Barzilai–Borwein steps and Armijo backtracking.
pub fn solve_ocp(problem: &OcpProblem, warm_start: Option<&StepFunction>, opts: SolverOptions) -> Result<OcpSolution> {
    let prep = Prepared::new(problem)?;
    let warm = match warm_start {
        Some(w) => w.clone(),
        None => feasibility_warm_start(problem)?,
    };
    let mut u = warm.values.clone();
    prep.project(&mut u);
    let (mut j, prefix) = prep.cost_with_prefix(&u);
    let warm_cost = j;
    if j.infinite {
        return Err(Error::NoFeasiblePoint);
    }
    let mut g = prep.gradient(&u, j.value, &prefix);
    let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let scale = problem.u_max.max(1.0);
    let mut alpha = if gmax > 0.0 { 0.1 * scale / gmax } else { 0.0 };
    let mut iterations = 0;
    while iterations < opts.max_iter && alpha > 0.0 {
        iterations += 1;
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..40 {
            let mut cand: Vec<f64> = u.iter().zip(&g).map(|(ui, gi)| ui - a * gi).collect();
            prep.project(&mut cand);
            let dec: f64 = u.iter().zip(&cand).zip(&g).map(|((ui, ci), gi)| gi * (ui - ci)).sum();
            if dec <= 0.0 {
                break;
            }
            let (jc, pc) = prep.cost_with_prefix(&cand);
            if !jc.infinite && jc.value <= j.value - 1e-4 * dec {
                accepted = Some((cand, jc, pc, a));
                break;
            }
            a *= 0.5;
        }
        let Some((cand, jc, pc, a_used)) = accepted else { break };
        let improvement = j.value - jc.value;
        let g_new = prep.gradient(&cand, jc.value, &pc);
        let s: Vec<f64> = cand.iter().zip(&u).map(|(c, o)| c - o).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(n, o)| n - o).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        alpha = if sy > 0.0 { ss / sy } else { 2.0 * a_used };
        u = cand;
        j = jc;
        g = g_new;
        if improvement <= opts.tol * (1.0 + j.value.abs()) {
            break;
        }
    }
    let u_star = StepFunction::new(prep.partition.clone(), problem.model.m, u)?;
    Ok(OcpSolution { u_star, cost: j, feasible: true, iterations, warm_start_cost: warm_cost })
}

/// The feedback that keeps ‖ξ_r/ψ_r‖ constant along the model.
pub struct FeasibilityFeedback<'a> {
    pub model: &'a ControlAffineModel,
    pub design: &'a AuxiliaryDesign,
    pub reference: &'a dyn Reference,
    scratch: ModelScratch,
    refs: Vec<f64>,
    e: Vec<f64>,
    xi_r: Vec<f64>,
}

impl<'a> FeasibilityFeedback<'a> {
    pub fn new(model: &'a ControlAffineModel, design: &'a AuxiliaryDesign, reference: &'a dyn Reference) -> Self {
        let (r, m) = (model.r, model.m);
        FeasibilityFeedback {
            model,
            design,
            reference,
            scratch: model.scratch(),
            refs: vec![0.0; (r + 1) * m],
            e: vec![0.0; r * m],
            xi_r: vec![0.0; m],
        }
    }

    /// u = g⁻¹(−f + y_ref^{(r)} − Σ_j c_{r,j} e_{j+1} + ξ_r ψ̇_r/ψ_r).
    pub fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (r, m) = (self.model.r, self.model.m);
        self.reference.eval(t, r, &mut self.refs);
        for k in 0..r * m {
            self.e[k] = x[k] - self.refs[k];
        }
        self.design.xi_into(r - 1, &self.e, &mut self.xi_r);
        let psi = &self.design.psi[r - 1];
        let ratio = psi.deriv(t) / psi.value(t);
        self.model.top_terms(t, x, &mut self.scratch);
        let coeffs = &self.design.coeffs()[r - 1];
        let mut v = nalgebra::DVector::zeros(m);
        for l in 0..m {
            let mut acc = self.refs[r * m + l] - self.scratch.f[l] + self.xi_r[l] * ratio;
            for (j, &c) in coeffs.iter().enumerate().take(r - 1) {
                acc -= c * self.e[(j + 1) * m + l];
            }
            v[l] = acc;
        }
        let sol = self.scratch.g.clone().lu().solve(&v).ok_or(Error::SingularG)?;
        if sol.iter().any(|s| !s.is_finite()) {
            return Err(Error::SingularG);
        }
        out.copy_from_slice(sol.as_slice());
        Ok(())
    }
}

impl FeasibilityFeedback<'_> {
    /// Unit input direction −g⁻¹ξ_r/‖g⁻¹ξ_r‖ at the state of the last [`eval`](Self::eval).
    fn inward(&self) -> Option<DVector<f64>> {
        let xi = DVector::from_column_slice(&self.xi_r);
        let d = self.scratch.g.clone().lu().solve(&xi)?;
        let n = d.norm();
        (n > 0.0 && n.is_finite()).then(|| -d / n)
    }
}

/// Largest ‖ξ_r‖/ψ_r over the nodes of cell `c` and the ratio at its end, with `x` advanced.
fn run_cell(prep: &Prepared, c: usize, x: &mut [f64], u: &[f64], rk: &mut Rk4, scratch: &mut ModelScratch, e: &mut [f64]) -> (f64, f64) {
    let model = prep.problem.model;
    let design = prep.problem.design;
    let rm = prep.rm;
    let mut worst: f64 = 0.0;
    let mut last = 0.0;
    for j in 0..prep.steps_per_cell {
        let node = c * prep.steps_per_cell + j;
        let s = prep.node_time(node);
        if rk.step(&mut |tt, xs: &[f64], dx: &mut [f64]| model.rhs(tt, xs, u, dx, scratch), s, x, prep.h).is_err() {
            return (f64::INFINITY, f64::INFINITY);
        }
        let next = node + 1;
        for k in 0..rm {
            e[k] = x[k] - prep.ref_stack[next * rm + k];
        }
        last = design.xi_last_norm(e) / prep.psi_r[next];
        if !last.is_finite() {
            return (f64::INFINITY, f64::INFINITY);
        }
        worst = worst.max(last);
    }
    (worst, last)
}

/// Sample-and-hold of the feasibility feedback on the control partition,
/// projected onto the input ball. On cells where the held value drives
/// ‖ξ_r‖/ψ_r to the boundary, the value is moved towards
/// u_max·(−g⁻¹ξ_r)/‖g⁻¹ξ_r‖ by bisection until the ratio at the end of the
/// cell no longer exceeds max(its start value, ½).
pub fn feasibility_warm_start(problem: &OcpProblem) -> Result<StepFunction> {
    let prep = Prepared::new(problem)?;
    let model = problem.model;
    let m = model.m;
    let rm = prep.rm;
    let mut fb = FeasibilityFeedback::new(model, problem.design, problem.reference);
    let mut rk = Rk4::new(model.state_dim());
    let mut scratch = model.scratch();
    let mut x = problem.initial.clone();
    let mut trial = x.clone();
    let mut e = vec![0.0; rm];
    let mut values = vec![0.0; prep.partition.cells() * m];
    let mut u = vec![0.0; m];
    for c in 0..prep.partition.cells() {
        let t = prep.partition.times[c];
        let node = c * prep.steps_per_cell;
        for k in 0..rm {
            e[k] = x[k] - prep.ref_stack[node * rm + k];
        }
        let start = problem.design.xi_last_norm(&e) / prep.psi_r[node];
        let limit = start.max(0.5) * (1.0 + 1e-9);
        let inward = match fb.eval(t, &x, &mut u) {
            Ok(()) => fb.inward(),
            Err(_) => {
                u.fill(0.0);
                None
            }
        };
        project_ball(&mut u, problem.u_max);
        let ok = |worst: f64, end: f64| worst < 1.0 && end <= limit;
        trial.copy_from_slice(&x);
        let (worst, _) = run_cell(&prep, c, &mut trial, &u, &mut rk, &mut scratch, &mut e);
        if worst >= 1.0 - 1e-3 {
            if let Some(d) = inward {
                let push: Vec<f64> = d.iter().map(|v| v * problem.u_max).collect();
                let base = u.clone();
                let blend = |th: f64| -> Vec<f64> {
                    let mut v: Vec<f64> = base.iter().zip(&push).map(|(a, b)| (1.0 - th) * a + th * b).collect();
                    project_ball(&mut v, problem.u_max);
                    v
                };
                let mut eval = |th: f64| {
                    trial.copy_from_slice(&x);
                    run_cell(&prep, c, &mut trial, &blend(th), &mut rk, &mut scratch, &mut e)
                };
                const GRID: usize = 32;
                let mut first_ok = None;
                let mut best = (0.0, worst);
                for i in 1..=GRID {
                    let th = i as f64 / GRID as f64;
                    let (w, en) = eval(th);
                    if w < best.1 {
                        best = (th, w);
                    }
                    if ok(w, en) {
                        first_ok = Some(th);
                        break;
                    }
                }
                let hi = match first_ok {
                    Some(th) => {
                        let (mut lo, mut hi) = (th - 1.0 / GRID as f64, th);
                        for _ in 0..20 {
                            let mid = 0.5 * (lo + hi);
                            let (w, en) = eval(mid);
                            if ok(w, en) {
                                hi = mid;
                            } else {
                                lo = mid;
                            }
                        }
                        hi
                    }
                    None => best.0,
                };
                let cand = blend(hi);
                trial.copy_from_slice(&x);
                let (w, _) = run_cell(&prep, c, &mut trial, &cand, &mut rk, &mut scratch, &mut e);
                if w < worst {
                    u = cand;
                }
            }
        }
        values[c * m..(c + 1) * m].copy_from_slice(&u);
        let (worst, _) = run_cell(&prep, c, &mut x, &u, &mut rk, &mut scratch, &mut e);
        if !worst.is_finite() {
            return StepFunction::new(prep.partition.clone(), m, values);
        }
    }
    StepFunction::new(prep.partition.clone(), m, values)
}

/// μ_i^j with μ_i^0 = ‖ψ_i‖∞ and μ_i^{j+1} = μ_{i+1}^j + k_i μ_i^j (one based i).
pub fn mu(design: &AuxiliaryDesign, i: usize, j: usize) -> f64 {
    if j == 0 {
        return design.sup_psi(i - 1);
    }
    mu(design, i + 1, j - 1) + design.gains[i - 1] * mu(design, i, j - 1)
}

/// Σ_{j=1}^{r−1} k_j μ_j^{r−j}.
pub fn gain_sum(design: &AuxiliaryDesign) -> f64 {
    let r = design.r;
    (1..r).map(|j| design.gains[j - 1] * mu(design, j, r - j)).sum()
}

/// u_max = g_inv_max·(f_max + ‖y_ref^{(r)}‖∞ + Σ k_j μ_j^{r−j} + ‖ψ̇_r‖∞).
pub fn u_max_bound(bounds: &DynBounds, design: &AuxiliaryDesign, yref_r_sup: f64) -> f64 {
    bounds.g_inv_max * (bounds.f_max + yref_r_sup + gain_sum(design) + design.sup_psi_dot_last())
}

/// True when every node of the simulated trajectory satisfies ‖ξ_r‖ < ψ_r.
pub fn contained(problem: &OcpProblem, u: &StepFunction) -> Result<bool> {
    let prep = Prepared::new(problem)?;
    let mut sim = prep.sim();
    sim.x.copy_from_slice(&problem.initial);
    for c in 0..prep.partition.cells() {
        let uc = u.cell(c).to_vec();
        for j in 0..prep.steps_per_cell {
            let node = c * prep.steps_per_cell + j;
            for k in 0..prep.rm {
                sim.e[k] = sim.x[k] - prep.ref_stack[node * prep.rm + k];
            }
            if !strictly_inside(problem.design.xi_last_norm(&sim.e), prep.psi_r[node]) {
                return Ok(false);
            }
            let t = prep.node_time(node);
            let scratch = &mut sim.scratch;
            let model = problem.model;
            if sim.rk.step(&mut |s, xs: &[f64], dx: &mut [f64]| model.rhs(s, xs, &uc, dx, scratch), t, &mut sim.x, prep.h).is_err() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::{ExpFunnel, FunnelSpec, PenaltyForm};
    use crate::reference::{ScalarReference, Signal};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn integrator_problem<'a>(
        model: &'a ControlAffineModel,
        design: &'a AuxiliaryDesign,
        reference: &'a ScalarReference,
        initial: f64,
    ) -> OcpProblem<'a> {
        OcpProblem {
            model,
            design,
            reference,
            t_hat: 0.0,
            horizon: 1.0,
            control_step: 0.1,
            h: 0.01,
            u_max: 5.0,
            lambda_u: 1.0,
            u_offset: None,
            cost: StageCost::Funnel(PenaltyForm::Squared),
            initial: vec![initial],
        }
    }

    fn unit_design() -> AuxiliaryDesign {
        let spec = FunnelSpec::new(Arc::new(ExpFunnel::constant(1.0)), (0.0, 2.0)).unwrap();
        AuxiliaryDesign::first_order(&spec, 1)
    }

    #[test]
    fn zero_cost_at_equilibrium() {
        let model = ControlAffineModel::integrator(1, 1);
        let design = unit_design();
        let reference = ScalarReference(Signal::Constant(0.0));
        let p = integrator_problem(&model, &design, &reference, 0.0);
        let u = StepFunction::constant(Partition::uniform(0.0, 1.0, 0.1).unwrap(), &[0.0]);
        assert_eq!(cost_j(&u, &p).unwrap(), ExtendedCost::ZERO);
        let sol = solve_ocp(&p, None, SolverOptions::default()).unwrap();
        assert_eq!(sol.cost, ExtendedCost::ZERO);
        assert!(sol.u_star.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn start_outside_funnel_is_infinite() {
        let model = ControlAffineModel::integrator(1, 1);
        let design = unit_design();
        let reference = ScalarReference(Signal::Constant(0.0));
        let p = integrator_problem(&model, &design, &reference, 1.5);
        let u = StepFunction::constant(Partition::uniform(0.0, 1.0, 0.1).unwrap(), &[0.0]);
        assert!(cost_j(&u, &p).unwrap().infinite);
        assert!(matches!(solve_ocp(&p, Some(&u), SolverOptions::default()), Err(Error::NoFeasiblePoint)));
    }

    #[test]
    fn descent_never_worse_than_warm_start() {
        let model = ControlAffineModel::integrator(1, 1);
        let design = unit_design();
        let reference = ScalarReference(Signal::Constant(0.0));
        let p = integrator_problem(&model, &design, &reference, 0.6);
        let warm = StepFunction::constant(Partition::uniform(0.0, 1.0, 0.1).unwrap(), &[0.0]);
        let sol = solve_ocp(&p, Some(&warm), SolverOptions { max_iter: 50, tol: 1e-12 }).unwrap();
        assert!(sol.cost.value < sol.warm_start_cost.value);
        assert!(sol.u_star.max_norm() <= p.u_max + 1e-12);
        assert!(sol.u_star.cell(0)[0] < 0.0);
    }

    #[test]
    fn feedback_zero_at_rest() {
        let model = ControlAffineModel::integrator(2, 1);
        let spec = FunnelSpec::new(Arc::new(ExpFunnel::constant(1.0)), (0.0, 2.0)).unwrap();
        let design = crate::funnel::design_auxiliary(&spec, &[0.0, 0.0], 2, 1, crate::funnel::DesignMode::Simplified).unwrap();
        let reference = ScalarReference(Signal::Constant(0.0));
        let mut fb = FeasibilityFeedback::new(&model, &design, &reference);
        let mut u = [1.0];
        fb.eval(0.3, &[0.0, 0.0], &mut u).unwrap();
        assert_eq!(u, [0.0]);
    }

    #[test]
    fn mu_recursion_example() {
        let spec = FunnelSpec::new(Arc::new(ExpFunnel::constant(1.0)), (0.0, 2.0)).unwrap();
        let psi: Vec<Arc<dyn crate::funnel::FunnelFn>> = vec![Arc::new(ExpFunnel::constant(1.0)), Arc::new(ExpFunnel::constant(1.0))];
        let d = AuxiliaryDesign::from_parts(&spec, 1, vec![2.0], psi, crate::funnel::DesignMode::Custom, 0.5);
        assert_relative_eq!(mu(&d, 1, 1), 3.0);
        assert_relative_eq!(gain_sum(&d), 6.0);
    }

    #[test]
    fn u_max_bound_reduces_to_funnel_slope() {
        let spec = FunnelSpec::new(Arc::new(ExpFunnel::new(1.0, 3.0, 1.0)), (0.0, 2.0)).unwrap();
        let d = AuxiliaryDesign::first_order(&spec, 1);
        let b = DynBounds { f_max: 0.0, g_max: 1.0, g_inv_max: 1.0, g_min: Some(1.0) };
        assert_relative_eq!(u_max_bound(&b, &d, 0.0), 3.0, max_relative = 1e-12);
        let bigger = DynBounds { f_max: 2.0, ..b };
        assert!(u_max_bound(&bigger, &d, 0.5) > u_max_bound(&b, &d, 0.0));
    }
}
