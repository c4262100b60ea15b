//! Checks shared by the property suite and the acceptance report.
#![allow(dead_code)]

use std::f64::consts::TAU;

use funnel_mpc::funnel::{funnel_penalty, xi, xi_matrix, ExpFunnel, FunnelFn};
use funnel_mpc::learning::{LinearModelParams, ParamBounds, SignalLog};
use funnel_mpc::linalg::norm;
use funnel_mpc::model::{rk4_step, Rk4};
use funnel_mpc::ocp::FeasibilityFeedback;
use funnel_mpc::scenarios::{build_scenario, ControllerId, ScenarioId, Settings};
use nalgebra::{DMatrix, DVector};

/// Left-rectangle quadrature of the funnel penalty along `path` on `n` cells of [0, T].
pub fn penalty_quadrature(path: &dyn Fn(f64) -> [f64; 2], psi: &dyn FunnelFn, horizon: f64, n: usize) -> f64 {
    let h = horizon / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let t = i as f64 * h;
        let c = funnel_penalty(t, &path(t), psi);
        if c.infinite {
            return f64::INFINITY;
        }
        acc += h * c.value;
    }
    acc
}

/// Random funnel and path parameters, all in the unit interval.
#[derive(Debug, Clone, Copy)]
pub struct PathSeed {
    pub scale: f64,
    pub rate: f64,
    pub offset: f64,
    pub gap: f64,
    pub freq: f64,
    pub phase: f64,
    pub horizon: f64,
}

impl PathSeed {
    pub fn funnel(&self) -> ExpFunnel {
        ExpFunnel::new(3.0 * self.scale, 2.0 * self.rate, 0.2 + 1.8 * self.offset)
    }

    fn horizon(&self) -> f64 {
        0.5 + 1.5 * self.horizon
    }

    fn direction(&self, t: f64) -> [f64; 2] {
        let a = (1.0 + 9.0 * self.freq) * t + TAU * self.phase;
        [a.cos(), a.sin()]
    }
}

/// A path with ‖e‖ ≤ ψ − ε has bounded, convergent quadratures below T·sup ψ²/ε².
pub fn inside_path_check(seed: &PathSeed) -> Result<(), String> {
    let psi = seed.funnel();
    let horizon = seed.horizon();
    let inf = psi.value(horizon);
    let sup = psi.value(0.0);
    let eps = (0.05 + 0.45 * seed.gap) * inf;
    let path = |t: f64| {
        let amp = (psi.value(t) - eps) * (3.0 * t + TAU * seed.phase).sin().abs();
        let d = seed.direction(t);
        [amp * d[0], amp * d[1]]
    };
    let q: Vec<f64> = (6..=13).map(|k| penalty_quadrature(&path, &psi, horizon, 1 << k)).collect();
    let bound = horizon * sup * sup / (eps * eps);
    if let Some(v) = q.iter().find(|v| !(v.is_finite() && **v <= bound)) {
        return Err(format!("quadrature {v} exceeds bound {bound}"));
    }
    let last = (q[7] - q[6]).abs();
    if last > 1e-2 * q[7].max(1e-3) {
        return Err(format!("no convergence: last change {last} at value {}", q[7]));
    }
    Ok(())
}

/// A path touching the boundary tangentially at T/3 or 2T/3 has quadratures
/// that increase under every dyadic refinement. At those touch points the
/// node offsets on both sides swap between levels, so the sums grow cleanly.
pub fn touching_path_check(seed: &PathSeed) -> Result<(), String> {
    let psi = seed.funnel();
    let horizon = seed.horizon();
    let t0 = if seed.gap < 0.5 { horizon / 3.0 } else { 2.0 * horizon / 3.0 };
    let c = (0.2 + 0.8 * seed.freq) / (horizon * horizon);
    let path = |t: f64| {
        let amp = psi.value(t) * (1.0 - c * (t - t0) * (t - t0));
        let d = seed.direction(t);
        [amp * d[0], amp * d[1]]
    };
    let q: Vec<f64> = (8..=12).map(|k| penalty_quadrature(&path, &psi, horizon, 1 << k)).collect();
    for w in q.windows(2) {
        if !(w[1] > w[0] || w[1].is_infinite()) {
            return Err(format!("refinement did not increase the quadrature: {q:?}"));
        }
    }
    if !(q[4] >= 2.0 * q[0]) {
        return Err(format!("growth too slow: {q:?}"));
    }
    Ok(())
}

/// Largest change of ‖ξ_r‖/ψ_r along the model under the continuous feasibility feedback.
pub fn conservation_drift(scenario: ScenarioId, controller: ControllerId, horizon: f64, h: f64) -> f64 {
    let st = Settings::defaults(scenario, controller).unwrap();
    let sc = build_scenario(&st).unwrap();
    let model = &sc.model;
    let (r, m) = (model.r, model.m);
    let mut fb = FeasibilityFeedback::new(model, &sc.design, sc.reference.as_ref());
    let mut scratch = model.scratch();
    let mut x = sc.xm0.clone();
    let mut rk = Rk4::new(x.len());
    let ratio = |t: f64, x: &[f64]| {
        let refs = sc.reference.stack(t, r - 1);
        let e: Vec<f64> = (0..r * m).map(|k| x[k] - refs[k]).collect();
        sc.design.xi_last_norm(&e) / sc.design.psi[r - 1].value(t)
    };
    let start = ratio(0.0, &x);
    let mut drift: f64 = 0.0;
    let mut u = vec![0.0; m];
    let n = (horizon / h).round() as usize;
    for i in 0..n {
        let t = i as f64 * h;
        rk.step(
            &mut |s, xs: &[f64], dx: &mut [f64]| {
                fb.eval(s, xs, &mut u).unwrap();
                model.rhs(s, xs, &u, dx, &mut scratch);
            },
            t,
            &mut x,
            h,
        )
        .unwrap();
        drift = drift.max((ratio(t + h, &x) - start).abs());
    }
    drift
}

/// Largest relative deviation between ξ(z) and the matrix form, and of ξ from linearity.
pub fn xi_errors(gains: &[f64], m: usize, z: &[f64], w: &[f64], a: f64, b: f64) -> (f64, f64) {
    let r = gains.len() + 1;
    let s = xi_matrix(gains, r, m);
    let xz = xi(z, gains, m).unwrap();
    let xw = xi(w, gains, m).unwrap();
    let combo: Vec<f64> = z.iter().zip(w).map(|(p, q)| a * p + b * q).collect();
    let xc = xi(&combo, gains, m).unwrap();
    let sz = &s * nalgebra::DVector::from_column_slice(z);
    let scale = 1.0 + norm(&xz);
    let matrix = xz.iter().zip(sz.iter()).map(|(p, q)| (p - q).abs() / scale).fold(0.0, f64::max);
    let lin_scale = 1.0 + norm(&xc);
    let linear = xc
        .iter()
        .zip(xz.iter().zip(&xw))
        .map(|(c, (p, q))| (c - (a * p + b * q)).abs() / lin_scale)
        .fold(0.0, f64::max);
    (matrix, linear)
}

/// Relative error of one library RK4 step against the classical tableau written out by hand
/// for ẋ = A x + c·t.
pub fn rk4_hand_error(a: &DMatrix<f64>, c: &[f64], x0: &[f64], t: f64, h: f64) -> f64 {
    let n = x0.len();
    let field = |s: f64, x: &[f64], dx: &mut [f64]| {
        for i in 0..n {
            let mut acc = c[i] * s;
            for j in 0..n {
                acc += a[(i, j)] * x[j];
            }
            dx[i] = acc;
        }
    };
    let lib = rk4_step(field, t, x0, h).unwrap();
    let eval = |s: f64, x: &[f64]| {
        let mut d = vec![0.0; n];
        field(s, x, &mut d);
        d
    };
    let k1 = eval(t, x0);
    let x2: Vec<f64> = (0..n).map(|i| x0[i] + 0.5 * h * k1[i]).collect();
    let k2 = eval(t + 0.5 * h, &x2);
    let x3: Vec<f64> = (0..n).map(|i| x0[i] + 0.5 * h * k2[i]).collect();
    let k3 = eval(t + 0.5 * h, &x3);
    let x4: Vec<f64> = (0..n).map(|i| x0[i] + h * k3[i]).collect();
    let k4 = eval(t + h, &x4);
    let hand: Vec<f64> = (0..n).map(|i| x0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    lib.iter().zip(&hand).map(|(p, q)| (p - q).abs() / q.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
}

/// Bounds generous enough to contain [`truth`].
pub fn loose_bounds() -> ParamBounds {
    ParamBounds { r_bar: 5.0, s_bar: 5.0, gamma_bar: 1.0, d_bar: 5.0, p_bar: 5.0, eta_bar: 5.0, y_bar: 5.0 }
}

/// Ground truth of the synthetic identification problem.
pub fn truth() -> LinearModelParams {
    LinearModelParams {
        r_mats: vec![DMatrix::from_element(1, 1, -0.8)],
        s: DMatrix::from_row_slice(1, 2, &[0.5, -0.3]),
        gamma: DMatrix::identity(1, 1),
        d1: DVector::from_element(1, 0.2),
        q: DMatrix::from_row_slice(2, 2, &[-7.0, 0.5, 0.5, -8.0]),
        p: DMatrix::from_column_slice(2, 1, &[1.0, -0.5]),
        d2: DVector::from_column_slice(&[0.1, -0.2]),
        eta0: DVector::from_column_slice(&[0.3, -0.1]),
    }
}

pub fn input(t: f64) -> f64 {
    (3.0 * t).sin() + 0.5 * (7.0 * t).cos()
}

/// Log of the exact RK4 playback of `p` under a held input.
pub fn synthetic_log(p: &LinearModelParams, y0: f64, t_end: f64, dt: f64, u: impl Fn(f64) -> f64) -> SignalLog {
    let model = p.to_model("truth");
    let mut x = vec![y0];
    x.extend(p.eta0.iter());
    let mut rk = Rk4::new(x.len());
    let mut scratch = model.scratch();
    let mut log = SignalLog::new(1, 1);
    let n = (t_end / dt).round() as usize;
    for i in 0..=n {
        let t = i as f64 * dt;
        let ui = [u(t)];
        log.push(t, &x[..1], &[0.0], &ui, &[0.0]);
        if i < n {
            rk.step(&mut |s, xs: &[f64], dx: &mut [f64]| model.rhs(s, xs, &ui, dx, &mut scratch), t, &mut x, dt).unwrap();
        }
    }
    log
}
