//! Benchmark plants: exothermic reactor, mass-on-car and torsional oscillator.

use std::f64::consts::FRAC_PI_4;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{ControlAffineModel, LinearInternal, NonlinearInternal, OperatorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactorParams {
    pub c1: f64,
    pub c2: f64,
    pub k0: f64,
    pub k1: f64,
    pub x1_in: f64,
    pub x2_in: f64,
    pub d: f64,
    pub q: f64,
    pub b: f64,
    /// Initial (x1, x2, y).
    pub init: [f64; 3],
}

impl Default for ReactorParams {
    fn default() -> Self {
        ReactorParams {
            c1: -1.0,
            c2: 1.0,
            k0: 25f64.exp(),
            k1: 8700.0,
            x1_in: 1.0,
            x2_in: 0.0,
            d: 1.1,
            q: 1.25,
            b: 209.2,
            init: [0.02, 0.9, 270.0],
        }
    }
}

impl ReactorParams {
    /// Arrhenius rate k0·exp(−k1/y)·x1.
    pub fn rate(&self, y: f64, x1: f64) -> f64 {
        self.k0 * (-self.k1 / y).exp() * x1
    }
}

/// Reactor with output temperature y and internal concentrations (x1, x2).
pub fn build_reactor(p: &ReactorParams) -> ControlAffineModel {
    let pd = *p;
    let dynamics = Arc::new(move |z: &[f64], eta: &[f64], out: &mut [f64]| {
        let rate = pd.rate(z[0], eta[0]);
        out[0] = pd.c1 * rate + pd.d * (pd.x1_in - eta[0]);
        out[1] = pd.c2 * rate + pd.d * (pd.x2_in - eta[1]);
    });
    let readout = Arc::new(|z: &[f64], eta: &[f64], out: &mut [f64]| {
        out[0] = z[0];
        out[1] = eta[0];
    });
    let pf = *p;
    ControlAffineModel {
        name: "reactor".into(),
        r: 1,
        m: 1,
        operator: OperatorSpec::Nonlinear(NonlinearInternal {
            nu: 2,
            q_dim: 2,
            eta0: vec![p.init[0], p.init[1]],
            dynamics,
            readout,
        }),
        f: Arc::new(move |w, out| out[0] = pf.b * pf.rate(w[0], w[1]) - pf.q * w[0]),
        g: Arc::new(|_, out| out[(0, 0)] = 1.0),
        disturbance: None,
    }
}

/// Linearisation coefficients (a1, a2) of the Arrhenius term at temperature `y_bar`
/// and concentration x1_in/2.
pub fn reactor_linear_coefficients(p: &ReactorParams, y_bar: f64) -> (f64, f64) {
    let a2 = p.k0 * (-p.k1 / y_bar).exp();
    let a1 = a2 * p.k1 / (y_bar * y_bar) * p.x1_in / 2.0;
    (a1, a2)
}

pub const REACTOR_Y_BAR: f64 = 337.1;

/// Full (A, B, C, D) of the linearised reactor in the state (x1, x2, y).
pub fn reactor_linear_abcd(p: &ReactorParams, y_bar: f64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let (a1, a2) = reactor_linear_coefficients(p, y_bar);
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[
            p.c1 * a2 - p.d,
            0.0,
            p.c1 * a1,
            p.c2 * a2,
            -p.d,
            p.c2 * a1,
            p.b * a2,
            0.0,
            p.b * a1 - p.q,
        ],
    );
    let b = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
    let d = DVector::from_column_slice(&[
        -p.c1 * a1 * y_bar + p.d * p.x1_in,
        -p.c2 * a1 * y_bar + p.d * p.x2_in,
        -p.b * a1 * y_bar,
    ]);
    (a, b.clone(), b, d)
}

/// The linearised reactor as a model with linear internal dynamics.
pub fn build_reactor_linear_model(p: &ReactorParams) -> ControlAffineModel {
    let (a, _, _, d) = reactor_linear_abcd(p, REACTOR_Y_BAR);
    let internal = LinearInternal {
        r_mats: vec![DMatrix::from_element(1, 1, a[(2, 2)])],
        s: DMatrix::from_row_slice(1, 2, &[a[(2, 0)], a[(2, 1)]]),
        q: a.view((0, 0), (2, 2)).into_owned(),
        p: DMatrix::from_column_slice(2, 1, &[a[(0, 2)], a[(1, 2)]]),
        d2: DVector::from_column_slice(&[d[0], d[1]]),
        eta0: DVector::from_column_slice(&[p.init[0], p.init[1]]),
    };
    ControlAffineModel::linear("reactor_linear", 1, internal, DMatrix::identity(1, 1), DVector::from_element(1, d[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassOnCarParams {
    pub m1: f64,
    pub m2: f64,
    pub k: f64,
    pub d: f64,
    pub theta: f64,
}

impl MassOnCarParams {
    pub fn chapter2() -> Self {
        MassOnCarParams { m1: 4.0, m2: 1.0, k: 2.0, d: 1.0, theta: FRAC_PI_4 }
    }

    pub fn zoh_study() -> Self {
        MassOnCarParams { m1: 1.0, m2: 2.0, k: 1.0, d: 1.0, theta: FRAC_PI_4 }
    }

    pub fn mistuned() -> Self {
        MassOnCarParams { m1: 6.0, m2: 2.0, k: 3.0, d: 0.75, theta: FRAC_PI_4 }
    }
}

/// Input-output form ÿ = R1 y + R2 ẏ + Sη + Γu, η̇ = Qη + Py.
#[derive(Debug, Clone, PartialEq)]
pub struct MassOnCarMatrices {
    pub r1: f64,
    pub r2: f64,
    pub s: [f64; 2],
    pub gamma: f64,
    pub q: [[f64; 2]; 2],
    pub p: [f64; 2],
    /// η = (s + a·y, ṡ + a·ẏ + b·y) in terms of the spring elongation s.
    pub a: f64,
    pub b: f64,
}

pub fn mass_on_car_matrices(p: &MassOnCarParams) -> MassOnCarMatrices {
    let (sin, cos) = p.theta.sin_cos();
    let s2 = sin * sin;
    let mu = p.m2 * (p.m1 + p.m2 * s2);
    let mu1 = p.m1 / mu;
    let gamma = p.m2 * s2 / mu;
    let a = cos / s2;
    let ms = p.m2 * s2;
    let b = -p.d * a / ms;
    let c = cos * mu1;
    MassOnCarMatrices {
        r1: c * (p.k * a + p.d * b),
        r2: c * p.d * a,
        s: [-c * p.k, -c * p.d],
        gamma,
        q: [[0.0, 1.0], [-p.k / ms, -p.d / ms]],
        p: [-b, (p.k * a + p.d * b) / ms],
        a,
        b,
    }
}

/// Mass-on-car in input-output form with zero initial internal state.
pub fn build_mass_on_car(p: &MassOnCarParams) -> ControlAffineModel {
    let mm = mass_on_car_matrices(p);
    let internal = LinearInternal {
        r_mats: vec![DMatrix::from_element(1, 1, mm.r1), DMatrix::from_element(1, 1, mm.r2)],
        s: DMatrix::from_row_slice(1, 2, &mm.s),
        q: DMatrix::from_row_slice(2, 2, &[mm.q[0][0], mm.q[0][1], mm.q[1][0], mm.q[1][1]]),
        p: DMatrix::from_column_slice(2, 1, &mm.p),
        d2: DVector::zeros(2),
        eta0: DVector::zeros(2),
    };
    ControlAffineModel::linear("mass_on_car", 1, internal, DMatrix::from_element(1, 1, mm.gamma), DVector::zeros(1))
}

/// State-space form in x = (z, ż, s, ṡ) with y = z + s·cos(θ).
pub fn mass_on_car_state_space(p: &MassOnCarParams) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (sin, cos) = p.theta.sin_cos();
    let mu = p.m2 * (p.m1 + p.m2 * sin * sin);
    let (mu1, mu2) = (p.m1 / mu, p.m2 / mu);
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            mu2 * p.k * cos,
            mu2 * p.d * cos,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
            -(mu1 + mu2) * p.k,
            -(mu1 + mu2) * p.d,
        ],
    );
    let b = DVector::from_column_slice(&[0.0, mu2, 0.0, -mu2 * cos]);
    let c = DVector::from_column_slice(&[1.0, 0.0, cos, 0.0]);
    (a, b, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorsionalParams {
    pub i1: f64,
    pub i2: f64,
    pub k: f64,
    pub d: f64,
}

impl Default for TorsionalParams {
    fn default() -> Self {
        TorsionalParams { i1: 0.136, i2: 0.12, k: 0.1, d: 0.16 }
    }
}

/// Two inertias coupled by a damped torsion spring, output the driven rotor speed.
pub fn build_torsional(p: &TorsionalParams) -> ControlAffineModel {
    let internal = LinearInternal {
        r_mats: vec![DMatrix::from_element(1, 1, -p.d / p.i1)],
        s: DMatrix::from_row_slice(1, 2, &[p.k / p.i1, p.d / p.i1]),
        q: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -p.k / p.i2, -p.d / p.i2]),
        p: DMatrix::from_column_slice(2, 1, &[-1.0, p.d / p.i2]),
        d2: DVector::zeros(2),
        eta0: DVector::zeros(2),
    };
    ControlAffineModel::linear("torsional", 1, internal, DMatrix::from_element(1, 1, 1.0 / p.i1), DVector::zeros(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{integrate_closed_loop, rk4_step, Input, Partition, StepFunction};
    use approx::assert_relative_eq;

    #[test]
    fn mass_on_car_chapter2_matrices() {
        let mm = mass_on_car_matrices(&MassOnCarParams::chapter2());
        let r2 = 2f64.sqrt();
        assert_relative_eq!(mm.r1, 0.0, epsilon = 1e-14);
        assert_relative_eq!(mm.r2, 8.0 / 9.0, max_relative = 1e-14);
        assert_relative_eq!(mm.s[0], -4.0 * r2 / 9.0 * 2.0, max_relative = 1e-14);
        assert_relative_eq!(mm.s[1], -4.0 * r2 / 9.0, max_relative = 1e-14);
        assert_relative_eq!(mm.gamma, 1.0 / 9.0, max_relative = 1e-14);
        assert_relative_eq!(mm.q[1][0], -4.0, max_relative = 1e-14);
        assert_relative_eq!(mm.q[1][1], -2.0, max_relative = 1e-14);
        assert_relative_eq!(mm.p[0], 2.0 * r2, max_relative = 1e-14);
        assert_relative_eq!(mm.p[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mass_on_car_zoh_matrices() {
        let mm = mass_on_car_matrices(&MassOnCarParams::zoh_study());
        let r2 = 2f64.sqrt();
        assert_relative_eq!(mm.r1, 0.0, epsilon = 1e-14);
        assert_relative_eq!(mm.r2, 0.25, max_relative = 1e-14);
        assert_relative_eq!(mm.gamma, 0.25, max_relative = 1e-14);
        assert_relative_eq!(mm.s[0], -r2 / 8.0, max_relative = 1e-14);
        assert_relative_eq!(mm.s[1], -r2 / 8.0, max_relative = 1e-14);
        assert_eq!(mm.q[0], [0.0, 1.0]);
        assert_relative_eq!(mm.q[1][0], -1.0, max_relative = 1e-14);
        assert_relative_eq!(mm.q[1][1], -1.0, max_relative = 1e-14);
        assert_relative_eq!(mm.p[0], r2, max_relative = 1e-14);
        assert_relative_eq!(mm.p[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn input_output_form_matches_state_space() {
        for params in [MassOnCarParams::chapter2(), MassOnCarParams::mistuned()] {
            let (a, b, c) = mass_on_car_state_space(&params);
            let model = build_mass_on_car(&params);
            let h = 1e-3;
            let input = |t: f64| (3.0 * t).sin() + 0.5;
            let mut x = DVector::zeros(4);
            let mut z = vec![0.0; 4];
            let mut scratch = model.scratch();
            let mut rk = crate::model::Rk4::new(4);
            for i in 0..2000 {
                let t = i as f64 * h;
                let u = input(t);
                let xs = rk4_step(
                    |_, xv: &[f64], dx: &mut [f64]| {
                        let v = &a * DVector::from_column_slice(xv) + &b * u;
                        dx.copy_from_slice(v.as_slice());
                    },
                    t,
                    x.as_slice(),
                    h,
                )
                .unwrap();
                x = DVector::from_vec(xs);
                rk.step(&mut |s, zs: &[f64], dz: &mut [f64]| model.rhs(s, zs, &[u], dz, &mut scratch), t, &mut z, h)
                    .unwrap();
                assert_relative_eq!(c.dot(&x), z[0], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mass_on_car_rest_stays_at_rest() {
        let model = build_mass_on_car(&MassOnCarParams::chapter2());
        let u = StepFunction::constant(Partition::uniform(0.0, 1.0, 0.1).unwrap(), &[0.0]);
        let tr = integrate_closed_loop(&model, &[0.0; 4], (0.0, 1.0), 0.01, Input::Step(&u), None).unwrap();
        assert!(tr.rows.iter().all(|r| r.x.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn torsional_internal_dynamics_stable() {
        let m = build_torsional(&TorsionalParams::default());
        let crate::model::OperatorSpec::Linear(l) = &m.operator else { panic!() };
        let eig = l.q.complex_eigenvalues();
        assert!(eig.iter().all(|e| e.re < 0.0));
        let p = TorsionalParams::default();
        assert_relative_eq!(l.q[(1, 0)], -p.k / p.i2);
        assert_relative_eq!(l.p[(1, 0)], p.d / p.i2);
    }

    #[test]
    fn reactor_short_run_is_finite_and_matches_hand_step() {
        let p = ReactorParams::default();
        let model = build_reactor(&p);
        let u = StepFunction::constant(Partition::uniform(0.0, 0.01, 0.01).unwrap(), &[360.0]);
        let x0 = [270.0, 0.02, 0.9];
        let tr = integrate_closed_loop(&model, &x0, (0.0, 0.01), 1e-4, Input::Step(&u), None).unwrap();
        assert_eq!(tr.flags(), 0);
        assert_eq!(tr.rows.len(), 101);
        assert!(tr.rows.iter().all(|r| r.x.iter().all(|v| v.is_finite())));
        // hand evaluation of the first step in the original coordinates (x1, x2, y)
        let field = |x: [f64; 3]| {
            let rate = p.k0 * (-p.k1 / x[2]).exp() * x[0];
            [
                p.c1 * rate + p.d * (p.x1_in - x[0]),
                p.c2 * rate + p.d * (p.x2_in - x[1]),
                p.b * rate - p.q * x[2] + 360.0,
            ]
        };
        let h = 1e-4;
        let x = [0.02, 0.9, 270.0];
        let add = |a: [f64; 3], k: [f64; 3], s: f64| [a[0] + s * k[0], a[1] + s * k[1], a[2] + s * k[2]];
        let k1 = field(x);
        let k2 = field(add(x, k1, h / 2.0));
        let k3 = field(add(x, k2, h / 2.0));
        let k4 = field(add(x, k3, h));
        let next: Vec<f64> = (0..3).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        let row = &tr.rows[1];
        assert_relative_eq!(row.x[0], next[2], max_relative = 1e-14);
        assert_relative_eq!(row.x[1], next[0], max_relative = 1e-14);
        assert_relative_eq!(row.x[2], next[1], max_relative = 1e-14);
    }

    #[test]
    fn linear_reactor_agrees_at_linearisation_point() {
        let p = ReactorParams::default();
        let sys = build_reactor(&p);
        let lin = build_reactor_linear_model(&p);
        let x = [REACTOR_Y_BAR, 0.5 * p.x1_in, 0.3];
        let mut ds = [0.0; 3];
        let mut dl = [0.0; 3];
        sys.rhs(0.0, &x, &[360.0], &mut ds, &mut sys.scratch());
        lin.rhs(0.0, &x, &[360.0], &mut dl, &mut lin.scratch());
        for i in 0..3 {
            assert_relative_eq!(ds[i], dl[i], max_relative = 1e-10, epsilon = 1e-10);
        }
        let (a1, a2) = reactor_linear_coefficients(&p, REACTOR_Y_BAR);
        assert_relative_eq!(a2, p.k0 * (-p.k1 / REACTOR_Y_BAR).exp(), max_relative = 1e-15);
        assert!(a1 > 0.0);
        let (_, b, c, _) = reactor_linear_abcd(&p, REACTOR_Y_BAR);
        assert_eq!(b.as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(c, b);
    }
}
