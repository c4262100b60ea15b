//! Reference signals with analytic derivatives.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

/// A reference y_ref: ℝ → ℝ^m with derivatives.
pub trait Reference: Send + Sync + Debug {
    fn dim(&self) -> usize;
    /// Writes (y_ref, ẏ_ref, …, y_ref^{(order)})(t) stacked into `out`.
    fn eval(&self, t: f64, order: usize, out: &mut [f64]);

    fn stack(&self, t: f64, order: usize) -> Vec<f64> {
        let mut out = vec![0.0; (order + 1) * self.dim()];
        self.eval(t, order, &mut out);
        out
    }
}

/// Scalar reference signals used by the benchmark studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Signal {
    Constant(f64),
    /// offset + amp·sin(omega·t + phase)
    Sine { amp: f64, omega: f64, phase: f64, offset: f64 },
    /// Linear ramp from `from` to `to` on [0, t_final], constant afterwards.
    /// Derivatives at the kink are taken from the right.
    Ramp { from: f64, to: f64, t_final: f64 },
    /// amp·Φ(t − center), Φ the standard normal distribution function.
    SmoothStep { amp: f64, center: f64 },
}

impl Signal {
    pub fn cosine() -> Self {
        Signal::Sine { amp: 1.0, omega: 1.0, phase: std::f64::consts::FRAC_PI_2, offset: 0.0 }
    }

    pub fn derivative(&self, t: f64, k: usize) -> f64 {
        match *self {
            Signal::Constant(c) => {
                if k == 0 {
                    c
                } else {
                    0.0
                }
            }
            Signal::Sine { amp, omega, phase, offset } => {
                let arg = omega * t + phase + k as f64 * std::f64::consts::FRAC_PI_2;
                let base = amp * omega.powi(k as i32) * arg.sin();
                if k == 0 {
                    base + offset
                } else {
                    base
                }
            }
            Signal::Ramp { from, to, t_final } => {
                let slope = (to - from) / t_final;
                match k {
                    0 if t < t_final => from + slope * t.max(0.0),
                    0 => to,
                    1 if (0.0..t_final).contains(&t) => slope,
                    _ => 0.0,
                }
            }
            Signal::SmoothStep { amp, center } => {
                let x = t - center;
                if k == 0 {
                    return amp * 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
                }
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                // d^k/dt^k Φ = (−1)^{k−1} He_{k−1}(x)·pdf
                let n = k - 1;
                let (mut h0, mut h1) = (1.0, x);
                let he = match n {
                    0 => 1.0,
                    _ => {
                        for j in 1..n {
                            let h2 = x * h1 - j as f64 * h0;
                            h0 = h1;
                            h1 = h2;
                        }
                        h1
                    }
                };
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                amp * sign * he * pdf
            }
        }
    }

    /// Supremum of |y^{(k)}| over [a, b], sampled on a fine grid.
    pub fn sup_derivative(&self, k: usize, a: f64, b: f64) -> f64 {
        let n = 20_000;
        (0..=n)
            .map(|i| self.derivative(a + (b - a) * i as f64 / n as f64, k).abs())
            .fold(0.0, f64::max)
    }
}

/// Scalar signal as an m = 1 reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarReference(pub Signal);

impl Reference for ScalarReference {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, t: f64, order: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(order + 1) {
            *o = self.0.derivative(t, k);
        }
    }
}

/// Componentwise signals for m > 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorReference(pub Vec<Signal>);

impl Reference for VectorReference {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, t: f64, order: usize, out: &mut [f64]) {
        let m = self.0.len();
        for k in 0..=order {
            for (l, s) in self.0.iter().enumerate() {
                out[k * m + l] = s.derivative(t, k);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd(s: &Signal, t: f64, k: usize) -> f64 {
        let h = 1e-5;
        (s.derivative(t + h, k) - s.derivative(t - h, k)) / (2.0 * h)
    }

    #[test]
    fn sine_derivatives_match_finite_differences() {
        let s = Signal::Sine { amp: 0.4, omega: std::f64::consts::FRAC_PI_2, phase: 0.0, offset: 0.0 };
        for k in 0..3 {
            assert_relative_eq!(s.derivative(0.3, k + 1), fd(&s, 0.3, k), epsilon = 1e-8);
        }
        assert_relative_eq!(Signal::cosine().derivative(0.0, 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn smooth_step_derivatives() {
        let s = Signal::SmoothStep { amp: 250.0, center: 3.0 };
        assert_relative_eq!(s.derivative(3.0, 0), 125.0, max_relative = 1e-12);
        for &t in &[1.0, 2.5, 3.7] {
            for k in 0..3 {
                assert_relative_eq!(s.derivative(t, k + 1), fd(&s, t, k), epsilon = 1e-5);
            }
        }
        let peak = s.sup_derivative(1, 0.0, 6.0);
        assert_relative_eq!(peak, 250.0 / (2.0 * std::f64::consts::PI).sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn ramp_profile() {
        let s = Signal::Ramp { from: 270.0, to: 337.1, t_final: 2.0 };
        assert_eq!(s.derivative(0.0, 0), 270.0);
        assert_relative_eq!(s.derivative(1.0, 0), 303.55, max_relative = 1e-12);
        assert_eq!(s.derivative(3.0, 0), 337.1);
        assert_relative_eq!(s.derivative(1.0, 1), 33.55, max_relative = 1e-12);
        assert_eq!(s.derivative(2.0, 1), 0.0);
    }
}
