use nalgebra::{DMatrix, DVector};

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest singular value; zero for empty matrices.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}

pub fn vec_norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

/// Largest eigenvalue of the symmetric part of `a`.
pub fn sym_lambda_max(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let s = (a + a.transpose()) * 0.5;
    s.symmetric_eigenvalues().max()
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn sym_lambda_min(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = (a + a.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Radially projects `v` onto the ball of radius `r`.
pub fn project_ball(v: &mut [f64], r: f64) {
    let n = norm(v);
    if n > r && n > 0.0 {
        let s = r / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Dense matrix exponential by scaling and squaring with a Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let nrm = a.abs().row_sum().max();
    let mut s = 0;
    while nrm / 2f64.powi(s) > 0.5 {
        s += 1;
    }
    let a = a / 2f64.powi(s);
    let mut term = DMatrix::identity(n, n);
    let mut out = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &a / k as f64;
        out += &term;
    }
    for _ in 0..s {
        out = &out * &out;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_rotation_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let e = expm(&a);
        assert_relative_eq!(e[(0, 0)], 1f64.cos(), epsilon = 1e-13);
        assert_relative_eq!(e[(0, 1)], 1f64.sin(), epsilon = 1e-13);
    }

    #[test]
    fn projection_keeps_direction() {
        let mut v = [3.0, 4.0];
        project_ball(&mut v, 1.0);
        assert_relative_eq!(v[0], 0.6);
        assert_relative_eq!(v[1], 0.8);
        let mut w = [0.1, 0.0];
        project_ball(&mut w, 1.0);
        assert_eq!(w, [0.1, 0.0]);
    }

    #[test]
    fn operator_norm_of_row() {
        let s = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_relative_eq!(op_norm(&s), 5.0, max_relative = 1e-12);
        assert_eq!(op_norm(&DMatrix::zeros(1, 0)), 0.0);
    }
}
