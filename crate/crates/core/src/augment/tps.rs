//! Thin-plate spline over a fixed 4x4x4 control grid in `[-1, 1]^3`.
//!
//! The displacement along each axis is
//! `d(q) = sum_k W_k U(|q - c_k|) + a_0 + a . q` with `U(r) = r`, fitted so
//! that `d(c_k)` equals the control displacement. The fit is linear in the
//! displacements, so the solve matrix is computed once.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::params::{TPS_GRID, TPS_POINTS};

/// Coefficient count per axis: one radial weight per control point plus the
/// affine part.
pub const COEFFS: usize = TPS_POINTS + 4;

/// Radial basis for 3D splines.
#[inline]
pub fn radial(r: f64) -> f64 {
    r
}

/// Derivative of [`radial`] with respect to `r`.
#[inline]
fn radial_deriv(_r: f64) -> f64 {
    1.0
}

pub fn control_points() -> &'static [[f64; 3]; TPS_POINTS] {
    static POINTS: OnceLock<[[f64; 3]; TPS_POINTS]> = OnceLock::new();
    POINTS.get_or_init(|| {
        let g = |i: usize| -1.0 + 2.0 * i as f64 / (TPS_GRID - 1) as f64;
        let mut pts = [[0.0; 3]; TPS_POINTS];
        for a in 0..TPS_GRID {
            for b in 0..TPS_GRID {
                for c in 0..TPS_GRID {
                    pts[(a * TPS_GRID + b) * TPS_GRID + c] = [g(a), g(b), g(c)];
                }
            }
        }
        pts
    })
}

fn dist(a: [f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `COEFFS x TPS_POINTS` map from control displacements to coefficients.
pub fn solve_matrix() -> &'static DMatrix<f64> {
    static SOLVE: OnceLock<DMatrix<f64>> = OnceLock::new();
    SOLVE.get_or_init(|| {
        let pts = control_points();
        let n = TPS_POINTS;
        let mut l = DMatrix::<f64>::zeros(n + 4, n + 4);
        for i in 0..n {
            for j in 0..n {
                l[(i, j)] = radial(dist(pts[i], &pts[j]));
            }
            l[(i, n)] = 1.0;
            l[(n, i)] = 1.0;
            for a in 0..3 {
                l[(i, n + 1 + a)] = pts[i][a];
                l[(n + 1 + a, i)] = pts[i][a];
            }
        }
        let inv = l.try_inverse().expect("spline system is nonsingular");
        inv.columns(0, n).into_owned()
    })
}

/// Basis row `[U(|q - c_1|), ..., U(|q - c_n|), 1, q_0, q_1, q_2]`.
#[inline]
pub fn basis(q: [f64; 3], out: &mut [f64; COEFFS]) {
    for (o, c) in out.iter_mut().zip(control_points().iter()) {
        *o = radial(dist(q, c));
    }
    out[TPS_POINTS] = 1.0;
    out[TPS_POINTS + 1] = q[0];
    out[TPS_POINTS + 2] = q[1];
    out[TPS_POINTS + 3] = q[2];
}

/// Fitted spline coefficients for the three displacement axes.
#[derive(Clone, Debug)]
pub struct Spline {
    /// `coeffs[axis][j]`
    pub coeffs: [[f64; COEFFS]; 3],
}

impl Spline {
    /// `displacements[3 * k + axis]` at control point `k`.
    pub fn fit(displacements: &[f64]) -> Self {
        let m = solve_matrix();
        let mut coeffs = [[0.0; COEFFS]; 3];
        for (axis, row) in coeffs.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c = (0..TPS_POINTS)
                    .map(|k| m[(j, k)] * displacements[3 * k + axis])
                    .sum();
            }
        }
        Self { coeffs }
    }

    pub fn displacement(&self, q: [f64; 3]) -> [f64; 3] {
        let mut b = [0.0; COEFFS];
        basis(q, &mut b);
        self.displacement_from_basis(&b)
    }

    #[inline]
    pub fn displacement_from_basis(&self, b: &[f64; COEFFS]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, c) in out.iter_mut().zip(&self.coeffs) {
            *o = c.iter().zip(b).map(|(x, y)| x * y).sum();
        }
        out
    }

    /// Displacement and its Jacobian at `q`, filling `b` with the basis row.
    pub fn eval_with_jacobian(&self, q: [f64; 3], b: &mut [f64; COEFFS]) -> ([f64; 3], [[f64; 3]; 3]) {
        let pts = control_points();
        let mut jac = [[0.0; 3]; 3];
        for (k, c) in pts.iter().enumerate() {
            let diff = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
            let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            b[k] = radial(r);
            if r > 0.0 {
                let s = radial_deriv(r) / r;
                for axis in 0..3 {
                    let w = self.coeffs[axis][k] * s;
                    for coord in 0..3 {
                        jac[axis][coord] += w * diff[coord];
                    }
                }
            }
        }
        b[TPS_POINTS] = 1.0;
        b[TPS_POINTS + 1] = q[0];
        b[TPS_POINTS + 2] = q[1];
        b[TPS_POINTS + 3] = q[2];
        for (axis, row) in jac.iter_mut().enumerate() {
            for (coord, v) in row.iter_mut().enumerate() {
                *v += self.coeffs[axis][TPS_POINTS + 1 + coord];
            }
        }
        (self.displacement_from_basis(b), jac)
    }

    /// Jacobian `d(displacement)/dq`, `jac[axis][coord]`.
    pub fn jacobian(&self, q: [f64; 3]) -> [[f64; 3]; 3] {
        let pts = control_points();
        let mut jac = [[0.0; 3]; 3];
        for (k, c) in pts.iter().enumerate() {
            let r = dist(q, c);
            if r == 0.0 {
                continue;
            }
            let s = radial_deriv(r) / r;
            for axis in 0..3 {
                let w = self.coeffs[axis][k] * s;
                for coord in 0..3 {
                    jac[axis][coord] += w * (q[coord] - c[coord]);
                }
            }
        }
        for (axis, row) in jac.iter_mut().enumerate() {
            for (coord, v) in row.iter_mut().enumerate() {
                *v += self.coeffs[axis][TPS_POINTS + 1 + coord];
            }
        }
        jac
    }
}
