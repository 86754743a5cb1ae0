//! Inverse-mapping warps with trilinear resampling.
//!
//! Output voxel `p` (normalized to `[-1, 1]^3`, lattice points at the ends)
//! reads the input at `c(p) = q + d(q)` with `q = A [p, 1]` and `d` the
//! spline displacement. Samples outside the input read zero.

use super::params::{AugmentParams, AFFINE_LEN, THETA_LEN, TPS_POINTS};
use super::tps::{solve_matrix, Spline, COEFFS};
use crate::scalar::Scalar;
use crate::volume::Volume3D;

#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

#[inline]
fn to_index(u: f64, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (u + 1.0) * (n - 1) as f64 / 2.0
    }
}

/// Index units per normalized unit along an axis of length `n`.
#[inline]
fn index_scale(n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (n - 1) as f64 / 2.0
    }
}

/// Trilinear interpolation at fractional index coordinates.
pub fn sample_trilinear<T: Scalar>(x: &Volume3D<T>, idx: [f64; 3]) -> T {
    sample_with_gradient(x, idx).0
}

/// Interpolated value and its gradient with respect to index coordinates.
fn sample_with_gradient<T: Scalar>(x: &Volume3D<T>, idx: [f64; 3]) -> (T, [T; 3]) {
    let base = idx.map(|v| v.floor());
    let frac = [
        T::lit(idx[0] - base[0]),
        T::lit(idx[1] - base[1]),
        T::lit(idx[2] - base[2]),
    ];
    let b = base.map(|v| v as isize);
    let mut c = [[[T::zero(); 2]; 2]; 2];
    for (i, plane) in c.iter_mut().enumerate() {
        for (j, row) in plane.iter_mut().enumerate() {
            for (k, cell) in row.iter_mut().enumerate() {
                *cell = x.get_or_zero(b[0] + i as isize, b[1] + j as isize, b[2] + k as isize);
            }
        }
    }
    let one = T::one();
    let lerp = |a: T, b: T, t: T| a + (b - a) * t;
    // collapse d, then w, then h
    let mut e = [[T::zero(); 2]; 2];
    let mut de = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            e[i][j] = lerp(c[i][j][0], c[i][j][1], frac[2]);
            de[i][j] = c[i][j][1] - c[i][j][0];
        }
    }
    let f = [lerp(e[0][0], e[0][1], frac[1]), lerp(e[1][0], e[1][1], frac[1])];
    let value = lerp(f[0], f[1], frac[0]);
    let g0 = f[1] - f[0];
    let g1 = (one - frac[0]) * (e[0][1] - e[0][0]) + frac[0] * (e[1][1] - e[1][0]);
    let g2 = (one - frac[0]) * lerp(de[0][0], de[0][1], frac[1])
        + frac[0] * lerp(de[1][0], de[1][1], frac[1]);
    (value, [g0, g1, g2])
}

pub fn warp_volume<T: Scalar>(x: &Volume3D<T>, theta: &AugmentParams) -> Volume3D<T> {
    let dims = x.dims();
    let spline = theta.has_tps().then(|| Spline::fit(&theta.tps));
    let mut b = [0.0; COEFFS];
    Volume3D::from_fn(dims, x.voxel_size_mm(), |h, w, d| {
        let p = [
            normalized_coord(h, dims[0]),
            normalized_coord(w, dims[1]),
            normalized_coord(d, dims[2]),
        ];
        let mut c = theta.apply_affine(p);
        if let Some(s) = &spline {
            super::tps::basis(c, &mut b);
            let disp = s.displacement_from_basis(&b);
            for a in 0..3 {
                c[a] += disp[a];
            }
        }
        sample_trilinear(
            x,
            [
                to_index(c[0], dims[0]),
                to_index(c[1], dims[1]),
                to_index(c[2], dims[2]),
            ],
        )
    })
}

/// Mean squared difference between `fixed` and `moving` warped by `theta`,
/// and its gradient with respect to the 204 parameters. The spline part of
/// the gradient is left at zero unless `spline_gradient` is set.
pub fn alignment_loss_grad(
    fixed: &Volume3D<f64>,
    moving: &Volume3D<f64>,
    theta: &AugmentParams,
    spline_gradient: bool,
) -> (f64, Vec<f64>) {
    let dims = fixed.dims();
    let scale = dims.map(index_scale);
    let spline = (spline_gradient || theta.has_tps()).then(|| Spline::fit(&theta.tps));
    let inv_n = 1.0 / fixed.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; THETA_LEN];
    let mut basis_acc = [[0.0; COEFFS]; 3];
    let mut b = [0.0; COEFFS];
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let p = [
                    normalized_coord(h, dims[0]),
                    normalized_coord(w, dims[1]),
                    normalized_coord(d, dims[2]),
                ];
                let q = theta.apply_affine(p);
                let (c, jac) = match &spline {
                    Some(s) => {
                        let (disp, mut jac) = s.eval_with_jacobian(q, &mut b);
                        for (a, row) in jac.iter_mut().enumerate() {
                            row[a] += 1.0;
                        }
                        ([q[0] + disp[0], q[1] + disp[1], q[2] + disp[2]], jac)
                    }
                    None => (q, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
                };
                let idx = [
                    to_index(c[0], dims[0]),
                    to_index(c[1], dims[1]),
                    to_index(c[2], dims[2]),
                ];
                let (value, g_idx) = sample_with_gradient(moving, idx);
                let r = value - fixed[[h, w, d]];
                loss += r * r;
                let coef = 2.0 * r * inv_n;
                // dL/dc in normalized units
                let gc = [
                    coef * g_idx[0] * scale[0],
                    coef * g_idx[1] * scale[1],
                    coef * g_idx[2] * scale[2],
                ];
                // dL/dq = J^T dL/dc
                let gq = [
                    gc[0] * jac[0][0] + gc[1] * jac[1][0] + gc[2] * jac[2][0],
                    gc[0] * jac[0][1] + gc[1] * jac[1][1] + gc[2] * jac[2][1],
                    gc[0] * jac[0][2] + gc[1] * jac[1][2] + gc[2] * jac[2][2],
                ];
                let ph = [p[0], p[1], p[2], 1.0];
                for a in 0..3 {
                    for (col, &pc) in ph.iter().enumerate() {
                        grad[4 * a + col] += gq[a] * pc;
                    }
                }
                if spline_gradient {
                    for a in 0..3 {
                        if gc[a] != 0.0 {
                            for (acc, &bj) in basis_acc[a].iter_mut().zip(&b) {
                                *acc += gc[a] * bj;
                            }
                        }
                    }
                }
            }
        }
    }
    if spline_gradient {
        let m = solve_matrix();
        for k in 0..TPS_POINTS {
            for a in 0..3 {
                grad[AFFINE_LEN + 3 * k + a] = (0..COEFFS).map(|j| m[(j, k)] * basis_acc[a][j]).sum();
            }
        }
    }
    (loss * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::params::DeformationCaps;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_volume(dims: [usize; 3], center: [f64; 3], width: f64) -> Volume3D<f64> {
        Volume3D::from_fn(dims, 3.0, |h, w, d| {
            let r2 = (h as f64 - center[0]).powi(2)
                + (w as f64 - center[1]).powi(2)
                + (d as f64 - center[2]).powi(2);
            (-r2 / (2.0 * width * width)).exp()
        })
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, 3.0, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn identity_warp_is_identity() {
        let x = random_volume([7, 9, 11], 1);
        let y = warp_volume(&x, &AugmentParams::identity());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_voxel_translation_shifts() {
        let x = random_volume([9, 9, 9], 2);
        // output(p) = input(p + 1 voxel along w)
        let t = 2.0 / 8.0;
        let y = warp_volume(&x, &AugmentParams::translation([0.0, t, 0.0]));
        for h in 0..9 {
            for w in 0..9 {
                for d in 0..9 {
                    let want = if w + 1 < 9 { x[[h, w + 1, d]] } else { 0.0 };
                    assert!((y[[h, w, d]] - want).abs() < 1e-12);
                }
            }
        }
    }

    fn invert_affine(a: &[f64; 12]) -> [f64; 12] {
        let m = nalgebra::Matrix3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]);
        let inv = m.try_inverse().unwrap();
        let t = nalgebra::Vector3::new(a[3], a[7], a[11]);
        let ti = -(inv * t);
        [
            inv[(0, 0)], inv[(0, 1)], inv[(0, 2)], ti[0],
            inv[(1, 0)], inv[(1, 1)], inv[(1, 2)], ti[1],
            inv[(2, 0)], inv[(2, 1)], inv[(2, 2)], ti[2],
        ]
    }

    #[test]
    fn affine_then_inverse_recovers_interior() {
        let dims = [16, 16, 16];
        let x = blob_volume(dims, [7.5, 7.0, 8.0], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut theta = DeformationCaps::default().sample(0.5, &mut rng);
        theta.tps.iter_mut().for_each(|v| *v = 0.0);
        let warped = warp_volume(&x, &theta);
        let back = warp_volume(
            &warped,
            &AugmentParams {
                affine: invert_affine(&theta.affine),
                tps: vec![0.0; 192],
            },
        );
        let mut se = 0.0;
        let mut n = 0.0;
        for h in 3..13 {
            for w in 3..13 {
                for d in 3..13 {
                    se += (back[[h, w, d]] - x[[h, w, d]]).powi(2);
                    n += 1.0;
                }
            }
        }
        assert!((se / n).sqrt() < 1e-2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = [8, 8, 8];
        let fixed = blob_volume(dims, [3.5, 4.0, 3.0], 2.0);
        let moving = blob_volume(dims, [4.0, 3.5, 3.5], 2.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = DeformationCaps::default().sample(1.0, &mut rng);
        let (_, grad) = alignment_loss_grad(&fixed, &moving, &theta, true);
        let v = theta.to_vec();
        let h = 1e-6;
        for i in (0..THETA_LEN).step_by(5).chain(0..12) {
            let mut p = v.clone();
            p[i] += h;
            let mut m = v.clone();
            m[i] -= h;
            let lp = alignment_loss_grad(&fixed, &moving, &AugmentParams::from_vec(&p).unwrap(), false).0;
            let lm = alignment_loss_grad(&fixed, &moving, &AugmentParams::from_vec(&m).unwrap(), false).0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn constant_offset_commutes(seed in 0u64..1000, c in -2.0f64..2.0) {
            let dims = [8, 8, 8];
            let x = random_volume(dims, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let theta = DeformationCaps::default().sample(1.0, &mut rng);
            let a = warp_volume(&x.map(|v| v + c), &theta);
            let b = warp_volume(&x, &theta);
            let spline = Spline::fit(&theta.tps);
            for h in 0..8 {
                for w in 0..8 {
                    for d in 0..8 {
                        let p = [normalized_coord(h, 8), normalized_coord(w, 8), normalized_coord(d, 8)];
                        let q = theta.apply_affine(p);
                        let disp = spline.displacement(q);
                        let inside = (0..3).all(|k| {
                            let i = to_index(q[k] + disp[k], 8);
                            (0.0..=7.0).contains(&i)
                        });
                        if inside {
                            prop_assert!((a[[h, w, d]] - b[[h, w, d]] - c).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }
}
