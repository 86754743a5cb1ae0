//! Volume smoothing with a [`GaussianKernel`] and its reverse-mode gradients.
//!
//! The filter is centred: `z[p] = sum_{o in [-r, r]^3} x[p + o] q[o]`, so the
//! output is not translated. Samples outside the volume read as zero, which
//! keeps the operator linear with a trivial adjoint but means mass leaks out
//! through the faces.

use crate::error::{Error, Result};
use crate::kernel::GaussianKernel;
use crate::scalar::Scalar;
use crate::volume::Volume3D;

#[derive(Clone, Debug)]
pub struct SmoothOutput<T> {
    pub z: Volume3D<T>,
    pub sigma_used: T,
    pub kernel: GaussianKernel<T>,
}

fn check_fits<T: Scalar>(dims: [usize; 3], k: &GaussianKernel<T>) -> Result<()> {
    if dims.iter().any(|&n| k.radius() >= n) {
        return Err(Error::KernelTooLarge {
            radius: k.radius(),
            dims,
        });
    }
    Ok(())
}

fn stride(dims: [usize; 3], axis: usize) -> usize {
    match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    }
}

/// Flat offsets of the first element of every line running along `axis`.
fn line_starts(dims: [usize; 3], axis: usize) -> Vec<usize> {
    let [nh, nw, nd] = dims;
    let mut starts = Vec::new();
    match axis {
        0 => {
            for w in 0..nw {
                for d in 0..nd {
                    starts.push(w * nd + d);
                }
            }
        }
        1 => {
            for h in 0..nh {
                for d in 0..nd {
                    starts.push(h * nw * nd + d);
                }
            }
        }
        _ => {
            for h in 0..nh {
                for w in 0..nw {
                    starts.push((h * nw + w) * nd);
                }
            }
        }
    }
    starts
}

/// One zero-padded 1D correlation pass with centred `taps` along `axis`.
pub(crate) fn conv_axis<T: Scalar>(src: &[T], dims: [usize; 3], axis: usize, taps: &[T]) -> Vec<T> {
    let r = taps.len() / 2;
    let n = dims[axis];
    let st = stride(dims, axis);
    let mut out = vec![T::zero(); src.len()];
    for base in line_starts(dims, axis) {
        for c in 0..n {
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(n - 1);
            let mut acc = T::zero();
            for s in lo..=hi {
                acc += src[base + s * st] * taps[s + r - c];
            }
            out[base + c * st] = acc;
        }
    }
    out
}

/// Applies `taps[axis]` along each axis in turn (d, then w, then h).
fn separable<T: Scalar>(src: &[T], dims: [usize; 3], taps: [&[T]; 3]) -> Vec<T> {
    let a = conv_axis(src, dims, 2, taps[2]);
    let b = conv_axis(&a, dims, 1, taps[1]);
    conv_axis(&b, dims, 0, taps[0])
}

pub fn smooth_volume<T: Scalar>(x: &Volume3D<T>, k: &GaussianKernel<T>) -> Result<SmoothOutput<T>> {
    check_fits(x.dims(), k)?;
    let p = k.profile();
    let z = x.with_data(separable(x.data(), x.dims(), [p, p, p]));
    Ok(SmoothOutput {
        z,
        sigma_used: k.sigma(),
        kernel: k.clone(),
    })
}

/// `x * dq/dsigma`, i.e. the derivative of the smoothed volume with respect
/// to sigma at fixed radius.
///
/// `dq/dsigma` is a sum of three separable terms (one per axis carrying the
/// derivative profile), so this costs eight 1D passes.
pub fn smooth_dsigma<T: Scalar>(x: &Volume3D<T>, k: &GaussianKernel<T>) -> Result<Volume3D<T>> {
    check_fits(x.dims(), k)?;
    let dims = x.dims();
    let (p, dp) = (k.profile(), k.profile_dsigma());
    let along_d = conv_axis(x.data(), dims, 2, p);
    let term_h = conv_axis(&conv_axis(&along_d, dims, 1, p), dims, 0, dp);
    let term_w = conv_axis(&conv_axis(&along_d, dims, 1, dp), dims, 0, p);
    let hw = conv_axis(&conv_axis(x.data(), dims, 1, p), dims, 0, p);
    let term_d = conv_axis(&hw, dims, 2, dp);
    let sum = term_h
        .iter()
        .zip(&term_w)
        .zip(&term_d)
        .map(|((&a, &b), &c)| a + b + c)
        .collect();
    Ok(x.with_data(sum))
}

/// `sum(upstream * (x * dq/dsigma))`: the chain rule through the filter width.
pub fn smooth_backward_sigma<T: Scalar>(
    x: &Volume3D<T>,
    k: &GaussianKernel<T>,
    upstream: &Volume3D<T>,
) -> Result<T> {
    x.check_same_shape(upstream, "upstream gradient")?;
    Ok(upstream.dot(&smooth_dsigma(x, k)?))
}

/// Gradient with respect to the input: correlation of `upstream` with the
/// flipped filter. `q` is symmetric, so this is smoothing with `q` itself.
pub fn smooth_backward_input<T: Scalar>(
    k: &GaussianKernel<T>,
    upstream: &Volume3D<T>,
) -> Result<Volume3D<T>> {
    check_fits(upstream.dims(), k)?;
    let flipped: Vec<T> = k.profile().iter().rev().copied().collect();
    let f = flipped.as_slice();
    Ok(upstream.with_data(separable(upstream.data(), upstream.dims(), [f, f, f])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, build_kernel_at_radius};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, 3.0, |_, _, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct triple sum over the full 3D filter.
    fn direct(x: &Volume3D<f64>, k: &GaussianKernel<f64>) -> Volume3D<f64> {
        let r = k.radius() as isize;
        let [nh, nw, nd] = x.dims();
        Volume3D::from_fn(x.dims(), x.voxel_size_mm(), |h, w, d| {
            let mut acc = 0.0;
            for i in -r..=r {
                for j in -r..=r {
                    for l in -r..=r {
                        let (a, b, c) = (h as isize + i, w as isize + j, d as isize + l);
                        if a >= 0 && b >= 0 && c >= 0 && a < nh as isize && b < nw as isize && c < nd as isize {
                            acc += x[[a as usize, b as usize, c as usize]] * k.at(i, j, l);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let mut x = Volume3D::zeros([11, 11, 11], 3.0);
        x[[5, 5, 5]] = 1.0;
        let k = build_kernel::<f64>(1.0, 4.0).unwrap();
        let z = smooth_volume(&x, &k).unwrap().z;
        for i in -5isize..=5 {
            for j in -5isize..=5 {
                for l in -5isize..=5 {
                    let v = z[[(5 + i) as usize, (5 + j) as usize, (5 + l) as usize]];
                    let inside = i.abs() <= 2 && j.abs() <= 2 && l.abs() <= 2;
                    let want = if inside { k.at(i, j, l) } else { 0.0 };
                    assert!((v - want).abs() < 1e-16);
                }
            }
        }
    }

    #[test]
    fn constant_interior_is_preserved() {
        let x = Volume3D::filled([9, 9, 9], 3.0, 1.0);
        let k = build_kernel::<f64>(1.0, 4.0).unwrap();
        let z = smooth_volume(&x, &k).unwrap().z;
        assert!((z[[4, 4, 4]] - 1.0).abs() < 1e-15);
        assert!(z[[0, 0, 0]] < 1.0);
    }

    #[test]
    fn separable_matches_direct() {
        let x = random_volume([16, 16, 16], 7);
        let k = build_kernel::<f64>(1.5, 4.0).unwrap();
        let a = smooth_volume(&x, &k).unwrap().z;
        let b = direct(&x, &k);
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn kernel_too_large() {
        let x = Volume3D::<f64>::zeros([4, 8, 8], 3.0);
        let k = build_kernel::<f64>(2.5, 4.0).unwrap();
        assert_eq!(k.radius(), 5);
        assert!(matches!(smooth_volume(&x, &k), Err(Error::KernelTooLarge { .. })));
    }

    #[test]
    fn dsigma_matches_direct_dq() {
        let x = random_volume([8, 9, 10], 2);
        let k = build_kernel::<f64>(1.2, 4.0).unwrap();
        let fast = smooth_dsigma(&x, &k).unwrap();
        let r = k.radius() as isize;
        let slow = Volume3D::from_fn(x.dims(), 3.0, |h, w, d| {
            let mut acc = 0.0;
            for i in -r..=r {
                for j in -r..=r {
                    for l in -r..=r {
                        acc += x.get_or_zero(h as isize + i, w as isize + j, d as isize + l)
                            * k.dsigma_at(i, j, l);
                    }
                }
            }
            acc
        });
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sigma_zero_upstream() {
        let x = random_volume([8, 8, 8], 1);
        let k = build_kernel::<f64>(1.2, 4.0).unwrap();
        let u = Volume3D::zeros([8, 8, 8], 3.0);
        assert_eq!(smooth_backward_sigma(&x, &k, &u).unwrap(), 0.0);
        assert!(smooth_backward_sigma(&x, &k, &Volume3D::zeros([8, 8, 7], 3.0)).is_err());
    }

    #[test]
    fn backward_sigma_matches_finite_difference() {
        let x = random_volume([8, 8, 8], 5);
        let (sigma, h) = (1.2, 1e-5);
        let k = build_kernel::<f64>(sigma, 4.0).unwrap();
        let ones = Volume3D::filled([8, 8, 8], 3.0, 1.0);
        let analytic = smooth_backward_sigma(&x, &k, &ones).unwrap();
        let loss = |s: f64| {
            let kk = build_kernel_at_radius(s, 4.0, k.radius());
            direct(&x, &kk).sum()
        };
        let fd = (loss(sigma + h) - loss(sigma - h)) / (2.0 * h);
        assert!((analytic - fd).abs() / fd.abs() < 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn constant_input_has_no_interior_sigma_gradient() {
        let x = Volume3D::filled([10, 10, 10], 3.0, 2.5);
        let k = build_kernel::<f64>(1.0, 4.0).unwrap();
        let r = k.radius();
        let u = Volume3D::from_fn([10, 10, 10], 3.0, |h, w, d| {
            let inside = |c: usize| c >= r && c < 10 - r;
            if inside(h) && inside(w) && inside(d) { 1.0 } else { 0.0 }
        });
        assert!(smooth_backward_sigma(&x, &k, &u).unwrap().abs() < 1e-8);
    }

    #[test]
    fn backward_input_of_delta_is_kernel() {
        let k = build_kernel::<f64>(1.0, 4.0).unwrap();
        let mut u = Volume3D::zeros([9, 9, 9], 3.0);
        u[[3, 4, 5]] = 1.0;
        let g = smooth_backward_input(&k, &u).unwrap();
        assert!((g[[3, 4, 5]] - k.at(0, 0, 0)).abs() < 1e-16);
        assert!((g[[1, 4, 5]] - k.at(2, 0, 0)).abs() < 1e-16);
        let zero = smooth_backward_input(&k, &Volume3D::zeros([9, 9, 9], 3.0)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_input_matches_finite_difference() {
        let x = random_volume([8, 8, 8], 11);
        let u = random_volume([8, 8, 8], 12);
        let k = build_kernel::<f64>(1.3, 4.0).unwrap();
        let g = smooth_backward_input(&k, &u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        for _ in 0..20 {
            let idx = rng.random_range(0..x.len());
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let f = |v: &Volume3D<f64>| smooth_volume(v, &k).unwrap().z.dot(&u);
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = g.data()[idx];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn noise_variance_reduction() {
        use rand_distr::{Distribution, StandardNormal};
        let k = build_kernel::<f64>(1.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dims = [12, 12, 12];
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        let mut n = 0.0f64;
        for _ in 0..200 {
            let x = Volume3D::from_fn(dims, 3.0, |_, _, _| StandardNormal.sample(&mut rng));
            let z = smooth_volume(&x, &k).unwrap().z;
            for h in 2..10 {
                for w in 2..10 {
                    for d in 2..10 {
                        let v = z[[h, w, d]];
                        sum += v;
                        sum2 += v * v;
                        n += 1.0;
                    }
                }
            }
        }
        let var = sum2 / n - (sum / n).powi(2);
        let want = k.sum_sq();
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn linear_adjoint_and_range(seed in 0u64..10_000, sigma in 0.4f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let dims = [9, 10, 11];
            let x1 = random_volume(dims, seed);
            let x2 = random_volume(dims, seed + 1);
            let u = random_volume(dims, seed + 2);
            let k = build_kernel::<f64>(sigma, 4.0).unwrap();
            let s = |v: &Volume3D<f64>| smooth_volume(v, &k).unwrap().z;
            let combo = x1.zip_map(&x2, |p, q| a * p + b * q);
            let lhs = s(&combo);
            let rhs = s(&x1).zip_map(&s(&x2), |p, q| a * p + b * q);
            for (p, q) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((p - q).abs() < 1e-10);
            }
            let adj = smooth_backward_input(&k, &u).unwrap();
            prop_assert!((s(&x1).dot(&u) - x1.dot(&adj)).abs() < 1e-9);
            // interior voxels are convex combinations of their neighbourhood
            let z = s(&x1);
            let r = k.radius();
            let (lo, hi) = (x1.min(), x1.max());
            for h in r..dims[0] - r {
                for w in r..dims[1] - r {
                    for d in r..dims[2] - r {
                        let v = z[[h, w, d]];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn interior_mass_preserved(seed in 0u64..10_000, sigma in 0.4f64..1.6) {
            let k = build_kernel::<f64>(sigma, 4.0).unwrap();
            let r = k.radius();
            let dims = [12, 12, 12];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Volume3D::from_fn(dims, 3.0, |h, w, d| {
                let inside = |c: usize| c >= r && c < 12 - r;
                if inside(h) && inside(w) && inside(d) { rng.random::<f64>() } else { 0.0 }
            });
            let z = smooth_volume(&x, &k).unwrap().z;
            prop_assert!((z.sum() - x.sum()).abs() < 1e-8);
        }
    }
}
