//! Training objectives.
//!
//! * The inter-subject variability loss
//!   `L = sum_i |Z_i - mean(Z)|^2 + lambda |X_i - Z_i|^2`, where `|.|^2` is
//!   the sum of squared voxel values.
//! * A decoding head: `a_i = v . Z_i + c`, normalized with the statistics
//!   of the current batch, squashed by a logistic and scored with binary
//!   cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::paramnet::logistic;
use crate::scalar::Scalar;
use crate::smooth::{smooth_backward_sigma, SmoothOutput};
use crate::volume::Volume3D;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLossReport<T> {
    /// `variability_term + lambda * penalty_term`, raw sums.
    pub total: T,
    pub variability_term: T,
    pub penalty_term: T,
    /// The three values above divided by `N * voxels`.
    pub total_scaled: T,
    pub variability_scaled: T,
    pub penalty_scaled: T,
    pub per_volume_sigma: Vec<T>,
    pub lambda: T,
}

fn check_batch<T: Scalar>(batch: &[Volume3D<T>], smoothed: &[Volume3D<T>]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Degenerate(format!(
            "variability needs at least 2 volumes, got {}",
            batch.len()
        )));
    }
    if batch.len() != smoothed.len() {
        return Err(Error::DimMismatch(format!(
            "{} inputs vs {} smoothed volumes",
            batch.len(),
            smoothed.len()
        )));
    }
    for (x, z) in batch.iter().zip(smoothed) {
        x.check_same_shape(&batch[0], "batch volume")?;
        x.check_same_shape(z, "smoothed volume")?;
    }
    Ok(())
}

fn batch_mean<T: Scalar>(vols: &[Volume3D<T>]) -> Volume3D<T> {
    let n = T::from_usize_(vols.len());
    let mut acc = vec![T::zero(); vols[0].len()];
    for v in vols {
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += x;
        }
    }
    vols[0].with_data(acc.into_iter().map(|a| a / n).collect())
}

pub fn variability_loss<T: Scalar>(
    batch: &[Volume3D<T>],
    sigmas: &[T],
    smoothed: &[Volume3D<T>],
    lambda: T,
) -> Result<BatchLossReport<T>> {
    check_batch(batch, smoothed)?;
    let mean = batch_mean(smoothed);
    let variability: T = smoothed.iter().map(|z| z.sq_dist(&mean)).sum();
    let penalty: T = batch.iter().zip(smoothed).map(|(x, z)| x.sq_dist(z)).sum();
    let total = variability + lambda * penalty;
    let scale = T::from_usize_(batch.len() * batch[0].len());
    Ok(BatchLossReport {
        total,
        variability_term: variability,
        penalty_term: penalty,
        total_scaled: total / scale,
        variability_scaled: variability / scale,
        penalty_scaled: penalty / scale,
        per_volume_sigma: sigmas.to_vec(),
        lambda,
    })
}

/// `dL/dZ_i = 2 (Z_i - mean(Z)) - 2 lambda (X_i - Z_i)`.
///
/// The coupling through the batch mean contributes
/// `-(2/N) sum_j (Z_j - mean(Z))`, which vanishes identically.
pub fn variability_upstream<T: Scalar>(
    batch: &[Volume3D<T>],
    smoothed: &[Volume3D<T>],
    lambda: T,
) -> Result<Vec<Volume3D<T>>> {
    check_batch(batch, smoothed)?;
    let mean = batch_mean(smoothed);
    let two = T::lit(2.0);
    Ok(batch
        .iter()
        .zip(smoothed)
        .map(|(x, z)| {
            let data = z
                .data()
                .iter()
                .zip(mean.data())
                .zip(x.data())
                .map(|((&zi, &m), &xi)| two * (zi - m) - two * lambda * (xi - zi))
                .collect();
            z.with_data(data)
        })
        .collect())
}

/// `dL/dsigma_i` for every volume of the batch (raw-sum loss).
pub fn variability_loss_backward<T: Scalar>(
    batch: &[Volume3D<T>],
    smoothed: &[SmoothOutput<T>],
    lambda: T,
) -> Result<Vec<T>> {
    let zs: Vec<Volume3D<T>> = smoothed.iter().map(|s| s.z.clone()).collect();
    let upstream = variability_upstream(batch, &zs, lambda)?;
    batch
        .iter()
        .zip(smoothed)
        .zip(&upstream)
        .map(|((x, s), u)| smooth_backward_sigma(x, &s.kernel, u))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<T> {
    pub v: Vec<T>,
    pub c: T,
    pub norm_epsilon: T,
}

impl<T: Scalar> DecoderWeights<T> {
    /// Glorot-uniform readout over `n_voxels` inputs, zero bias.
    pub fn init(n_voxels: usize, seed: u64) -> Self {
        let bound = (6.0 / (n_voxels as f64 + 1.0)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            v: (0..n_voxels)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect(),
            c: T::zero(),
            norm_epsilon: T::lit(1e-5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderTape<T> {
    pub pre_norm: Vec<T>,
    pub normalized: Vec<T>,
    pub batch_mean: T,
    /// `sqrt(var + eps)`
    pub batch_scale: T,
    pub probs: Vec<T>,
}

/// Forward pass using the statistics of this batch, always.
pub fn decoder_forward<T: Scalar>(
    batch: &[Volume3D<T>],
    weights: &DecoderWeights<T>,
) -> Result<DecoderTape<T>> {
    if batch.len() < 2 {
        return Err(Error::Degenerate(
            "batch normalization needs at least 2 volumes".into(),
        ));
    }
    for z in batch {
        if z.len() != weights.v.len() {
            return Err(Error::DimMismatch(format!(
                "decoder expects {} voxels, got {}",
                weights.v.len(),
                z.len()
            )));
        }
    }
    let pre_norm: Vec<T> = batch
        .iter()
        .map(|z| {
            z.data()
                .iter()
                .zip(&weights.v)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                + weights.c
        })
        .collect();
    let n = T::from_usize_(pre_norm.len());
    let mean = pre_norm.iter().copied().sum::<T>() / n;
    let var = pre_norm.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
    if var == T::zero() {
        return Err(Error::Degenerate(
            "decoder pre-activations have zero variance".into(),
        ));
    }
    let scale = (var + weights.norm_epsilon).sqrt();
    let normalized: Vec<T> = pre_norm.iter().map(|&a| (a - mean) / scale).collect();
    let probs = normalized.iter().map(|&a| logistic(a)).collect();
    Ok(DecoderTape {
        pre_norm,
        normalized,
        batch_mean: mean,
        batch_scale: scale,
        probs,
    })
}

const PROB_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy. Probabilities are clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss<T: Scalar>(probs: &[T], labels: &[T]) -> Result<T> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::DimMismatch(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut clamped = 0;
    let total: T = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                clamped += 1;
            }
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    if clamped > 0 {
        log::warn!("bce: clamped {clamped} saturated probabilities");
    }
    Ok(total / T::from_usize_(probs.len()))
}

#[derive(Clone, Debug)]
pub struct DecoderGrad<T> {
    pub dv: Vec<T>,
    pub dc: T,
    /// Gradient with respect to each decoder input volume.
    pub dz: Vec<Volume3D<T>>,
}

/// Backward of `bce_loss(decoder_forward(batch))`, including the coupling
/// of every item through the batch mean and variance.
pub fn decoder_backward<T: Scalar>(
    batch: &[Volume3D<T>],
    weights: &DecoderWeights<T>,
    tape: &DecoderTape<T>,
    labels: &[T],
) -> Result<DecoderGrad<T>> {
    if labels.len() != batch.len() || tape.probs.len() != batch.len() {
        return Err(Error::DimMismatch("labels, tape and batch lengths differ".into()));
    }
    let n = T::from_usize_(batch.len());
    // d(mean bce)/d(normalized) for a logistic output
    let g: Vec<T> = tape
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y) / n)
        .collect();
    let g_mean = g.iter().copied().sum::<T>() / n;
    let g_dot = g
        .iter()
        .zip(&tape.normalized)
        .map(|(&a, &b)| a * b)
        .sum::<T>()
        / n;
    let da: Vec<T> = g
        .iter()
        .zip(&tape.normalized)
        .map(|(&gi, &ai)| (gi - g_mean - ai * g_dot) / tape.batch_scale)
        .collect();
    let mut dv = vec![T::zero(); weights.v.len()];
    for (z, &d) in batch.iter().zip(&da) {
        for (acc, &x) in dv.iter_mut().zip(z.data()) {
            *acc += d * x;
        }
    }
    let dc = da.iter().copied().sum();
    let dz = batch
        .iter()
        .zip(&da)
        .map(|(z, &d)| z.with_data(weights.v.iter().map(|&w| d * w).collect()))
        .collect();
    Ok(DecoderGrad { dv, dc, dz })
}

/// Fraction of items whose probability lands on the label's side of 0.5.
pub fn accuracy<T: Scalar>(probs: &[T], labels: &[T]) -> f64 {
    let half = T::lit(0.5);
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > half) == (y > half))
        .count();
    hits as f64 / probs.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, build_kernel_at_radius};
    use crate::smooth::smooth_volume;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, 3.0, |_, _, _| rng.random::<f64>())
    }

    /// Loss by explicit per-voxel loops.
    fn brute_loss(xs: &[Volume3D<f64>], zs: &[Volume3D<f64>], lambda: f64) -> (f64, f64) {
        let n = xs.len();
        let mut var = 0.0;
        let mut pen = 0.0;
        for v in 0..xs[0].len() {
            let m: f64 = zs.iter().map(|z| z.data()[v]).sum::<f64>() / n as f64;
            for i in 0..n {
                var += (zs[i].data()[v] - m).powi(2);
                pen += lambda * (xs[i].data()[v] - zs[i].data()[v]).powi(2);
            }
        }
        (var, pen)
    }

    #[test]
    fn hand_case() {
        let x1 = Volume3D::new([1, 1, 3], 3.0, vec![0.0, 1.0, 0.0]).unwrap();
        let x2 = Volume3D::new([1, 1, 3], 3.0, vec![0.0, 0.0, 1.0]).unwrap();
        let xs = vec![x1, x2];
        let r = variability_loss(&xs, &[1.0, 1.0], &xs, 0.5).unwrap();
        assert_eq!(r.variability_term, 1.0);
        assert_eq!(r.penalty_term, 0.0);
        assert_eq!(r.total, 1.0);
        assert_eq!(brute_loss(&xs, &xs, 0.5), (1.0, 0.0));
        assert!((r.total_scaled - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identical_volumes_have_no_variability() {
        let x = random_volume([6, 6, 6], 1);
        let k = build_kernel(1.0, 4.0).unwrap();
        let z = smooth_volume(&x, &k).unwrap().z;
        let xs = vec![x.clone(), x];
        let r = variability_loss(&xs, &[1.0, 1.0], &[z.clone(), z], 0.5).unwrap();
        assert_eq!(r.variability_term, 0.0);
        assert!(r.penalty_term > 0.0);
        assert_eq!(r.total, 0.5 * r.penalty_term);
    }

    #[test]
    fn rejects_single_volume() {
        let x = random_volume([2, 2, 2], 1);
        assert!(matches!(
            variability_loss(std::slice::from_ref(&x), &[1.0], std::slice::from_ref(&x), 0.5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn penalty_grows_with_sigma() {
        let xs: Vec<_> = (0..3).map(|i| random_volume([10, 10, 10], i)).collect();
        let pen = |s: f64| {
            let k = build_kernel(s, 4.0).unwrap();
            let zs: Vec<_> = xs.iter().map(|x| smooth_volume(x, &k).unwrap().z).collect();
            variability_loss(&xs, &[s; 3], &zs, 0.5).unwrap().penalty_term
        };
        assert!(pen(0.4) < pen(3.0));
    }

    fn smoothed_batch(xs: &[Volume3D<f64>], sigmas: &[f64]) -> Vec<SmoothOutput<f64>> {
        xs.iter()
            .zip(sigmas)
            .map(|(x, &s)| smooth_volume(x, &build_kernel(s, 4.0).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        let xs: Vec<_> = (0..3).map(|i| random_volume([8, 8, 8], 10 + i)).collect();
        let sigmas = [0.7, 1.2, 1.6];
        let lambda = 0.5;
        let outs = smoothed_batch(&xs, &sigmas);
        let grads = variability_loss_backward(&xs, &outs, lambda).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            let eval = |s: f64| {
                let zs: Vec<_> = (0..3)
                    .map(|j| {
                        let k = if j == i {
                            build_kernel_at_radius(s, 4.0, outs[j].kernel.radius())
                        } else {
                            outs[j].kernel.clone()
                        };
                        smooth_volume(&xs[j], &k).unwrap().z
                    })
                    .collect();
                let (v, p) = brute_loss(&xs, &zs, lambda);
                v + p
            };
            let fd = (eval(sigmas[i] + h) - eval(sigmas[i] - h)) / (2.0 * h);
            let rel = (grads[i] - fd).abs() / fd.abs().max(1e-10);
            assert!(rel < 1e-3, "i={i}: {} vs {fd}", grads[i]);
        }
    }

    #[test]
    fn symmetric_batch_gives_equal_gradients() {
        let x = random_volume([8, 8, 8], 3);
        let xs = vec![x.clone(), x.clone(), x];
        let outs = smoothed_batch(&xs, &[1.1; 3]);
        let g = variability_loss_backward(&xs, &outs, 0.5).unwrap();
        assert_eq!(g[0], g[1]);
        assert_eq!(g[1], g[2]);
        let g0 = variability_loss_backward(&xs[..2], &outs[..2], 0.0).unwrap();
        assert!(g0.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn normalization_identity() {
        let zs: Vec<_> = (0..10).map(|i| random_volume([4, 4, 4], 40 + i)).collect();
        let w = DecoderWeights::<f64>::init(64, 5);
        let t = decoder_forward(&zs, &w).unwrap();
        let n = t.normalized.len() as f64;
        let mean = t.normalized.iter().sum::<f64>() / n;
        let var = t.normalized.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        // var = v / (v + eps)
        let raw_var = t.batch_scale.powi(2) - w.norm_epsilon;
        assert!((var - raw_var / (raw_var + w.norm_epsilon)).abs() < 1e-12);
        assert!(t.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn symmetric_normalized_outputs_average_one_half() {
        let base = random_volume([3, 3, 3], 70);
        let dir = random_volume([3, 3, 3], 71);
        let zs: Vec<_> = [-2.0, -1.0, 1.0, 2.0]
            .iter()
            .map(|&s| base.zip_map(&dir, |a, b| a + s * b))
            .collect();
        let w = DecoderWeights::<f64>::init(27, 3);
        let t = decoder_forward(&zs, &w).unwrap();
        let mean = t.probs.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_readout_is_degenerate() {
        let zs: Vec<_> = (0..4).map(|i| random_volume([2, 2, 2], i)).collect();
        let w = DecoderWeights {
            v: vec![0.0; 8],
            c: 3.0,
            norm_epsilon: 1e-5,
        };
        assert!(matches!(decoder_forward(&zs, &w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bce_values() {
        let l = bce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = bce_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(l < 1e-11);
        assert!(bce_loss(&[0.5], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let zs: Vec<_> = (0..8).map(|i| random_volume([3, 3, 3], 50 + i)).collect();
        let labels = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mut w = DecoderWeights::<f64>::init(27, 9);
        w.c = 0.3;
        let loss = |w: &DecoderWeights<f64>, zs: &[Volume3D<f64>]| {
            bce_loss(&decoder_forward(zs, w).unwrap().probs, &labels).unwrap()
        };
        let t = decoder_forward(&zs, &w).unwrap();
        let g = decoder_backward(&zs, &w, &t, &labels).unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
        for i in 0..27 {
            let mut p = w.clone();
            p.v[i] += h;
            let mut m = w.clone();
            m.v[i] -= h;
            let fd = (loss(&p, &zs) - loss(&m, &zs)) / (2.0 * h);
            assert!(rel(g.dv[i], fd) < 1e-3, "v[{i}] {} vs {fd}", g.dv[i]);
        }
        assert!(g.dc.abs() < 1e-12, "bias cancels under normalization");
        for item in [0, 5] {
            for vox in [0, 13, 26] {
                let mut zp = zs.clone();
                zp[item].data_mut()[vox] += h;
                let mut zm = zs.clone();
                zm[item].data_mut()[vox] -= h;
                let fd = (loss(&w, &zp) - loss(&w, &zm)) / (2.0 * h);
                assert!(rel(g.dz[item].data()[vox], fd) < 1e-3);
            }
        }
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0.9, 0.2, 0.6, 0.4], &[1.0, 0.0, 0.0, 0.0]), 0.75);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn decomposition_and_permutation(seed in 0u64..10_000, lambda in 0.0f64..2.0) {
            let xs: Vec<_> = (0..4).map(|i| random_volume([3, 4, 2], seed * 8 + i)).collect();
            let zs: Vec<_> = (0..4).map(|i| random_volume([3, 4, 2], seed * 8 + 4 + i)).collect();
            let r = variability_loss(&xs, &[1.0; 4], &zs, lambda).unwrap();
            prop_assert!((r.total - (r.variability_term + lambda * r.penalty_term)).abs() < 1e-10);
            prop_assert!(r.variability_term >= 0.0 && r.penalty_term >= 0.0);
            let (bv, bp) = brute_loss(&xs, &zs, lambda);
            prop_assert!((bv - r.variability_term).abs() < 1e-10);
            prop_assert!((bp - lambda * r.penalty_term).abs() < 1e-10);
            let mut xr = xs.clone();
            let mut zr = zs.clone();
            xr.reverse();
            zr.reverse();
            let r2 = variability_loss(&xr, &[1.0; 4], &zr, lambda).unwrap();
            prop_assert!((r2.variability_term - r.variability_term).abs() < 1e-10);
        }
    }
}
