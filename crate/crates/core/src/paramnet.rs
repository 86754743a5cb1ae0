//! The parameters network: predicts one filter width per volume.
//!
//! `x -> x - reference -> 2x2x2 max-pool -> w . pooled + b -> softplus`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume3D;

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Pooled grid extent: `ceil(n / 2)` per axis.
pub fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|n| n.div_ceil(2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamNetWeights<T> {
    pub w: Vec<T>,
    pub b: T,
    pub reference: Volume3D<T>,
}

impl<T: Scalar> ParamNetWeights<T> {
    pub fn zeros(reference: Volume3D<T>) -> Self {
        let p = pooled_dims(reference.dims()).iter().product();
        Self {
            w: vec![T::zero(); p],
            b: T::zero(),
            reference,
        }
    }

    pub fn pooled_len(&self) -> usize {
        self.w.len()
    }

    fn check(&self) -> Result<()> {
        let p: usize = pooled_dims(self.reference.dims()).iter().product();
        if self.w.len() != p {
            return Err(Error::DimMismatch(format!(
                "weight length {} but reference pools to {p} cells",
                self.w.len()
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`fan_in = P`, `fan_out = 1`) and zero bias.
pub fn init_weights<T: Scalar>(reference: Volume3D<T>, seed: u64) -> ParamNetWeights<T> {
    let mut weights = ParamNetWeights::zeros(reference);
    let bound = (6.0 / (weights.pooled_len() as f64 + 1.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in &mut weights.w {
        *w = T::lit(rng.random_range(-bound..bound));
    }
    weights
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ParamNetTape<T> {
    pub centered: Volume3D<T>,
    pub pooled: Vec<T>,
    /// Flat volume index of the winning voxel of each pooled cell.
    pub argmax: Vec<usize>,
    pub pre_activation: T,
    pub sigma: T,
}

/// Blockwise max over non-overlapping 2x2x2 blocks; partial edge blocks use
/// the cells they have. Ties go to the first cell in flat order.
pub fn max_pool<T: Scalar>(v: &Volume3D<T>) -> (Vec<T>, Vec<usize>) {
    let dims = v.dims();
    let pd = pooled_dims(dims);
    let mut pooled = Vec::with_capacity(pd.iter().product());
    let mut argmax = Vec::with_capacity(pooled.capacity());
    for ph in 0..pd[0] {
        for pw in 0..pd[1] {
            for pz in 0..pd[2] {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for h in 2 * ph..(2 * ph + 2).min(dims[0]) {
                    for w in 2 * pw..(2 * pw + 2).min(dims[1]) {
                        for d in 2 * pz..(2 * pz + 2).min(dims[2]) {
                            let idx = v.flat_index(h, w, d);
                            let x = v.data()[idx];
                            if x > best {
                                best = x;
                                best_idx = idx;
                            }
                        }
                    }
                }
                pooled.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (pooled, argmax)
}

pub fn paramnet_forward<T: Scalar>(
    x: &Volume3D<T>,
    weights: &ParamNetWeights<T>,
) -> Result<ParamNetTape<T>> {
    weights.check()?;
    x.check_same_shape(&weights.reference, "paramnet input vs reference")?;
    let centered = x.zip_map(&weights.reference, |a, r| a - r);
    let (pooled, argmax) = max_pool(&centered);
    let pre_activation = dot(&weights.w, &pooled) + weights.b;
    Ok(ParamNetTape {
        centered,
        pooled,
        argmax,
        sigma: softplus(pre_activation),
        pre_activation,
    })
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamNetGrad<T> {
    pub dw: Vec<T>,
    pub db: T,
}

fn check_tape<T: Scalar>(tape: &ParamNetTape<T>, weights: &ParamNetWeights<T>) -> Result<()> {
    if tape.pooled.len() != weights.w.len()
        || dot(&weights.w, &tape.pooled) + weights.b != tape.pre_activation
    {
        return Err(Error::Invalid(
            "stale tape: not produced by these weights".into(),
        ));
    }
    Ok(())
}

pub fn paramnet_backward<T: Scalar>(
    tape: &ParamNetTape<T>,
    weights: &ParamNetWeights<T>,
    dl_dsigma: T,
) -> Result<ParamNetGrad<T>> {
    check_tape(tape, weights)?;
    let db = dl_dsigma * logistic(tape.pre_activation);
    Ok(ParamNetGrad {
        dw: tape.pooled.iter().map(|&p| db * p).collect(),
        db,
    })
}

/// Gradient with respect to the network input: each pooled cell routes its
/// share to the recorded winner only.
pub fn paramnet_backward_input<T: Scalar>(
    tape: &ParamNetTape<T>,
    weights: &ParamNetWeights<T>,
    dl_dsigma: T,
) -> Result<Volume3D<T>> {
    check_tape(tape, weights)?;
    let dpre = dl_dsigma * logistic(tape.pre_activation);
    let mut g = vec![T::zero(); tape.centered.len()];
    for (&idx, &w) in tape.argmax.iter().zip(&weights.w) {
        g[idx] += dpre * w;
    }
    Ok(tape.centered.with_data(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_volume(dims: [usize; 3], seed: u64, scale: f64) -> Volume3D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, 3.0, |_, _, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
    }

    #[test]
    fn reference_input_gives_ln2() {
        let r = random_volume([6, 6, 6], 1, 1.0);
        let w = ParamNetWeights::zeros(r.clone());
        let tape = paramnet_forward(&r, &w).unwrap();
        assert!(tape.centered.data().iter().all(|&v| v == 0.0));
        assert!(tape.pooled.iter().all(|&v| v == 0.0));
        assert!((tape.sigma - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pools_block_max() {
        let vals = [0.1, -0.3, 0.7, 0.2, 0.0, -0.1, 0.5, 0.4];
        let v = Volume3D::new([2, 2, 2], 3.0, vals.to_vec()).unwrap();
        let (p, a) = max_pool(&v);
        assert_eq!(p, vec![0.7]);
        assert_eq!(a, vec![2]);
    }

    #[test]
    fn odd_dims_use_partial_blocks() {
        let v = Volume3D::<f64>::from_fn([3, 1, 1], 3.0, |h, _, _| h as f64);
        let (p, a) = max_pool(&v);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(a, vec![1, 2]);
        assert_eq!(pooled_dims([3, 5, 4]), [2, 3, 2]);
    }

    #[test]
    fn ties_go_to_first_index() {
        let v = Volume3D::<f64>::filled([2, 2, 2], 3.0, 1.0);
        assert_eq!(max_pool(&v).1, vec![0]);
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert_eq!(softplus(1e4f64), 1e4);
        assert!(softplus(-1e4f64) >= 0.0);
        assert!(softplus(-30.0f64) > 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(logistic(0.0f64), 0.5);
        assert!((logistic(1e4f64) - 1.0).abs() < 1e-15);
        assert!(logistic(-1e4f64) >= 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_grad() {
        let r = random_volume([4, 4, 4], 2, 1.0);
        let w = init_weights(r.clone(), 3);
        let x = random_volume([4, 4, 4], 4, 1.0);
        let tape = paramnet_forward(&x, &w).unwrap();
        let g = paramnet_backward(&tape, &w, 0.0).unwrap();
        assert!(g.dw.iter().all(|&v| v == 0.0));
        assert_eq!(g.db, 0.0);
    }

    #[test]
    fn stale_tape_detected() {
        let r = random_volume([4, 4, 4], 2, 1.0);
        let w = init_weights(r.clone(), 3);
        let tape = paramnet_forward(&random_volume([4, 4, 4], 5, 1.0), &w).unwrap();
        let other = init_weights(r, 4);
        assert!(paramnet_backward(&tape, &other, 1.0).is_err());
    }

    #[test]
    fn weights_match_finite_differences() {
        let r = random_volume([8, 8, 8], 10, 0.5);
        let w = init_weights(r, 11);
        let x = random_volume([8, 8, 8], 12, 1.0);
        let tape = paramnet_forward(&x, &w).unwrap();
        let g = paramnet_backward(&tape, &w, 1.0).unwrap();
        let h = 1e-5;
        let sigma = |wt: &ParamNetWeights<f64>| paramnet_forward(&x, wt).unwrap().sigma;
        for i in 0..w.w.len() {
            let mut p = w.clone();
            p.w[i] += h;
            let mut m = w.clone();
            m.w[i] -= h;
            let fd = (sigma(&p) - sigma(&m)) / (2.0 * h);
            let rel = (g.dw[i] - fd).abs() / g.dw[i].abs().max(fd.abs()).max(1e-10);
            assert!(rel < 1e-4, "w[{i}]: {} vs {fd}", g.dw[i]);
        }
        let mut p = w.clone();
        p.b += h;
        let mut m = w.clone();
        m.b -= h;
        let fd = (sigma(&p) - sigma(&m)) / (2.0 * h);
        assert!((g.db - fd).abs() / fd.abs() < 1e-4);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let r = random_volume([6, 6, 6], 20, 0.5);
        let w = init_weights(r, 21);
        let x = random_volume([6, 6, 6], 22, 1.0);
        let tape = paramnet_forward(&x, &w).unwrap();
        let g = paramnet_backward_input(&tape, &w, 1.0).unwrap();
        let h = 1e-7;
        for idx in (0..x.len()).step_by(7) {
            let mut p = x.clone();
            p.data_mut()[idx] += h;
            let mut m = x.clone();
            m.data_mut()[idx] -= h;
            let fd = (paramnet_forward(&p, &w).unwrap().sigma - paramnet_forward(&m, &w).unwrap().sigma)
                / (2.0 * h);
            assert!((g.data()[idx] - fd).abs() < 1e-6, "{idx}");
        }
    }

    #[test]
    fn xavier_init() {
        let r = Volume3D::<f64>::zeros([40, 40, 40], 3.0);
        let a = init_weights(r.clone(), 7);
        let b = init_weights(r, 7);
        assert_eq!(a, b);
        assert_eq!(a.b, 0.0);
        let p = a.w.len() as f64;
        assert_eq!(p, 8000.0);
        let mean = a.w.iter().sum::<f64>() / p;
        let var = a.w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
        let want = 2.0 / (p + 1.0);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
        let bound = (6.0 / (p + 1.0)).sqrt();
        assert!(a.w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn noise_raises_mean_pooled_value() {
        // Max-pooling rectifies zero-mean noise, so the pooled mean grows with
        // the noise amplitude.
        let base = random_volume([8, 8, 8], 30, 0.2);
        let w = ParamNetWeights::zeros(base.clone());
        let mut previous = 0.0;
        for (step, amp) in [0.05, 0.1, 0.2, 0.4].into_iter().enumerate() {
            let mut total = 0.0;
            for trial in 0..100 {
                let noise = random_volume([8, 8, 8], 1000 * step as u64 + trial, amp);
                let x = base.zip_map(&noise, |a, n| a + n);
                let t = paramnet_forward(&x, &w).unwrap();
                total += t.pooled.iter().sum::<f64>() / t.pooled.len() as f64;
            }
            let mean = total / 100.0;
            assert!(mean > previous, "amp {amp}: {mean} <= {previous}");
            previous = mean;
        }
    }

    proptest! {
        #[test]
        fn sigma_positive_and_pool_monotone(seed in 0u64..5000, scale in 0.0f64..50.0, bump in 0.0f64..2.0, idx in 0usize..125) {
            let r = random_volume([5, 5, 5], seed, 1.0);
            let mut w = init_weights(r.clone(), seed + 1);
            w.w.iter_mut().for_each(|v| *v *= scale);
            let x = random_volume([5, 5, 5], seed + 2, 1.0);
            let t = paramnet_forward(&x, &w).unwrap();
            prop_assert!(t.sigma > 0.0);
            let mut y = x.clone();
            y.data_mut()[idx] += bump;
            let t2 = paramnet_forward(&y, &w).unwrap();
            for (a, b) in t.pooled.iter().zip(&t2.pooled) {
                prop_assert!(b >= a);
            }
        }
    }
}
