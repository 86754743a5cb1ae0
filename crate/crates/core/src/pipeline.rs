//! Parameters network, degeneracy policy and smoothing chained together.

use rand::Rng;
use rayon::prelude::*;

use crate::config::KernelConfig;
use crate::error::Result;
use crate::kernel::{build_kernel_with, DegeneracyPolicy, GaussianKernel, RadiusConvention};
use crate::paramnet::{paramnet_backward, paramnet_forward, ParamNetGrad, ParamNetTape, ParamNetWeights};
use crate::smooth::{smooth_backward_sigma, smooth_volume};
use crate::volume::Volume3D;

#[derive(Clone, Debug, PartialEq)]
pub struct Smoother {
    pub t: f64,
    pub convention: RadiusConvention,
    pub policy: DegeneracyPolicy,
}

#[derive(Clone, Debug)]
pub struct Smoothed {
    pub z: Volume3D<f64>,
    /// Width before the policy and the ceiling.
    pub sigma_raw: f64,
    /// Width of the filter actually applied (`sigma_raw` when unfiltered).
    pub sigma_used: f64,
    /// `None` when the volume passed through unfiltered.
    pub kernel: Option<GaussianKernel<f64>>,
    /// False when `sigma_used` does not depend on `sigma_raw`.
    pub gradient_passes: bool,
}

impl Smoothed {
    /// `d(sum(upstream * z)) / d(sigma_raw)`.
    pub fn dsigma(&self, x: &Volume3D<f64>, upstream: &Volume3D<f64>) -> Result<f64> {
        match (&self.kernel, self.gradient_passes) {
            (Some(k), true) => smooth_backward_sigma(x, k, upstream),
            _ => Ok(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Decision {
    sigma: f64,
    gradient_passes: bool,
    filtered: bool,
}

impl Smoother {
    pub fn from_config(k: &KernelConfig) -> Result<Self> {
        Ok(Self {
            t: k.t,
            convention: k.radius_convention,
            policy: k.policy()?,
        })
    }

    /// Largest width whose filter still fits inside `dims`.
    pub fn max_sigma(&self, dims: [usize; 3]) -> f64 {
        let n = dims.iter().copied().min().unwrap_or(1);
        self.convention.jump_point(n, self.t) - 1e-9
    }

    pub fn kernel(&self, sigma: f64) -> Result<GaussianKernel<f64>> {
        build_kernel_with(sigma, self.t, self.convention)
    }

    fn decide<R: Rng + ?Sized>(&self, sigma: f64, dims: [usize; 3], rng: &mut R) -> Decision {
        let out = self.policy.apply(sigma, rng);
        let mut d = Decision {
            sigma: out.sigma,
            gradient_passes: out.gradient_passes,
            filtered: self.convention.radius(out.sigma, self.t) > 0,
        };
        let cap = self.max_sigma(dims);
        if d.sigma > cap {
            log::debug!("sigma {} clamped to {cap} to fit the volume", d.sigma);
            d.sigma = cap;
            d.gradient_passes = false;
        }
        if !d.filtered {
            // stochastic mode left a single-cell width in place
            d.gradient_passes = false;
        }
        d
    }

    fn apply_decision(&self, x: &Volume3D<f64>, sigma_raw: f64, d: Decision) -> Result<Smoothed> {
        if !d.filtered {
            return Ok(Smoothed {
                z: x.clone(),
                sigma_raw,
                sigma_used: d.sigma,
                kernel: None,
                gradient_passes: false,
            });
        }
        let k = self.kernel(d.sigma)?;
        let z = smooth_volume(x, &k)?.z;
        Ok(Smoothed {
            z,
            sigma_raw,
            sigma_used: d.sigma,
            kernel: Some(k),
            gradient_passes: d.gradient_passes,
        })
    }

    /// Width that would be applied for a predicted `sigma`.
    pub fn effective_sigma<R: Rng + ?Sized>(&self, sigma: f64, dims: [usize; 3], rng: &mut R) -> f64 {
        self.decide(sigma, dims, rng).sigma
    }

    /// Applies the policy to `sigma` and smooths `x` with the result.
    pub fn smooth_at<R: Rng + ?Sized>(&self, x: &Volume3D<f64>, sigma: f64, rng: &mut R) -> Result<Smoothed> {
        let d = self.decide(sigma, x.dims(), rng);
        self.apply_decision(x, sigma, d)
    }

    /// Smooths every volume with its own width. Policy draws happen in
    /// batch order so the result does not depend on thread scheduling.
    pub fn smooth_batch<R: Rng + ?Sized>(
        &self,
        xs: &[Volume3D<f64>],
        sigmas: &[f64],
        rng: &mut R,
    ) -> Result<Vec<Smoothed>> {
        let decisions: Vec<Decision> = xs
            .iter()
            .zip(sigmas)
            .map(|(x, &s)| self.decide(s, x.dims(), rng))
            .collect();
        xs.par_iter()
            .zip(sigmas.par_iter())
            .zip(decisions.par_iter())
            .map(|((x, &s), &d)| self.apply_decision(x, s, d))
            .collect()
    }
}

/// How widths are chosen for a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrontEnd<'a> {
    Adaptive(&'a ParamNetWeights<f64>),
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    /// Empty for a fixed front end.
    pub tapes: Vec<ParamNetTape<f64>>,
    pub smoothed: Vec<Smoothed>,
}

impl BatchForward {
    pub fn sigmas_used(&self) -> Vec<f64> {
        self.smoothed.iter().map(|s| s.sigma_used).collect()
    }

    pub fn outputs(&self) -> Vec<Volume3D<f64>> {
        self.smoothed.iter().map(|s| s.z.clone()).collect()
    }

    /// Sums the parameters-network gradients for per-volume `dL/dsigma`,
    /// in batch order.
    pub fn paramnet_grad(&self, weights: &ParamNetWeights<f64>, dsigma: &[f64]) -> Result<ParamNetGrad<f64>> {
        let mut acc = ParamNetGrad {
            dw: vec![0.0; weights.w.len()],
            db: 0.0,
        };
        for (tape, &g) in self.tapes.iter().zip(dsigma) {
            let one = paramnet_backward(tape, weights, g)?;
            for (a, d) in acc.dw.iter_mut().zip(&one.dw) {
                *a += d;
            }
            acc.db += one.db;
        }
        Ok(acc)
    }
}

pub fn batch_forward<R: Rng + ?Sized>(
    xs: &[Volume3D<f64>],
    front: FrontEnd<'_>,
    smoother: &Smoother,
    rng: &mut R,
) -> Result<BatchForward> {
    let (tapes, sigmas) = match front {
        FrontEnd::Adaptive(weights) => {
            let tapes: Vec<ParamNetTape<f64>> = xs
                .par_iter()
                .map(|x| paramnet_forward(x, weights))
                .collect::<Result<_>>()?;
            let sigmas = tapes.iter().map(|t| t.sigma).collect();
            (tapes, sigmas)
        }
        FrontEnd::Fixed(s) => (Vec::new(), vec![s; xs.len()]),
    };
    let smoothed = smoother.smooth_batch(xs, &sigmas, rng)?;
    Ok(BatchForward { tapes, smoothed })
}

/// Per-volume `dL/dsigma` for upstream gradients on the smoothed outputs.
pub fn batch_dsigma(xs: &[Volume3D<f64>], fwd: &BatchForward, upstream: &[Volume3D<f64>]) -> Result<Vec<f64>> {
    xs.par_iter()
        .zip(fwd.smoothed.par_iter())
        .zip(upstream.par_iter())
        .map(|((x, s), u)| s.dsigma(x, u))
        .collect()
}
