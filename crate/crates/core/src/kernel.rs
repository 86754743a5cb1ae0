//! Truncated, renormalized isotropic 3D Gaussian filters and their
//! derivative with respect to the width.
//!
//! The 3D filter is assembled as the outer product of one normalized 1D
//! profile. This is exact (the isotropic Gaussian factorizes over axes and
//! renormalizing a product equals the product of renormalized factors) and
//! makes the octahedral symmetry hold bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the truncation radius is derived from `t * sigma`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusConvention {
    /// `r = floor((t * sigma + 0.5) / 2)`
    #[default]
    Half,
    /// `r = floor(t * sigma + 0.5)`
    Full,
}

impl RadiusConvention {
    pub fn radius(self, sigma: f64, t: f64) -> usize {
        let ext = t * sigma + 0.5;
        let r = match self {
            RadiusConvention::Half => (ext / 2.0).floor(),
            RadiusConvention::Full => ext.floor(),
        };
        r.max(0.0) as usize
    }

    /// Smallest sigma that still yields a radius of at least one.
    pub fn min_sigma(self, t: f64) -> f64 {
        match self {
            RadiusConvention::Half => 1.5 / t,
            RadiusConvention::Full => 0.5 / t,
        }
    }

    /// Sigma values at which the radius changes from `k - 1` to `k`.
    pub fn jump_point(self, k: usize, t: f64) -> f64 {
        match self {
            RadiusConvention::Half => (2.0 * k as f64 - 0.5) / t,
            RadiusConvention::Full => (k as f64 - 0.5) / t,
        }
    }

    /// Distance from `sigma` to the nearest radius jump.
    pub fn distance_to_jump(self, sigma: f64, t: f64) -> f64 {
        let r = self.radius(sigma, t);
        let below = self.jump_point(r.max(1), t);
        let above = self.jump_point(r + 1, t);
        (sigma - below).abs().min((above - sigma).abs())
    }
}

/// Discrete Gaussian filter `q` on `[-r, r]^3` and `dq/dsigma` at fixed `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel<T> {
    sigma: T,
    t: T,
    radius: usize,
    profile: Vec<T>,
    profile_dsigma: Vec<T>,
    q: Vec<T>,
    dq_dsigma: Vec<T>,
}

impl<T: Scalar> GaussianKernel<T> {
    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn truncation(&self) -> T {
        self.t
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Edge length `2r + 1`.
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Normalized 1D profile; `q = p ⊗ p ⊗ p`.
    pub fn profile(&self) -> &[T] {
        &self.profile
    }

    /// Derivative of the normalized 1D profile with respect to sigma.
    pub fn profile_dsigma(&self) -> &[T] {
        &self.profile_dsigma
    }

    /// Flattened `(2r+1)^3` filter, last axis fastest.
    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn dq_dsigma(&self) -> &[T] {
        &self.dq_dsigma
    }

    /// Filter value at signed offsets in `[-r, r]`.
    pub fn at(&self, i: isize, j: isize, k: isize) -> T {
        self.q[self.offset_index(i, j, k)]
    }

    pub fn dsigma_at(&self, i: isize, j: isize, k: isize) -> T {
        self.dq_dsigma[self.offset_index(i, j, k)]
    }

    fn offset_index(&self, i: isize, j: isize, k: isize) -> usize {
        let r = self.radius as isize;
        let s = self.side();
        (((i + r) as usize) * s + (j + r) as usize) * s + (k + r) as usize
    }

    /// Sum of squared filter taps; the variance gain on white noise.
    pub fn sum_sq(&self) -> T {
        self.q.iter().map(|&v| v * v).sum()
    }
}

/// Builds the filter with the default (half) radius convention.
pub fn build_kernel<T: Scalar>(sigma: T, t: T) -> Result<GaussianKernel<T>> {
    build_kernel_with(sigma, t, RadiusConvention::Half)
}

pub fn build_kernel_with<T: Scalar>(
    sigma: T,
    t: T,
    convention: RadiusConvention,
) -> Result<GaussianKernel<T>> {
    if !sigma.is_finite() || sigma <= T::zero() || !t.is_finite() || t <= T::zero() {
        return Err(Error::Invalid(format!(
            "kernel needs finite positive sigma and t, got sigma={sigma} t={t}"
        )));
    }
    let radius = convention.radius(sigma.to_f64_(), t.to_f64_());
    if radius == 0 {
        return Err(Error::SingleCellKernel {
            sigma: sigma.to_f64_(),
            t: t.to_f64_(),
        });
    }
    Ok(build_kernel_at_radius(sigma, t, radius))
}

/// Filter with an explicit radius; `r` is held fixed in the derivative.
pub fn build_kernel_at_radius<T: Scalar>(sigma: T, t: T, radius: usize) -> GaussianKernel<T> {
    let r = radius as isize;
    let two = T::lit(2.0);
    // Unnormalized 1D Gaussian and its sigma derivative. The common
    // 1/(sqrt(2 pi) sigma) prefactor cancels under renormalization.
    let e: Vec<T> = (-r..=r)
        .map(|k| {
            let k2 = T::lit((k * k) as f64);
            (-k2 / (two * sigma * sigma)).exp()
        })
        .collect();
    let s: T = e.iter().copied().sum();
    let profile: Vec<T> = e.iter().map(|&v| v / s).collect();
    // d/dsigma of e_k / S = p_k (k^2 - sum_j p_j j^2) / sigma^3
    let s3 = sigma * sigma * sigma;
    let second_moment: T = (-r..=r)
        .zip(&profile)
        .map(|(k, &p)| p * T::lit((k * k) as f64))
        .sum();
    let profile_dsigma: Vec<T> = (-r..=r)
        .zip(&profile)
        .map(|(k, &p)| p * (T::lit((k * k) as f64) - second_moment) / s3)
        .collect();

    let side = profile.len();
    let mut q = Vec::with_capacity(side * side * side);
    let mut dq = Vec::with_capacity(side * side * side);
    // Factors are multiplied in a canonical order (sorted distance from the
    // centre) so that rounding cannot break the symmetry.
    let ru = radius;
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                let mut m = [i.abs_diff(ru), j.abs_diff(ru), k.abs_diff(ru)];
                m.sort_unstable();
                let [a, b, c] = m.map(|d| profile[ru + d]);
                let [da, db, dc] = m.map(|d| profile_dsigma[ru + d]);
                q.push(a * b * c);
                dq.push(da * b * c + a * db * c + a * b * dc);
            }
        }
    }
    GaussianKernel {
        sigma,
        t,
        radius,
        profile,
        profile_dsigma,
        q,
        dq_dsigma: dq,
    }
}

/// `2 sqrt(2 ln 2)`
pub fn fwhm_factor<T: Scalar>() -> T {
    T::lit(2.0) * (T::lit(2.0) * T::LN_2()).sqrt()
}

pub fn sigma_to_fwhm_mm<T: Scalar>(sigma_voxels: T, voxel_size_mm: T) -> T {
    sigma_voxels * fwhm_factor::<T>() * voxel_size_mm
}

pub fn fwhm_to_sigma<T: Scalar>(fwhm_mm: T, voxel_size_mm: T) -> T {
    fwhm_mm / (fwhm_factor::<T>() * voxel_size_mm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyMode {
    #[default]
    Clip,
    StochasticBump,
}

/// Handling of widths too small to give a multi-cell filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyPolicy {
    pub mode: DegeneracyMode,
    /// Lower clip in clip mode; must be at least `threshold`.
    pub sigma_floor: f64,
    /// Widths below this give a single-cell filter.
    pub threshold: f64,
    pub bump_prob: f64,
    pub bump_amount: f64,
    /// Extra floor applied in both modes (minimum-smoothing option).
    pub min_sigma: Option<f64>,
}

impl DegeneracyPolicy {
    pub fn clip(t: f64, convention: RadiusConvention) -> Self {
        let threshold = convention.min_sigma(t);
        Self {
            mode: DegeneracyMode::Clip,
            sigma_floor: threshold + 1e-6,
            threshold,
            bump_prob: 0.1,
            bump_amount: 1.0,
            min_sigma: None,
        }
    }

    pub fn stochastic(t: f64, convention: RadiusConvention, p: f64) -> Self {
        Self {
            mode: DegeneracyMode::StochasticBump,
            bump_prob: p,
            ..Self::clip(t, convention)
        }
    }

    /// Enforces a minimum smoothing of `fwhm_voxels` voxels FWHM.
    pub fn with_min_fwhm_voxels(mut self, fwhm_voxels: f64) -> Self {
        self.min_sigma = Some(fwhm_to_sigma(fwhm_voxels, 1.0));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DegeneracyMode::Clip && self.sigma_floor < self.threshold {
            return Err(Error::Config(format!(
                "sigma floor {} below single-cell threshold {}",
                self.sigma_floor, self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.bump_prob) {
            return Err(Error::Config(format!("bump probability {}", self.bump_prob)));
        }
        Ok(())
    }

    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, sigma: T, rng: &mut R) -> PolicyOutcome<T> {
        let mut out = PolicyOutcome {
            sigma,
            gradient_passes: true,
            bumped: false,
        };
        match self.mode {
            DegeneracyMode::Clip => {
                let floor = T::lit(self.sigma_floor);
                if sigma < floor {
                    out.sigma = floor;
                    out.gradient_passes = false;
                }
            }
            DegeneracyMode::StochasticBump => {
                if sigma < T::lit(self.threshold) && rng.random::<f64>() < self.bump_prob {
                    out.sigma = sigma + T::lit(self.bump_amount);
                    out.bumped = true;
                }
            }
        }
        if let Some(m) = self.min_sigma {
            if out.sigma < T::lit(m) {
                out.sigma = T::lit(m);
                out.gradient_passes = false;
            }
        }
        out
    }
}

/// Result of applying a [`DegeneracyPolicy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOutcome<T> {
    pub sigma: T,
    /// False when the width was clamped, i.e. d(out)/d(in) = 0.
    pub gradient_passes: bool,
    pub bumped: bool,
}

pub fn apply_degeneracy_policy<T: Scalar, R: Rng + ?Sized>(
    sigma: T,
    policy: &DegeneracyPolicy,
    rng: &mut R,
) -> T {
    policy.apply(sigma, rng).sigma
}
