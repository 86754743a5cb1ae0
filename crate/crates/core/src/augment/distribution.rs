use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{AugmentParams, THETA_LEN};
use super::warp::warp_volume;
use crate::error::{Error, Result};
use crate::io::{decode_f32, encode_f32, read_file, write_atomic};
use crate::scalar::Scalar;
use crate::volume::{Cohort, Volume3D};

/// Gaussian over warp parameters, with a precomputed symmetric square root
/// of the covariance.
#[derive(Clone, Debug)]
pub struct ParamDistribution {
    mu: Vec<f64>,
    sigma: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl ParamDistribution {
    pub fn new(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = mu.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::DimMismatch(format!(
                "mean of length {n} with {}x{} covariance",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::Factorization(format!("covariance asymmetric by {asym}")));
        }
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let eig = sigma.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let tol = 1e-10 + 1e-6 * top;
        let low = eig.eigenvalues.min();
        if low < -tol {
            return Err(Error::Factorization(format!(
                "covariance not positive semi-definite (eigenvalue {low})"
            )));
        }
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let root =
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        Ok(Self { mu, sigma, root })
    }

    /// Point mass at `mu`.
    pub fn degenerate(mu: Vec<f64>) -> Self {
        let n = mu.len();
        Self::new(mu, DMatrix::zeros(n, n)).expect("zero covariance is valid")
    }

    pub fn identity() -> Self {
        Self::degenerate(AugmentParams::identity().to_vec())
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + L xi` with `L L^T = sigma`.
    pub fn sample_vec<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let offset = &self.root * xi;
        self.mu.iter().zip(offset.iter()).map(|(m, o)| m + o).collect()
    }

    /// Writes `<stem>.json` (header and mean) and `<stem>.cov` (row-major
    /// little-endian f32 covariance).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = DistributionHeader {
            format_version: 1,
            dim: self.dim(),
            mu: self.mu.clone(),
        };
        write_atomic(
            &stem.with_extension("json"),
            &serde_json::to_vec_pretty(&header).expect("header serializes"),
        )?;
        let n = self.dim();
        let values = (0..n).flat_map(|i| (0..n).map(move |j| (i, j)));
        write_atomic(
            &stem.with_extension("cov"),
            &encode_f32(values.map(|(i, j)| self.sigma[(i, j)] as f32)),
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let hp = stem.with_extension("json");
        let header: DistributionHeader =
            serde_json::from_slice(&read_file(&hp)?).map_err(|e| Error::Header {
                path: hp.clone(),
                msg: e.to_string(),
            })?;
        if header.format_version != 1 || header.mu.len() != header.dim {
            return Err(Error::Header {
                path: hp,
                msg: "unsupported version or inconsistent dim".into(),
            });
        }
        let cov = decode_f32(&read_file(&stem.with_extension("cov"))?)?;
        let n = header.dim;
        if cov.len() != n * n {
            return Err(Error::SizeMismatch {
                expected: n * n,
                found: cov.len(),
            });
        }
        let sigma = DMatrix::from_row_iterator(n, n, cov.into_iter().map(f64::from));
        Self::new(header.mu, sigma)
    }
}

#[derive(Serialize, Deserialize)]
struct DistributionHeader {
    format_version: u32,
    dim: usize,
    mu: Vec<f64>,
}

pub fn sample_theta<R: Rng + ?Sized>(dist: &ParamDistribution, rng: &mut R) -> Result<AugmentParams> {
    if dist.dim() != THETA_LEN {
        return Err(Error::DimMismatch(format!(
            "distribution over {} parameters, warps need {THETA_LEN}",
            dist.dim()
        )));
    }
    AugmentParams::from_vec(&dist.sample_vec(rng))
}

/// For each subject, warps `per_subject` distinct randomly chosen volumes
/// with independently sampled parameters.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(
    cohort: &Cohort<T>,
    dist: &ParamDistribution,
    per_subject: usize,
    rng: &mut R,
) -> Result<Vec<Volume3D<T>>> {
    let mut out = Vec::with_capacity(per_subject * cohort.len());
    for s in cohort.subjects() {
        if per_subject > s.volumes.len() {
            return Err(Error::Invalid(format!(
                "subject {} has {} volumes, {per_subject} requested",
                s.id,
                s.volumes.len()
            )));
        }
        let picks = sample_indices(rng, s.volumes.len(), per_subject);
        for idx in picks.iter() {
            let theta = sample_theta(dist, rng)?;
            out.push(warp_volume(&s.volumes[idx], &theta));
        }
    }
    Ok(out)
}
