//! Pairwise alignment of subjects' first volumes and the resulting
//! Gaussian over warp parameters.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distribution::ParamDistribution;
use super::params::{AugmentParams, AFFINE_LEN, THETA_LEN};
use super::warp::alignment_loss_grad;
use crate::error::{Error, Result};
use crate::volume::{Cohort, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Total gradient steps per pair.
    pub iterations: usize,
    /// Leading steps that update only the affine part.
    pub affine_iterations: usize,
    pub step_affine: f64,
    pub step_tps: f64,
    /// Fit both (a, b) and (b, a).
    pub ordered_pairs: bool,
    /// Covariance shrinkage toward its diagonal.
    pub shrinkage: f64,
    /// Consecutive rejected steps (each halves the step size) after which a
    /// pair stops early. A pair counts as diverged if no finite loss at or
    /// below the starting value was reached by then.
    pub divergence_patience: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            affine_iterations: 100,
            step_affine: 1.0,
            step_tps: 10.0,
            ordered_pairs: true,
            shrinkage: 0.1,
            divergence_patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairResult {
    pub fixed: usize,
    pub moving: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub theta: AugmentParams,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct AlignmentFit {
    pub distribution: ParamDistribution,
    /// Unshrunk sample covariance.
    pub sample_covariance: DMatrix<f64>,
    pub pairs: Vec<PairResult>,
}

/// Gradient descent on the warp parameters so that `moving` warped matches
/// `fixed` in the least-squares sense.
pub fn align_pair(fixed: &Volume3D<f64>, moving: &Volume3D<f64>, config: &AlignConfig) -> PairResult {
    let mut theta = AugmentParams::identity().to_vec();
    let mut best = theta.clone();
    let mut best_grad = Vec::new();
    let mut initial = f64::NAN;
    let mut best_loss = f64::INFINITY;
    let mut scale = 1.0;
    let mut rising = 0;
    let mut diverged = false;
    for it in 0..=config.iterations {
        let spline_step = it >= config.affine_iterations;
        if spline_step && it == config.affine_iterations && it > 0 {
            // new parameters join in; the stored gradient is stale
            theta.clone_from(&best);
            best_loss = f64::INFINITY;
            scale = 1.0;
        }
        let params = AugmentParams::from_vec(&theta).expect("finite theta");
        let (loss, grad) = alignment_loss_grad(fixed, moving, &params, spline_step);
        if it == 0 {
            initial = loss;
        }
        if loss.is_finite() && loss <= best_loss {
            best_loss = loss;
            best.clone_from(&theta);
            best_grad = grad;
            rising = 0;
            scale = (scale * 1.2f64).min(1.0);
        } else {
            // reject the step and retry from the best point with half the step
            rising += 1;
            if rising >= config.divergence_patience {
                diverged = !(best_loss <= initial);
                break;
            }
            scale *= 0.5;
        }
        if it == config.iterations {
            break;
        }
        for (i, ((t, b), g)) in theta.iter_mut().zip(&best).zip(&best_grad).enumerate() {
            let step = if i < AFFINE_LEN {
                config.step_affine
            } else if spline_step {
                config.step_tps
            } else {
                0.0
            };
            *t = b - scale * step * g;
        }
    }
    PairResult {
        fixed: 0,
        moving: 0,
        initial_loss: initial,
        final_loss: best_loss,
        theta: AugmentParams::from_vec(&best).expect("finite theta"),
        diverged,
    }
}

/// Aligns every pair of subjects' first volumes and fits `N(mu, Sigma)` to
/// the resulting parameters. Diverged pairs are dropped with a warning and
/// kept in the report.
pub fn fit_pairwise_alignment(cohort: &Cohort<f64>, config: &AlignConfig) -> Result<AlignmentFit> {
    if cohort.len() < 2 {
        return Err(Error::Degenerate(format!(
            "alignment needs at least 2 subjects, got {}",
            cohort.len()
        )));
    }
    if cohort.len() < 3 {
        log::warn!("fewer than 3 subjects: covariance estimate is degenerate");
    }
    let firsts: Vec<&Volume3D<f64>> = cohort
        .subjects()
        .iter()
        .map(|s| {
            s.volumes
                .first()
                .ok_or_else(|| Error::Degenerate(format!("subject {} has no volumes", s.id)))
        })
        .collect::<Result<_>>()?;
    let n = firsts.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| if config.ordered_pairs { a != b } else { a < b })
        .collect();
    let results: Vec<PairResult> = pairs
        .par_iter()
        .map(|&(a, b)| PairResult {
            fixed: a,
            moving: b,
            ..align_pair(firsts[a], firsts[b], config)
        })
        .collect();
    for r in results.iter().filter(|r| r.diverged) {
        log::warn!(
            "pair ({}, {}) diverged; dropped from the distribution",
            cohort.subjects()[r.fixed].id,
            cohort.subjects()[r.moving].id
        );
    }
    let kept: Vec<Vec<f64>> = results
        .iter()
        .filter(|r| !r.diverged)
        .map(|r| r.theta.to_vec())
        .collect();
    if kept.is_empty() {
        return Err(Error::Diverged("every alignment pair diverged".into()));
    }
    let count = kept.len() as f64;
    let mu: Vec<f64> = (0..THETA_LEN)
        .map(|i| kept.iter().map(|t| t[i]).sum::<f64>() / count)
        .collect();
    let mut cov = DMatrix::<f64>::zeros(THETA_LEN, THETA_LEN);
    if kept.len() > 1 {
        for t in &kept {
            let d = nalgebra::DVector::from_fn(THETA_LEN, |i, _| t[i] - mu[i]);
            cov += &d * d.transpose();
        }
        cov /= count - 1.0;
    }
    let shrunk = shrink_toward_diagonal(&cov, config.shrinkage);
    Ok(AlignmentFit {
        distribution: ParamDistribution::new(mu, shrunk)?,
        sample_covariance: cov,
        pairs: results,
    })
}

/// `(1 - a) S + a diag(S)`
pub fn shrink_toward_diagonal(s: &DMatrix<f64>, a: f64) -> DMatrix<f64> {
    let mut out = s * (1.0 - a);
    for i in 0..s.nrows() {
        out[(i, i)] = s[(i, i)];
    }
    out
}
