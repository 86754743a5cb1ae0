//! Synthetic cohorts: a fixed blob phantom, deformed per subject, with
//! per-volume noise and lateralized activation blobs.
//!
//! Coordinates below are normalized to `[-1, 1]` per axis in `(h, w, d)`
//! order; `w` is the left/right axis and `w < 0` is the left half.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{warp::normalized_coord, warp_volume, DeformationCaps};
use crate::error::{Error, Result};
use crate::volume::{Cohort, Label, Subject, Volume3D};

/// Base phantom blobs: centre, width (normalized units), amplitude.
pub const BASE_BLOBS: [([f64; 3], f64, f64); 6] = [
    ([0.0, 0.0, 0.0], 0.35, 1.0),
    ([-0.3, -0.35, 0.15], 0.18, 0.6),
    ([-0.3, 0.35, 0.15], 0.18, 0.6),
    ([0.35, 0.0, -0.25], 0.2, 0.5),
    ([0.1, -0.4, -0.35], 0.15, 0.4),
    ([0.1, 0.4, -0.35], 0.15, 0.4),
];

/// Ellipsoidal tissue mask with semi-axes `MASK_AXES`, a logistic edge of
/// width `MASK_EDGE` and level `MASK_LEVEL`; blobs are added inside it.
pub const MASK_AXES: [f64; 3] = [0.75, 0.85, 0.7];
pub const MASK_EDGE: f64 = 0.02;
pub const MASK_LEVEL: f64 = 1.0;

/// Activation blobs, mirror images across `w = 0`.
pub const LEFT_ACTIVATION: [f64; 3] = [0.0, -0.5, 0.0];
pub const RIGHT_ACTIVATION: [f64; 3] = [0.0, 0.5, 0.0];
pub const ACTIVATION_WIDTH: f64 = 0.22;

/// Smallest extent per axis that resolves the blobs above.
pub const MIN_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub voxel_size_mm: f64,
    /// Multiplies every deformation cap.
    pub deformation: f64,
    pub caps: DeformationCaps,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-subject noise scale is drawn from `U(1 - s, 1 + s)`.
    pub noise_spread: f64,
    pub activation: f64,
    /// Volumes per label block; blocks cycle left, rest, right, rest.
    pub block_len: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            voxel_size_mm: 3.0,
            deformation: 1.0,
            caps: DeformationCaps::default(),
            noise_sigma: 0.003,
            noise_spread: 0.5,
            activation: 0.3,
            block_len: 3,
        }
    }
}

fn blob(p: [f64; 3], c: [f64; 3], width: f64) -> f64 {
    let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
    (-r2 / (2.0 * width * width)).exp()
}

fn coords(dims: [usize; 3], h: usize, w: usize, d: usize) -> [f64; 3] {
    [
        normalized_coord(h, dims[0]),
        normalized_coord(w, dims[1]),
        normalized_coord(d, dims[2]),
    ]
}

fn mask_radius(p: [f64; 3]) -> f64 {
    (0..3).map(|a| (p[a] / MASK_AXES[a]).powi(2)).sum::<f64>().sqrt()
}

fn mask_at(p: [f64; 3]) -> f64 {
    1.0 / (1.0 + ((mask_radius(p) - 1.0) / MASK_EDGE).exp())
}

pub fn base_phantom(dims: [usize; 3], voxel_size_mm: f64) -> Volume3D<f64> {
    Volume3D::from_fn(dims, voxel_size_mm, |h, w, d| {
        let p = coords(dims, h, w, d);
        let blobs = BASE_BLOBS.iter().map(|&(c, s, a)| a * blob(p, c, s)).sum::<f64>();
        mask_at(p) * (MASK_LEVEL + blobs)
    })
}

pub fn activation_map(dims: [usize; 3], voxel_size_mm: f64, label: Label) -> Volume3D<f64> {
    let centre = match label {
        Label::Left => LEFT_ACTIVATION,
        Label::Right => RIGHT_ACTIVATION,
        Label::Rest => return Volume3D::zeros(dims, voxel_size_mm),
    };
    Volume3D::from_fn(dims, voxel_size_mm, |h, w, d| {
        blob(coords(dims, h, w, d), centre, ACTIVATION_WIDTH)
    })
}

pub fn block_label(index: usize, block_len: usize) -> Label {
    match (index / block_len.max(1)) % 4 {
        0 => Label::Left,
        2 => Label::Right,
        _ => Label::Rest,
    }
}

pub fn generate_phantom_cohort(
    seed: u64,
    n_subjects: usize,
    n_volumes: usize,
    dims: [usize; 3],
) -> Result<Cohort<f64>> {
    generate_phantom_cohort_with(seed, n_subjects, n_volumes, dims, &PhantomConfig::default())
}

pub fn generate_phantom_cohort_with(
    seed: u64,
    n_subjects: usize,
    n_volumes: usize,
    dims: [usize; 3],
    config: &PhantomConfig,
) -> Result<Cohort<f64>> {
    if dims.iter().any(|&n| n < MIN_DIM) {
        return Err(Error::Invalid(format!(
            "phantom dims {dims:?} too small to place blobs (need {MIN_DIM} per axis)"
        )));
    }
    if n_subjects < 2 || n_volumes == 0 {
        return Err(Error::Invalid(format!(
            "phantom needs at least 2 subjects and 1 volume, got {n_subjects} x {n_volumes}"
        )));
    }
    if !(config.noise_sigma >= 0.0 && config.deformation >= 0.0 && config.voxel_size_mm > 0.0) {
        return Err(Error::Config("phantom noise, deformation and voxel size".into()));
    }
    let base = base_phantom(dims, config.voxel_size_mm);
    let activations = [Label::Left, Label::Right].map(|l| activation_map(dims, config.voxel_size_mm, l));
    let subjects = (0..n_subjects)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let theta = config.caps.sample(config.deformation, &mut rng);
            let anatomy = warp_volume(&base, &theta);
            let spread = config.noise_spread.clamp(0.0, 1.0);
            let scale = if spread > 0.0 {
                rng.random_range(1.0 - spread..=1.0 + spread)
            } else {
                1.0
            };
            let noise = Normal::new(0.0, config.noise_sigma * scale).expect("finite noise sigma");
            let labels: Vec<Label> = (0..n_volumes).map(|i| block_label(i, config.block_len)).collect();
            let volumes = labels
                .iter()
                .map(|&label| {
                    let act = match label {
                        Label::Left => Some(&activations[0]),
                        Label::Right => Some(&activations[1]),
                        Label::Rest => None,
                    };
                    let mut v = anatomy.clone();
                    for (i, x) in v.data_mut().iter_mut().enumerate() {
                        if let Some(a) = act {
                            *x += config.activation * a.data()[i];
                        }
                        *x += noise.sample(&mut rng);
                    }
                    v
                })
                .collect();
            Subject {
                id: format!("sub{:02}", s + 1),
                volumes,
                labels: Some(labels),
            }
        })
        .collect();
    Cohort::new(subjects)
}
