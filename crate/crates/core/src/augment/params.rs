use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Control points per axis of the spline grid.
pub const TPS_GRID: usize = 4;
pub const TPS_POINTS: usize = TPS_GRID * TPS_GRID * TPS_GRID;
pub const TPS_LEN: usize = 3 * TPS_POINTS;
pub const AFFINE_LEN: usize = 12;
pub const THETA_LEN: usize = AFFINE_LEN + TPS_LEN;

/// Parameters of the affine + thin-plate-spline warp.
///
/// `affine` is a row-major 3x4 matrix acting on homogeneous normalized
/// coordinates in `[-1, 1]^3`. `tps` holds one displacement per control
/// point, `tps[3 * k + axis]`, also in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub affine: [f64; AFFINE_LEN],
    pub tps: Vec<f64>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        let mut affine = [0.0; AFFINE_LEN];
        affine[0] = 1.0;
        affine[5] = 1.0;
        affine[10] = 1.0;
        Self {
            affine,
            tps: vec![0.0; TPS_LEN],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut p = Self::identity();
        p.affine[3] = t[0];
        p.affine[7] = t[1];
        p.affine[11] = t[2];
        p
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != THETA_LEN {
            return Err(Error::DimMismatch(format!(
                "theta has {} entries, expected {THETA_LEN}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(v.iter().position(|x| !x.is_finite()).unwrap()));
        }
        let mut affine = [0.0; AFFINE_LEN];
        affine.copy_from_slice(&v[..AFFINE_LEN]);
        Ok(Self {
            affine,
            tps: v[AFFINE_LEN..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.affine.to_vec();
        v.extend_from_slice(&self.tps);
        v
    }

    pub fn has_tps(&self) -> bool {
        self.tps.iter().any(|&d| d != 0.0)
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.affine[3], self.affine[7], self.affine[11]]
    }

    /// `A . [p, 1]`
    #[inline]
    pub fn apply_affine(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        [
            a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + a[3],
            a[4] * p[0] + a[5] * p[1] + a[6] * p[2] + a[7],
            a[8] * p[0] + a[9] * p[1] + a[10] * p[2] + a[11],
        ]
    }
}

/// Interpretable affine parameters, composed as `q = R Sh S p + t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineComponents {
    pub translation: [f64; 3],
    /// Radians about axes 0, 1, 2.
    pub rotation: [f64; 3],
    /// Relative scale change, `1 + s` per axis.
    pub scale: [f64; 3],
    /// Upper-triangular shear terms (01, 02, 12).
    pub shear: [f64; 3],
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl AffineComponents {
    pub fn matrix(&self) -> [f64; AFFINE_LEN] {
        let [a, b, c] = self.rotation;
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        let r = matmul(&rz, &matmul(&ry, &rx));
        let [s01, s02, s12] = self.shear;
        let sh = [[1.0, s01, s02], [0.0, 1.0, s12], [0.0, 0.0, 1.0]];
        let s = self.scale;
        let sc = [[1.0 + s[0], 0.0, 0.0], [0.0, 1.0 + s[1], 0.0], [0.0, 0.0, 1.0 + s[2]]];
        let m = matmul(&r, &matmul(&sh, &sc));
        let t = self.translation;
        [
            m[0][0], m[0][1], m[0][2], t[0], m[1][0], m[1][1], m[1][2], t[1], m[2][0], m[2][1],
            m[2][2], t[2],
        ]
    }
}

/// Per-component magnitudes of a random deformation at full strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationCaps {
    pub translation: f64,
    pub rotation: f64,
    pub scale: f64,
    pub shear: f64,
    pub tps: f64,
}

impl Default for DeformationCaps {
    fn default() -> Self {
        Self {
            translation: 0.05,
            rotation: PI / 32.0,
            scale: 0.05,
            shear: 0.05,
            tps: 0.05,
        }
    }
}

impl DeformationCaps {
    /// Independent uniform draws in `[-cap * level, cap * level]`.
    pub fn sample<R: Rng + ?Sized>(&self, level: f64, rng: &mut R) -> AugmentParams {
        let mut u = |cap: f64| {
            let a = cap * level;
            if a > 0.0 {
                rng.random_range(-a..=a)
            } else {
                0.0
            }
        };
        let comps = AffineComponents {
            translation: [u(self.translation), u(self.translation), u(self.translation)],
            rotation: [u(self.rotation), u(self.rotation), u(self.rotation)],
            scale: [u(self.scale), u(self.scale), u(self.scale)],
            shear: [u(self.shear), u(self.shear), u(self.shear)],
        };
        let tps = (0..TPS_LEN).map(|_| u(self.tps)).collect();
        AugmentParams {
            affine: comps.matrix(),
            tps,
        }
    }
}
