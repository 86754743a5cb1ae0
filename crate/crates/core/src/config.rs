//! Run configuration, read from TOML or JSON.
//!
//! Every field has a default; a file only needs the keys it changes, e.g.
//!
//! ```toml
//! seed = 3
//! [kernel]
//! t = 4.0
//! radius_convention = "full"
//! [kernel.degeneracy]
//! mode = "stochastic_bump"
//! p = 0.1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AlignConfig;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::gradcheck::GradCheckConfig;
use crate::io::read_file;
use crate::kernel::{DegeneracyMode, DegeneracyPolicy, RadiusConvention};
use crate::phantom::PhantomConfig;
use crate::trainer::{DecoderConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegeneracyConfig {
    pub mode: DegeneracyMode,
    /// Bump probability in stochastic mode.
    pub p: f64,
    /// Clip floor; defaults to the single-cell threshold plus 1e-6.
    pub floor: Option<f64>,
    /// Optional minimum smoothing, in voxels FWHM (2 is the usual advice).
    pub min_fwhm_voxels: Option<f64>,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        Self {
            mode: DegeneracyMode::Clip,
            p: 0.1,
            floor: None,
            min_fwhm_voxels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub t: f64,
    pub radius_convention: RadiusConvention,
    pub degeneracy: DegeneracyConfig,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            t: 4.0,
            radius_convention: RadiusConvention::Half,
            degeneracy: DegeneracyConfig::default(),
        }
    }
}

impl KernelConfig {
    pub fn policy(&self) -> Result<DegeneracyPolicy> {
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::Config(format!("kernel.t must be positive, got {}", self.t)));
        }
        let d = &self.degeneracy;
        let mut policy = match d.mode {
            DegeneracyMode::Clip => DegeneracyPolicy::clip(self.t, self.radius_convention),
            DegeneracyMode::StochasticBump => {
                DegeneracyPolicy::stochastic(self.t, self.radius_convention, d.p)
            }
        };
        if let Some(f) = d.floor {
            policy.sigma_floor = f;
        }
        if let Some(m) = d.min_fwhm_voxels {
            policy = policy.with_min_fwhm_voxels(m);
        }
        policy.validate()?;
        Ok(policy)
    }
}

/// Subject counts for the train / validation / test split, taken in cohort
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            train: 15,
            validation: 7,
            test: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub n_volumes: usize,
    pub dims: [usize; 3],
    #[serde(flatten)]
    pub phantom: PhantomConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 29,
            n_volumes: 24,
            dims: [16, 16, 16],
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub kernel: KernelConfig,
    pub cohort: CohortConfig,
    pub partition: PartitionConfig,
    pub align: AlignConfig,
    pub train: TrainConfig,
    pub decoder: DecoderConfig,
    pub experiment: ExperimentConfig,
    pub gradcheck: GradCheckConfig,
}

impl Config {
    /// Parses TOML for `.toml` files and JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Config = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.policy()?;
        self.train.validate()?;
        self.decoder.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
