//! Experiments on trained checkpoints and their reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{warp_volume, DeformationCaps};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kernel::{fwhm_to_sigma, sigma_to_fwhm_mm};
use crate::paramnet::{paramnet_forward, ParamNetWeights};
use crate::pipeline::Smoother;
use crate::smooth::smooth_volume;
use crate::trainer::{evaluate_decoder, train_decoder, DecoderConfig, DecoderFront, TrainState};
use crate::volume::{Cohort, Volume3D};

/// How the reference is smoothed when scoring adaptive smoothing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSmoothing {
    /// With the width predicted for each compared volume.
    #[default]
    PerVolume,
    /// Once per subject, with the subject's mean width.
    SubjectMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Maximum uniform noise amplitude `m` of the noise sweep.
    pub noise_max: f64,
    /// Repetitions over the held-out subjects.
    pub trials: usize,
    pub caps: DeformationCaps,
    pub fixed_fwhm_mm: f64,
    pub decode_noise_sigma: f64,
    pub reference_smoothing: ReferenceSmoothing,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            noise_max: 0.25,
            trials: 10,
            caps: DeformationCaps::default(),
            fixed_fwhm_mm: 8.0,
            decode_noise_sigma: 0.25,
            reference_smoothing: ReferenceSmoothing::PerVolume,
        }
    }
}

/// Bumped whenever a CSV layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Pearson and Spearman correlation between two columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub x: String,
    pub y: String,
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Why the coefficients are missing, when they are.
    pub note: Option<String>,
}

/// Minimum sample size for reporting a correlation.
pub const MIN_CORRELATION_N: usize = 10;

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = rank;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

impl Correlation {
    pub fn compute(x_name: &str, y_name: &str, x: &[f64], y: &[f64]) -> Self {
        let mut c = Correlation {
            x: x_name.into(),
            y: y_name.into(),
            n: x.len(),
            pearson: None,
            spearman: None,
            note: None,
        };
        if x.len() < MIN_CORRELATION_N {
            c.note = Some(format!("undefined: n = {} < {MIN_CORRELATION_N}", x.len()));
            return c;
        }
        c.pearson = pearson(x, y);
        c.spearman = spearman(x, y);
        if c.pearson.is_none() {
            c.note = Some("undefined: a column is constant".into());
        }
        c
    }

    pub fn undefined(x_name: &str, y_name: &str, n: usize, why: &str) -> Self {
        Correlation {
            x: x_name.into(),
            y: y_name.into(),
            n,
            pearson: None,
            spearman: None,
            note: Some(format!("undefined: {why}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(u64),
    Num(f64),
    Text(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => write!(f, "{s}"),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// One CSV worth of rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        let i = self.columns.iter().position(|c| c == name).expect("known column");
        self.rows
            .iter()
            .map(|r| match &r[i] {
                Cell::Num(v) => *v,
                Cell::Int(v) => *v as f64,
                Cell::Text(_) => f64::NAN,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("schema_version,{}\n", self.columns.join(","));
        for r in &self.rows {
            out.push_str(&SCHEMA_VERSION.to_string());
            for c in r {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.rows
            .iter()
            .flatten()
            .all(|c| !matches!(c, Cell::Num(v) if !v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub tables: Vec<Table>,
    pub correlations: Vec<Correlation>,
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config: serde_json::Value) -> Self {
        ExperimentReport {
            experiment: experiment.into(),
            schema_version: SCHEMA_VERSION,
            config,
            tables: Vec::new(),
            correlations: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes `<table>.csv` for every table and `<experiment>.json` holding
    /// the config echo, correlations and summary.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for t in &self.tables {
            if !t.all_finite() {
                return Err(Error::NonFinite(0));
            }
            write_atomic(&dir.join(format!("{}.csv", t.name)), t.to_csv().as_bytes())?;
        }
        let meta = serde_json::json!({
            "experiment": self.experiment,
            "schema_version": self.schema_version,
            "config": self.config,
            "correlations": self.correlations,
            "summary": self.summary,
        });
        let text = serde_json::to_string_pretty(&meta).expect("report serializes");
        write_atomic(&dir.join(format!("{}.json", self.experiment)), text.as_bytes())
    }
}

/// Trained smoother plus everything needed to apply it.
pub struct Model<'a> {
    pub weights: &'a ParamNetWeights<f64>,
    pub smoother: &'a Smoother,
}

impl Model<'_> {
    /// Applied width for one volume.
    pub fn sigma(&self, x: &Volume3D<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let raw = paramnet_forward(x, self.weights)?.sigma;
        Ok(self.smoother.effective_sigma(raw, x.dims(), rng))
    }
}

/// Generator for one trial: `seed` on stream `trial + 1`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn require_volumes(cohort: &Cohort<f64>) -> Result<()> {
    if cohort.is_empty() || cohort.subjects().iter().any(|s| s.volumes.is_empty()) {
        return Err(Error::Degenerate("cohort without volumes".into()));
    }
    Ok(())
}

struct SweepRow {
    trial: usize,
    subject: String,
    volume: usize,
    rho: f64,
    amplitude: f64,
    sigma: f64,
}

fn sweep_report(
    name: &str,
    config: serde_json::Value,
    rows: Vec<SweepRow>,
    voxel_size_mm: f64,
    degenerate: Option<&str>,
) -> ExperimentReport {
    let mut table = Table::new(name, &["trial", "subject", "volume", "rho", "amplitude", "sigma", "fwhm_mm"]);
    for r in &rows {
        table.push(vec![
            r.trial.into(),
            r.subject.clone().into(),
            r.volume.into(),
            r.rho.into(),
            r.amplitude.into(),
            r.sigma.into(),
            sigma_to_fwhm_mm(r.sigma, voxel_size_mm).into(),
        ]);
    }
    let rho = table.column("rho");
    let fwhm = table.column("fwhm_mm");
    let corr = match degenerate {
        Some(why) => Correlation::undefined("rho", "fwhm_mm", rho.len(), why),
        None => Correlation::compute("rho", "fwhm_mm", &rho, &fwhm),
    };
    let mut report = ExperimentReport::new(name, config);
    report.summary.insert("rows".into(), rows.len() as f64);
    report.summary.insert("mean_fwhm_mm".into(), fwhm.iter().sum::<f64>() / fwhm.len().max(1) as f64);
    report.tables.push(table);
    report.correlations.push(corr);
    report
}

/// Adds `U(-a, a)` noise with `a = m * rho`, `rho ~ U(0, 1)`, to one random
/// volume per subject per trial and records the predicted width.
pub fn noise_sweep(
    model: &Model<'_>,
    cohort: &Cohort<f64>,
    m: f64,
    trials: usize,
    seed: u64,
    config: serde_json::Value,
) -> Result<ExperimentReport> {
    require_volumes(cohort)?;
    let per_trial: Vec<Vec<SweepRow>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            cohort
                .subjects()
                .iter()
                .map(|s| {
                    let volume = rng.random_range(0..s.volumes.len());
                    let rho: f64 = rng.random();
                    let a = m * rho;
                    let x = &s.volumes[volume];
                    let noisy = if a > 0.0 {
                        x.with_data(x.data().iter().map(|&v| v + rng.random_range(-a..=a)).collect())
                    } else {
                        x.clone()
                    };
                    Ok(SweepRow {
                        trial,
                        subject: s.id.clone(),
                        volume,
                        rho,
                        amplitude: a,
                        sigma: model.sigma(&noisy, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let voxel = cohort.voxel_size_mm().unwrap_or(1.0);
    let degenerate = (m == 0.0).then_some("no perturbation (m = 0)");
    Ok(sweep_report("noise_sweep", config, per_trial.into_iter().flatten().collect(), voxel, degenerate))
}

/// Warps one random volume per subject per trial with component-wise
/// uniform draws scaled by `rho * cap` and records the predicted width.
/// `fixed_rho` replaces the `U(0, 1)` draw when given.
pub fn deform_sweep(
    model: &Model<'_>,
    cohort: &Cohort<f64>,
    caps: &DeformationCaps,
    trials: usize,
    seed: u64,
    fixed_rho: Option<f64>,
    config: serde_json::Value,
) -> Result<ExperimentReport> {
    require_volumes(cohort)?;
    let per_trial: Vec<Vec<SweepRow>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            cohort
                .subjects()
                .iter()
                .map(|s| {
                    let volume = rng.random_range(0..s.volumes.len());
                    let rho: f64 = fixed_rho.unwrap_or_else(|| rng.random());
                    let theta = caps.sample(rho, &mut rng);
                    let warped = warp_volume(&s.volumes[volume], &theta);
                    Ok(SweepRow {
                        trial,
                        subject: s.id.clone(),
                        volume,
                        rho,
                        amplitude: rho,
                        sigma: model.sigma(&warped, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let voxel = cohort.voxel_size_mm().unwrap_or(1.0);
    let degenerate = (fixed_rho == Some(0.0)).then_some("no perturbation (rho = 0)");
    Ok(sweep_report("deform_sweep", config, per_trial.into_iter().flatten().collect(), voxel, degenerate))
}

struct VolumeScore {
    sigma: f64,
    raw: f64,
    fixed: f64,
    adaptive: f64,
    fixed_penalty: f64,
    adaptive_penalty: f64,
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Squared distances to `reference` of raw, fixed-width smoothed and
/// adaptively smoothed volumes, with the matching penalties.
///
/// The reference is smoothed with the same filter as the volume it is
/// compared against, or once per subject with the subject's mean width.
pub fn anatomy_eval(
    model: &Model<'_>,
    cohort: &Cohort<f64>,
    reference: &Volume3D<f64>,
    fixed_fwhm_mm: f64,
    mode: ReferenceSmoothing,
    config: serde_json::Value,
) -> Result<ExperimentReport> {
    require_volumes(cohort)?;
    let voxel = reference.voxel_size_mm();
    let fixed_sigma = fwhm_to_sigma(fixed_fwhm_mm, voxel);
    let fixed_kernel = model.smoother.kernel(fixed_sigma)?;
    let fixed_ref = smooth_volume(reference, &fixed_kernel)?.z;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scatter = Table::new(
        "anatomy_scatter",
        &["subject", "volume", "sigma", "fwhm_mm", "raw_diff", "fixed_diff", "adaptive_diff", "fixed_penalty", "adaptive_penalty"],
    );
    let mut table = Table::new(
        "anatomy_table",
        &["subject", "raw_diff", "fixed_diff", "adaptive_diff", "fixed_penalty", "adaptive_penalty", "adaptive_fwhm_mm"],
    );
    let mut subject_means = Vec::new();
    let mut within = Vec::new();
    let mut avg = [0.0; 6];
    for s in cohort.subjects() {
        let sigmas: Vec<f64> = s
            .volumes
            .iter()
            .map(|x| model.sigma(x, &mut rng))
            .collect::<Result<_>>()?;
        let mean_sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        let subject_ref = match mode {
            ReferenceSmoothing::SubjectMean => Some(smooth_volume(reference, &model.smoother.kernel(mean_sigma)?)?.z),
            ReferenceSmoothing::PerVolume => None,
        };
        let scores: Vec<VolumeScore> = s
            .volumes
            .par_iter()
            .zip(sigmas.par_iter())
            .map(|(x, &sigma)| {
                let k = model.smoother.kernel(sigma)?;
                let z = smooth_volume(x, &k)?.z;
                let zf = smooth_volume(x, &fixed_kernel)?.z;
                let adaptive = match &subject_ref {
                    Some(r) => z.sq_dist(r),
                    None => z.sq_dist(&smooth_volume(reference, &k)?.z),
                };
                Ok(VolumeScore {
                    sigma,
                    raw: x.sq_dist(reference),
                    fixed: zf.sq_dist(&fixed_ref),
                    adaptive,
                    fixed_penalty: x.sq_dist(&zf),
                    adaptive_penalty: x.sq_dist(&z),
                })
            })
            .collect::<Result<_>>()?;
        let n = scores.len() as f64;
        let mut m = [0.0; 6];
        for (i, v) in scores.iter().enumerate() {
            let fwhm = sigma_to_fwhm_mm(v.sigma, voxel);
            scatter.push(vec![
                s.id.clone().into(),
                i.into(),
                v.sigma.into(),
                fwhm.into(),
                v.raw.into(),
                v.fixed.into(),
                v.adaptive.into(),
                v.fixed_penalty.into(),
                v.adaptive_penalty.into(),
            ]);
            for (acc, x) in m.iter_mut().zip([v.raw, v.fixed, v.adaptive, v.fixed_penalty, v.adaptive_penalty, fwhm]) {
                *acc += x / n;
            }
        }
        let fwhms: Vec<f64> = sigmas.iter().map(|&s| sigma_to_fwhm_mm(s, voxel)).collect();
        within.push(variance(&fwhms));
        subject_means.push(m[5]);
        let mut row: Vec<Cell> = vec![s.id.clone().into()];
        row.extend(m.iter().map(|&v| Cell::Num(v)));
        table.push(row);
        for (a, v) in avg.iter_mut().zip(m) {
            *a += v / cohort.len() as f64;
        }
    }
    let mut row: Vec<Cell> = vec!["avg".into()];
    row.extend(avg.iter().map(|&v| Cell::Num(v)));
    table.push(row);
    let mut report = ExperimentReport::new("anatomy_eval", config);
    for (k, v) in ["raw_diff", "fixed_diff", "adaptive_diff", "fixed_penalty", "adaptive_penalty", "adaptive_fwhm_mm"]
        .iter()
        .zip(avg)
    {
        report.summary.insert(format!("mean_{k}"), v);
    }
    report.summary.insert("fixed_fwhm_mm".into(), fixed_fwhm_mm);
    report.summary.insert("between_subject_fwhm_var".into(), variance(&subject_means));
    report
        .summary
        .insert("mean_within_subject_fwhm_var".into(), within.iter().sum::<f64>() / within.len() as f64);
    let diff = scatter.column("adaptive_diff");
    let fwhm = scatter.column("fwhm_mm");
    report.correlations.push(Correlation::compute("fwhm_mm", "adaptive_diff", &fwhm, &diff));
    report.tables.push(table);
    report.tables.push(scatter);
    Ok(report)
}

/// Smoother checkpoint, split and settings needed by [`decode_eval`].
pub struct DecodeSetup<'a> {
    pub pretrained: &'a TrainState,
    pub train: &'a Cohort<f64>,
    pub held_out: &'a Cohort<f64>,
    pub smoother: &'a Smoother,
    pub decoder: &'a DecoderConfig,
    pub fixed_fwhm_mm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Trains a decoder behind fixed and adaptive front ends, on clean and
/// noisy inputs, and scores each on the held-out subjects. A last pass
/// scores the clean adaptive model against within-subject permuted labels.
pub fn decode_eval(setup: &DecodeSetup<'_>, config: serde_json::Value) -> Result<ExperimentReport> {
    let voxel = setup
        .train
        .voxel_size_mm()
        .ok_or_else(|| Error::Degenerate("empty training cohort".into()))?;
    let fixed_sigma = fwhm_to_sigma(setup.fixed_fwhm_mm, voxel);
    let mut table = Table::new(
        "decode_eval",
        &["front", "condition", "subject", "accuracy", "loss", "sigma", "fwhm_mm"],
    );
    let mut report = ExperimentReport::new("decode_eval", config);
    let fronts = [("fixed", DecoderFront::Fixed(fixed_sigma)), ("adaptive", DecoderFront::Adaptive)];
    let conditions = [("clean", 0.0), ("noisy", setup.noise_sigma)];
    let mut clean_adaptive = None;
    for (fname, front) in fronts {
        for (cname, noise) in conditions {
            let cfg = DecoderConfig {
                noise_sigma: noise,
                ..setup.decoder.clone()
            };
            let trained = train_decoder(setup.train, setup.pretrained.clone(), &cfg, setup.smoother, front)?;
            let mut rng = trial_rng(setup.seed, 0);
            let evals = evaluate_decoder(setup.held_out, &trained, setup.smoother, front, noise, &mut rng)?;
            let n = evals.len() as f64;
            let mut acc = 0.0;
            let mut fwhm = 0.0;
            for e in &evals {
                let f = sigma_to_fwhm_mm(e.mean_sigma, voxel);
                table.push(vec![
                    fname.into(),
                    cname.into(),
                    e.id.clone().into(),
                    e.accuracy.into(),
                    e.loss.into(),
                    e.mean_sigma.into(),
                    f.into(),
                ]);
                acc += e.accuracy / n;
                fwhm += f / n;
            }
            report.summary.insert(format!("{fname}_{cname}_accuracy"), acc);
            report.summary.insert(format!("{fname}_{cname}_fwhm_mm"), fwhm);
            if let Some(last) = trained.decoder_history.last() {
                report.summary.insert(format!("{fname}_{cname}_train_accuracy"), last.accuracy);
            }
            if fname == "adaptive" && cname == "clean" {
                clean_adaptive = Some(trained);
            }
        }
    }
    let trained = clean_adaptive.expect("adaptive clean model trained");
    let mut rng = trial_rng(setup.seed, 1);
    let permuted = permute_labels(setup.held_out, &mut rng)?;
    let evals = evaluate_decoder(&permuted, &trained, setup.smoother, DecoderFront::Adaptive, 0.0, &mut rng)?;
    let mut hits = 0.0;
    let mut total = 0.0;
    for e in &evals {
        let n = permuted
            .subjects()
            .iter()
            .find(|s| s.id == e.id)
            .map_or(0, |s| s.labelled().len()) as f64;
        hits += e.accuracy * n;
        total += n;
    }
    report.summary.insert("permuted_accuracy".into(), hits / total.max(1.0));
    report.summary.insert("fixed_fwhm_mm".into(), setup.fixed_fwhm_mm);
    report.tables.push(table);
    Ok(report)
}

/// Shuffles each subject's labels among its volumes.
pub fn permute_labels(cohort: &Cohort<f64>, rng: &mut ChaCha8Rng) -> Result<Cohort<f64>> {
    let subjects = cohort
        .subjects()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let Some(labels) = s.labels.as_mut() {
                labels.shuffle(rng);
            }
            s
        })
        .collect();
    Cohort::new(subjects)
}
