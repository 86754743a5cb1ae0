use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adasmooth::augment::{fit_pairwise_alignment, ParamDistribution};
use adasmooth::checkpoint::{load_checkpoint, save_checkpoint};
use adasmooth::config::Config;
use adasmooth::experiment::{
    anatomy_eval, decode_eval, deform_sweep, noise_sweep, trial_rng, Cell, DecodeSetup, ExperimentReport, Model, Table,
};
use adasmooth::gradcheck::gradient_check;
use adasmooth::io::{load_cohort, save_cohort, write_atomic};
use adasmooth::kernel::{fwhm_to_sigma, sigma_to_fwhm_mm};
use adasmooth::phantom::generate_phantom_cohort_with;
use adasmooth::pipeline::Smoother;
use adasmooth::trainer::{evaluate_decoder, train_decoder, train_smoother, DecoderFront, TrainState};
use adasmooth::volume::{make_reference, normalize_cohort, Cohort};

#[derive(Parser)]
#[command(name = "adasmooth", version, about = "Adaptive Gaussian smoothing of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON or TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct Data {
    /// Cohort directory; a phantom cohort is generated from the config when
    /// omitted.
    #[arg(long)]
    cohort: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Trained {
    #[command(flatten)]
    data: Data,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic cohort.
    Phantom(Common),
    /// Fits the augmentation distribution on the training subjects.
    FitAugment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Trains the parameters network on the variability objective.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Distribution stem written by `fit-augment`; no augmentation if
        /// omitted.
        #[arg(long)]
        augment: Option<PathBuf>,
        /// Continues from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains a decoding head on top of a trained smoother.
    TrainDecoder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        /// Uses a fixed filter of this FWHM instead of the adaptive one.
        #[arg(long)]
        fixed_fwhm_mm: Option<f64>,
    },
    /// Compares analytic gradients with finite differences.
    Gradcheck(Common),
    /// Adds uniform noise of increasing amplitude to held-out volumes and records the predicted FWHM.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
    },
    /// Applies random deformations of increasing magnitude and records the predicted FWHM.
    DeformSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
    },
    /// Compares raw, fixed-width and adaptive smoothing against the smoothed reference.
    AnatomyEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
    },
    /// Trains decoders behind fixed and adaptive smoothing and scores them on held-out subjects.
    DecodeEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(cfg: &Config) -> Result<Cohort<f64>> {
    let c = &cfg.cohort;
    Ok(generate_phantom_cohort_with(cfg.seed, c.n_subjects, c.n_volumes, c.dims, &c.phantom)?)
}

fn cohort(cfg: &Config, data: &Data) -> Result<Cohort<f64>> {
    let raw = match &data.cohort {
        Some(dir) => load_cohort(dir).with_context(|| format!("loading cohort {}", dir.display()))?,
        None => generate(cfg)?,
    };
    Ok(normalize_cohort(&raw)?)
}

/// Training subjects and the held-out (validation and test) subjects.
fn split(cfg: &Config, cohort: &Cohort<f64>) -> Result<(Cohort<f64>, Cohort<f64>)> {
    let p = &cfg.partition;
    let need = p.train + p.validation + p.test;
    if p.train < 2 || cohort.len() < need {
        bail!(
            "partition {}/{}/{} needs {need} subjects and at least 2 for training, cohort has {}",
            p.train,
            p.validation,
            p.test,
            cohort.len()
        );
    }
    Ok((cohort.slice(0..p.train), cohort.slice(p.train..need)))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn finish(report: &ExperimentReport, dir: &Path) -> Result<()> {
    report.write(dir)?;
    for c in &report.correlations {
        match (c.pearson, c.spearman) {
            (Some(p), Some(s)) => println!("{} vs {}: n={} pearson={p:.4} spearman={s:.4}", c.x, c.y, c.n),
            _ => println!("{} vs {}: n={} undefined ({})", c.x, c.y, c.n, c.note.as_deref().unwrap_or("")),
        }
    }
    for (k, v) in &report.summary {
        println!("{k} = {v:.6}");
    }
    Ok(())
}

enum Eval {
    Noise,
    Deform,
    Anatomy,
}

/// Runs one of the held-out evaluations against a trained checkpoint. The
/// reference is the one stored with the checkpoint.
fn evaluate(kind: Eval, common: &Common, trained: &Trained) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out(&common.out_dir)?;
    let (_, held) = split(&cfg, &cohort(&cfg, &trained.data)?)?;
    let smoother = Smoother::from_config(&cfg.kernel)?;
    let state = load_checkpoint(&trained.checkpoint)?.0;
    let model = Model {
        weights: &state.paramnet,
        smoother: &smoother,
    };
    let e = &cfg.experiment;
    let report = match kind {
        Eval::Noise => noise_sweep(&model, &held, e.noise_max, e.trials, cfg.seed, cfg.to_json())?,
        Eval::Deform => deform_sweep(&model, &held, &e.caps, e.trials, cfg.seed, None, cfg.to_json())?,
        Eval::Anatomy => anatomy_eval(
            &model,
            &held,
            &state.paramnet.reference,
            e.fixed_fwhm_mm,
            e.reference_smoothing,
            cfg.to_json(),
        )?,
    };
    finish(&report, &common.out_dir)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Phantom(common) => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out_dir)?;
            let c = generate(&cfg)?;
            save_cohort(&c, &common.out_dir)?;
            write_json(&common.out_dir.join("phantom.json"), &cfg.to_json())?;
            println!("wrote {} subjects to {}", c.len(), common.out_dir.display());
        }
        Command::FitAugment { common, data } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out_dir)?;
            let (train, _) = split(&cfg, &cohort(&cfg, &data)?)?;
            let fit = fit_pairwise_alignment(&train, &cfg.align)?;
            fit.distribution.save(&common.out_dir.join("augment"))?;
            let mut pairs = Table::new(
                "alignment_pairs",
                &["fixed", "moving", "initial_loss", "final_loss", "diverged"],
            );
            let ids = train.subjects();
            for p in &fit.pairs {
                pairs.push(vec![
                    ids[p.fixed].id.clone().into(),
                    ids[p.moving].id.clone().into(),
                    p.initial_loss.into(),
                    p.final_loss.into(),
                    Cell::Int(p.diverged as u64),
                ]);
            }
            let mut report = ExperimentReport::new("fit_augment", cfg.to_json());
            report.tables.push(pairs);
            report.summary.insert("pairs".into(), fit.pairs.len() as f64);
            report.write(&common.out_dir)?;
            println!("fitted {} pairs; distribution at {}", fit.pairs.len(), common.out_dir.join("augment").display());
        }
        Command::Train {
            common,
            data,
            augment,
            resume,
        } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out_dir)?;
            let (train, _) = split(&cfg, &cohort(&cfg, &data)?)?;
            let dist = match &augment {
                Some(stem) => ParamDistribution::load(stem)?,
                None => {
                    log::warn!("no augmentation distribution given; training on unwarped volumes");
                    ParamDistribution::identity()
                }
            };
            let smoother = Smoother::from_config(&cfg.kernel)?;
            let state = match &resume {
                Some(dir) => load_checkpoint(dir)?.0,
                None => TrainState::new(make_reference(&train)?, cfg.seed),
            };
            let state = train_smoother(&train, &dist, &cfg.train, &smoother, state)?;
            save_checkpoint(&common.out_dir, &state, &cfg.to_json())?;
            if let Some(last) = state.history.last() {
                println!(
                    "epoch {} loss {:.6} mean sigma {:.4} ({:.3} mm)",
                    state.epoch,
                    last.total,
                    last.mean_sigma,
                    sigma_to_fwhm_mm(last.mean_sigma, train.voxel_size_mm().unwrap_or(1.0))
                );
            }
        }
        Command::TrainDecoder {
            common,
            trained,
            fixed_fwhm_mm,
        } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out_dir)?;
            let (train, held) = split(&cfg, &cohort(&cfg, &trained.data)?)?;
            let smoother = Smoother::from_config(&cfg.kernel)?;
            let voxel = train.voxel_size_mm().unwrap_or(1.0);
            let front = match fixed_fwhm_mm {
                Some(f) => DecoderFront::Fixed(fwhm_to_sigma(f, voxel)),
                None => DecoderFront::Adaptive,
            };
            let state = load_checkpoint(&trained.checkpoint)?.0;
            let state = train_decoder(&train, state, &cfg.decoder, &smoother, front)?;
            save_checkpoint(&common.out_dir, &state, &cfg.to_json())?;
            let mut rng = trial_rng(cfg.seed, 0);
            let evals = evaluate_decoder(&held, &state, &smoother, front, cfg.decoder.noise_sigma, &mut rng)?;
            let mut table = Table::new("decoder_eval", &["subject", "accuracy", "loss", "sigma", "fwhm_mm"]);
            for e in &evals {
                table.push(vec![
                    e.id.clone().into(),
                    e.accuracy.into(),
                    e.loss.into(),
                    e.mean_sigma.into(),
                    sigma_to_fwhm_mm(e.mean_sigma, voxel).into(),
                ]);
            }
            let n = evals.len().max(1) as f64;
            let mut report = ExperimentReport::new("train_decoder", cfg.to_json());
            report.summary.insert("held_out_accuracy".into(), evals.iter().map(|e| e.accuracy).sum::<f64>() / n);
            report.summary.insert(
                "held_out_fwhm_mm".into(),
                evals.iter().map(|e| sigma_to_fwhm_mm(e.mean_sigma, voxel)).sum::<f64>() / n,
            );
            report.tables.push(table);
            finish(&report, &common.out_dir)?;
        }
        Command::Gradcheck(common) => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out_dir)?;
            let report = gradient_check(&cfg.gradcheck, cfg.kernel.t, cfg.kernel.radius_convention, cfg.seed)?;
            let mut table = Table::new("gradcheck", &["path", "kind", "checked", "max_rel_err", "tolerance", "status"]);
            for p in &report.paths {
                let status = match (&p.excluded, p.passed) {
                    (Some(_), _) => "excluded",
                    (None, true) => "pass",
                    (None, false) => "fail",
                };
                println!(
                    "{:<16} {:>4} checked  max rel err {:<12} tol {:e}  {status}{}",
                    p.name,
                    p.checked,
                    p.max_rel_err.map_or("-".into(), |e| format!("{e:.3e}")),
                    p.tolerance,
                    p.excluded.as_deref().map_or(String::new(), |r| format!(" ({r})")),
                );
                table.push(vec![
                    p.name.clone().into(),
                    format!("{:?}", p.kind).to_lowercase().into(),
                    p.checked.into(),
                    p.max_rel_err.map_or(Cell::Text("".into()), Cell::Num),
                    p.tolerance.into(),
                    status.into(),
                ]);
            }
            write_atomic(&common.out_dir.join("gradcheck.csv"), table.to_csv().as_bytes())?;
            write_json(&common.out_dir.join("gradcheck.json"), &serde_json::to_value(&report)?)?;
            println!("{}", if report.passed { "all paths pass" } else { "gradient check FAILED" });
            return Ok(report.passed);
        }
        Command::NoiseSweep { common, trained } => evaluate(Eval::Noise, &common, &trained)?,
        Command::DeformSweep { common, trained } => evaluate(Eval::Deform, &common, &trained)?,
        Command::AnatomyEval { common, trained } => evaluate(Eval::Anatomy, &common, &trained)?,
        Command::DecodeEval { common, trained } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out_dir)?;
            let (train, held) = split(&cfg, &cohort(&cfg, &trained.data)?)?;
            let smoother = Smoother::from_config(&cfg.kernel)?;
            let state = load_checkpoint(&trained.checkpoint)?.0;
            let setup = DecodeSetup {
                pretrained: &state,
                train: &train,
                held_out: &held,
                smoother: &smoother,
                decoder: &cfg.decoder,
                fixed_fwhm_mm: cfg.experiment.fixed_fwhm_mm,
                noise_sigma: cfg.experiment.decode_noise_sigma,
                seed: cfg.seed,
            };
            finish(&decode_eval(&setup, cfg.to_json())?, &common.out_dir)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
