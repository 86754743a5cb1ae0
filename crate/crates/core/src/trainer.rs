//! Nesterov-momentum training of the smoother and of the decoding head.
//!
//! Nesterov is used in lookahead form:
//! `g = grad(w + m v)`, `v' = m v - lr g`, `w' = w + v'`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, ParamDistribution};
use crate::error::{Error, Result};
use crate::objective::{
    accuracy, bce_loss, decoder_backward, decoder_forward, variability_loss, variability_upstream,
    DecoderWeights,
};
use crate::paramnet::{init_weights, ParamNetWeights};
use crate::pipeline::{batch_dsigma, batch_forward, BatchForward, FrontEnd, Smoother};
use crate::volume::{Cohort, Volume3D};

/// Whether parameter gradients come from the raw loss sums or from the
/// loss divided by `N * voxels`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScale {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Optimizer steps per regenerated batch.
    pub internal_epochs: usize,
    pub per_subject_samples: usize,
    pub gradient_scale: GradientScale,
    /// Abort when the loss exceeds `divergence_factor` times the first
    /// recorded loss for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            learning_rate: 0.7,
            momentum: 0.9,
            epochs: 50,
            internal_epochs: 75,
            per_subject_samples: 7,
            gradient_scale: GradientScale::Mean,
            divergence_factor: 10.0,
            divergence_patience: 5,
        }
    }
}

fn check_optimizer(lr: f64, momentum: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_optimizer(self.learning_rate, self.momentum)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Standard deviation of Gaussian noise added to every input volume.
    pub noise_sigma: f64,
    pub freeze_paramnet: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 100,
            noise_sigma: 0.0,
            freeze_paramnet: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_optimizer(self.learning_rate, self.momentum)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One Nesterov step. Returns the new weights and velocity.
pub fn nesterov_step<F>(
    weights: &[f64],
    velocity: &[f64],
    lr: f64,
    momentum: f64,
    mut gradient_fn: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if weights.len() != velocity.len() {
        return Err(Error::DimMismatch(format!(
            "{} weights vs {} velocities",
            weights.len(),
            velocity.len()
        )));
    }
    let lookahead: Vec<f64> = weights
        .iter()
        .zip(velocity)
        .map(|(w, v)| w + momentum * v)
        .collect();
    let g = gradient_fn(&lookahead)?;
    if g.len() != weights.len() {
        return Err(Error::DimMismatch(format!(
            "gradient has {} entries for {} weights",
            g.len(),
            weights.len()
        )));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("entry {i} is {}", g[i])));
    }
    let v: Vec<f64> = velocity
        .iter()
        .zip(&g)
        .map(|(v, g)| momentum * v - lr * g)
        .collect();
    let w = weights.iter().zip(&v).map(|(w, v)| w + v).collect();
    Ok((w, v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    /// Divided by `N * voxels`.
    pub total: f64,
    pub variability: f64,
    pub penalty: f64,
    pub total_raw: f64,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    pub paramnet: ParamNetWeights<f64>,
    /// `w` then `b`.
    pub paramnet_velocity: Vec<f64>,
    pub decoder: Option<DecoderWeights<f64>>,
    /// `v` then `c`.
    pub decoder_velocity: Vec<f64>,
    /// Completed smoothing epochs.
    pub epoch: usize,
    pub decoder_epoch: usize,
    pub history: Vec<LossRecord>,
    pub decoder_history: Vec<DecoderRecord>,
    /// Volumes whose filter radius changed between consecutive steps.
    pub radius_jumps: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: Glorot-initialized parameters network against
    /// `reference`, zero velocity, no decoder.
    pub fn new(reference: Volume3D<f64>, seed: u64) -> Self {
        let paramnet = init_weights(reference, seed);
        let n = paramnet.w.len() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            seed,
            paramnet,
            paramnet_velocity: vec![0.0; n],
            decoder: None,
            decoder_velocity: Vec::new(),
            epoch: 0,
            decoder_epoch: 0,
            history: Vec::new(),
            decoder_history: Vec::new(),
            radius_jumps: 0,
            rng,
        }
    }
}

pub fn flatten_paramnet(w: &ParamNetWeights<f64>) -> Vec<f64> {
    let mut p = w.w.clone();
    p.push(w.b);
    p
}

fn unflatten_paramnet(p: &[f64], like: &ParamNetWeights<f64>) -> ParamNetWeights<f64> {
    let n = like.w.len();
    ParamNetWeights {
        w: p[..n].to_vec(),
        b: p[n],
        reference: like.reference.clone(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

struct StepOutcome {
    total: f64,
    total_raw: f64,
    variability: f64,
    penalty: f64,
    sigmas: Vec<f64>,
}

/// Loss and parameter gradient of the variability objective over `batch`.
fn smoothing_gradient(
    batch: &[Volume3D<f64>],
    weights: &ParamNetWeights<f64>,
    config: &TrainConfig,
    smoother: &Smoother,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, StepOutcome)> {
    let fwd = batch_forward(batch, FrontEnd::Adaptive(weights), smoother, rng)?;
    let zs = fwd.outputs();
    let sigmas = fwd.sigmas_used();
    let report = variability_loss(batch, &sigmas, &zs, config.lambda)?;
    let upstream = variability_upstream(batch, &zs, config.lambda)?;
    let mut dsigma = batch_dsigma(batch, &fwd, &upstream)?;
    if config.gradient_scale == GradientScale::Mean {
        let s = 1.0 / (batch.len() * batch[0].len()) as f64;
        dsigma.iter_mut().for_each(|g| *g *= s);
    }
    let g = fwd.paramnet_grad(weights, &dsigma)?;
    let mut flat = g.dw;
    flat.push(g.db);
    Ok((
        flat,
        StepOutcome {
            total: report.total_scaled,
            total_raw: report.total,
            variability: report.variability_scaled,
            penalty: report.penalty_scaled,
            sigmas,
        },
    ))
}

/// Runs smoothing epochs until `state.epoch == config.epochs`.
///
/// Each epoch draws a fresh augmented batch and takes `internal_epochs`
/// full-batch steps on it. Calling this on a state loaded from a checkpoint
/// continues exactly where the original run left off.
pub fn train_smoother(
    cohort: &Cohort<f64>,
    dist: &ParamDistribution,
    config: &TrainConfig,
    smoother: &Smoother,
    mut state: TrainState,
) -> Result<TrainState> {
    config.validate()?;
    let mut above = 0;
    while state.epoch < config.epochs {
        let batch = augment_batch(cohort, dist, config.per_subject_samples, &mut state.rng)?;
        if batch.len() < 2 {
            return Err(Error::Degenerate(format!(
                "augmented batch has {} volumes",
                batch.len()
            )));
        }
        let mut previous: Option<Vec<f64>> = None;
        for step in 0..config.internal_epochs {
            let params = flatten_paramnet(&state.paramnet);
            let mut outcome = None;
            let rng = &mut state.rng;
            let like = &state.paramnet;
            let (w, v) = nesterov_step(
                &params,
                &state.paramnet_velocity,
                config.learning_rate,
                config.momentum,
                |p| {
                    let (g, o) = smoothing_gradient(&batch, &unflatten_paramnet(p, like), config, smoother, rng)?;
                    outcome = Some(o);
                    Ok(g)
                },
            )
            .map_err(|e| match (&e, &outcome) {
                (Error::NonFiniteGradient(msg), Some(o)) => Error::NonFiniteGradient(format!(
                    "{msg}; epoch {} step {step}; loss {} (variability {}, penalty {}); sigmas {:?}",
                    state.epoch, o.total, o.variability, o.penalty, o.sigmas
                )),
                _ => e,
            })?;
            let o = outcome.expect("gradient evaluated");
            state.paramnet = unflatten_paramnet(&w, &state.paramnet);
            state.paramnet_velocity = v;
            if let Some(prev) = &previous {
                state.radius_jumps += prev
                    .iter()
                    .zip(&o.sigmas)
                    .filter(|(a, b)| {
                        smoother.convention.radius(**a, smoother.t)
                            != smoother.convention.radius(**b, smoother.t)
                    })
                    .count() as u64;
            }
            let first = state.history.first().map(|r| r.total).unwrap_or(o.total);
            if o.total > config.divergence_factor * first {
                above += 1;
                if above >= config.divergence_patience {
                    return Err(Error::Diverged(format!(
                        "loss {} exceeded {}x the initial {first} for {above} steps (epoch {}, step {step})",
                        o.total, config.divergence_factor, state.epoch
                    )));
                }
            } else {
                above = 0;
            }
            state.history.push(LossRecord {
                epoch: state.epoch,
                step,
                total: o.total,
                variability: o.variability,
                penalty: o.penalty,
                total_raw: o.total_raw,
                mean_sigma: mean(&o.sigmas),
            });
            previous = Some(o.sigmas);
        }
        log::info!(
            "epoch {}: loss {:.6e}, mean sigma {:.4}",
            state.epoch,
            state.history.last().map_or(f64::NAN, |r| r.total),
            state.history.last().map_or(f64::NAN, |r| r.mean_sigma)
        );
        state.epoch += 1;
    }
    if state.radius_jumps > 0 {
        log::info!("{} filter radius changes during training", state.radius_jumps);
    }
    Ok(state)
}

/// A subject's left/right volumes and binary targets.
#[derive(Clone, Debug)]
pub struct LabelledBatch {
    pub id: String,
    pub volumes: Vec<Volume3D<f64>>,
    pub targets: Vec<f64>,
}

/// Left/right volumes per subject; subjects with fewer than two are skipped.
pub fn labelled_batches(cohort: &Cohort<f64>) -> Vec<LabelledBatch> {
    cohort
        .subjects()
        .iter()
        .filter_map(|s| {
            let items = s.labelled();
            (items.len() >= 2).then(|| LabelledBatch {
                id: s.id.clone(),
                volumes: items.iter().map(|(v, _)| (*v).clone()).collect(),
                targets: items.iter().map(|(_, y)| *y).collect(),
            })
        })
        .collect()
}

/// Adds i.i.d. Gaussian noise to copies of `xs`.
pub fn add_noise(xs: &[Volume3D<f64>], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Volume3D<f64>> {
    if sigma == 0.0 {
        return xs.to_vec();
    }
    let noise = Normal::new(0.0, sigma).expect("finite noise sigma");
    xs.iter()
        .map(|x| {
            let data = x.data().iter().map(|&v| v + noise.sample(rng)).collect();
            x.with_data(data)
        })
        .collect()
}

/// Front end used in decoder training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecoderFront {
    Adaptive,
    /// Fixed width in voxels; the parameters network is ignored.
    Fixed(f64),
}

struct DecoderOutcome {
    loss: f64,
    accuracy: f64,
    sigmas: Vec<f64>,
}

/// Loss and gradients for one subject batch. Returns the parameters-network
/// gradient (`w`, `b`) when `adaptive` and the decoder gradient (`v`, `c`).
fn decoder_gradient(
    xs: &[Volume3D<f64>],
    targets: &[f64],
    front: FrontEnd<'_>,
    decoder: &DecoderWeights<f64>,
    smoother: &Smoother,
    rng: &mut ChaCha8Rng,
    want_paramnet: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, DecoderOutcome)> {
    let fwd: BatchForward = batch_forward(xs, front, smoother, rng)?;
    let zs = fwd.outputs();
    let tape = decoder_forward(&zs, decoder)?;
    let loss = bce_loss(&tape.probs, targets)?;
    let g = decoder_backward(&zs, decoder, &tape, targets)?;
    let mut dec = g.dv;
    dec.push(g.dc);
    let pn = match front {
        FrontEnd::Adaptive(weights) if want_paramnet => {
            let dsigma = batch_dsigma(xs, &fwd, &g.dz)?;
            let pg = fwd.paramnet_grad(weights, &dsigma)?;
            let mut flat = pg.dw;
            flat.push(pg.db);
            Some(flat)
        }
        _ => None,
    };
    Ok((
        pn,
        dec,
        DecoderOutcome {
            loss,
            accuracy: accuracy(&tape.probs, targets),
            sigmas: fwd.sigmas_used(),
        },
    ))
}

fn unflatten_decoder(p: &[f64], like: &DecoderWeights<f64>) -> DecoderWeights<f64> {
    let n = like.v.len();
    DecoderWeights {
        v: p[..n].to_vec(),
        c: p[n],
        norm_epsilon: like.norm_epsilon,
    }
}

/// Trains the decoding head (and, unless frozen or fixed, fine-tunes the
/// parameters network) with one step per subject batch per epoch, until
/// `state.decoder_epoch == config.epochs`.
pub fn train_decoder(
    cohort: &Cohort<f64>,
    mut state: TrainState,
    config: &DecoderConfig,
    smoother: &Smoother,
    front: DecoderFront,
) -> Result<TrainState> {
    config.validate()?;
    let batches = labelled_batches(cohort);
    if batches.is_empty() {
        return Err(Error::Degenerate("no subject has two labelled volumes".into()));
    }
    if state.decoder.is_none() {
        let voxels = batches[0].volumes[0].len();
        state.decoder = Some(DecoderWeights::init(voxels, state.seed.wrapping_add(1)));
        state.decoder_velocity = vec![0.0; voxels + 1];
        state.paramnet_velocity.iter_mut().for_each(|v| *v = 0.0);
    }
    let tune_paramnet = !config.freeze_paramnet && front == DecoderFront::Adaptive;
    while state.decoder_epoch < config.epochs {
        let mut losses = Vec::with_capacity(batches.len());
        let mut accs = Vec::with_capacity(batches.len());
        let mut sig = Vec::new();
        for b in &batches {
            let xs = add_noise(&b.volumes, config.noise_sigma, &mut state.rng);
            let decoder = state.decoder.as_ref().expect("decoder initialized");
            let np = state.paramnet.w.len() + 1;
            let mut params = Vec::new();
            let mut velocity = Vec::new();
            if tune_paramnet {
                params.extend(flatten_paramnet(&state.paramnet));
                velocity.extend_from_slice(&state.paramnet_velocity);
            }
            params.extend_from_slice(&decoder.v);
            params.push(decoder.c);
            velocity.extend_from_slice(&state.decoder_velocity);
            let offset = if tune_paramnet { np } else { 0 };
            let mut outcome = None;
            let rng = &mut state.rng;
            let paramnet = &state.paramnet;
            let (w, v) = nesterov_step(&params, &velocity, config.learning_rate, config.momentum, |p| {
                let dec = unflatten_decoder(&p[offset..], decoder);
                let pn_local;
                let fe = match front {
                    DecoderFront::Fixed(s) => FrontEnd::Fixed(s),
                    DecoderFront::Adaptive if tune_paramnet => {
                        pn_local = unflatten_paramnet(&p[..np], paramnet);
                        FrontEnd::Adaptive(&pn_local)
                    }
                    DecoderFront::Adaptive => FrontEnd::Adaptive(paramnet),
                };
                let (gp, gd, o) = decoder_gradient(&xs, &b.targets, fe, &dec, smoother, rng, tune_paramnet)?;
                outcome = Some(o);
                let mut g = gp.unwrap_or_default();
                g.extend(gd);
                Ok(g)
            })?;
            if tune_paramnet {
                state.paramnet = unflatten_paramnet(&w[..np], &state.paramnet);
                state.paramnet_velocity = v[..np].to_vec();
            }
            state.decoder = Some(unflatten_decoder(&w[offset..], decoder));
            state.decoder_velocity = v[offset..].to_vec();
            let o = outcome.expect("gradient evaluated");
            losses.push(o.loss);
            accs.push(o.accuracy);
            sig.extend(o.sigmas);
        }
        state.decoder_history.push(DecoderRecord {
            epoch: state.decoder_epoch,
            loss: mean(&losses),
            accuracy: mean(&accs),
            mean_sigma: mean(&sig),
        });
        state.decoder_epoch += 1;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectDecodeEval {
    pub id: String,
    pub accuracy: f64,
    pub loss: f64,
    pub mean_sigma: f64,
}

/// Per-subject accuracy with current-batch normalization statistics.
pub fn evaluate_decoder(
    cohort: &Cohort<f64>,
    state: &TrainState,
    smoother: &Smoother,
    front: DecoderFront,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SubjectDecodeEval>> {
    let decoder = state
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Invalid("checkpoint has no trained decoder".into()))?;
    labelled_batches(cohort)
        .iter()
        .map(|b| {
            let xs = add_noise(&b.volumes, noise_sigma, rng);
            let fe = match front {
                DecoderFront::Fixed(s) => FrontEnd::Fixed(s),
                DecoderFront::Adaptive => FrontEnd::Adaptive(&state.paramnet),
            };
            let (_, _, o) = decoder_gradient(&xs, &b.targets, fe, decoder, smoother, rng, false)?;
            Ok(SubjectDecodeEval {
                id: b.id.clone(),
                accuracy: o.accuracy,
                loss: o.loss,
                mean_sigma: mean(&o.sigmas),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KernelConfig;
    use crate::phantom::generate_phantom_cohort;
    use crate::volume::{make_reference, normalize_cohort};

    /// Independent scalar recurrence for f(w) = w^2.
    fn reference_trace(w0: f64, lr: f64, m: f64, steps: usize) -> Vec<(f64, f64)> {
        let (mut w, mut v) = (w0, 0.0);
        let mut out = Vec::new();
        for _ in 0..steps {
            let g = 2.0 * (w + m * v);
            v = m * v - lr * g;
            w += v;
            out.push((w, v));
        }
        out
    }

    #[test]
    fn quadratic_bowl_matches_recurrence() {
        let expect = reference_trace(1.0, 0.1, 0.9, 3);
        let (mut w, mut v) = (vec![1.0], vec![0.0]);
        for (ew, ev) in expect {
            (w, v) = nesterov_step(&w, &v, 0.1, 0.9, |p| Ok(vec![2.0 * p[0]])).unwrap();
            assert!((w[0] - ew).abs() < 1e-12 && (v[0] - ev).abs() < 1e-12);
        }
        // hand values: v1 = -0.2, w1 = 0.8; v2 = -0.18 - 0.2*0.62 = -0.304
        let first = reference_trace(1.0, 0.1, 0.9, 2);
        assert!((first[0].1 + 0.2).abs() < 1e-15);
        assert!((first[1].1 + 0.304).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let w0 = vec![0.3, -1.2, 2.5];
        let grad = |p: &[f64]| Ok(p.iter().map(|x| x.sin() + 3.0 * x).collect::<Vec<_>>());
        let (w, _) = nesterov_step(&w0, &[0.0; 3], 0.05, 0.0, grad).unwrap();
        for (a, x) in w.iter().zip(&w0) {
            assert_eq!(a.to_bits(), (x - 0.05 * (x.sin() + 3.0 * x)).to_bits());
        }
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let (mut w, mut v) = (vec![0.0], vec![1.0]);
        for k in 1..=4 {
            (w, v) = nesterov_step(&w, &v, 0.1, 0.9, |_| Ok(vec![0.0])).unwrap();
            assert!((v[0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
        assert!(w[0] > 0.0);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let r = nesterov_step(&[1.0], &[0.0], 0.1, 0.9, |_| Ok(vec![f64::NAN]));
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
    }

    fn micro() -> (Cohort<f64>, Smoother, TrainState) {
        let c = normalize_cohort(&generate_phantom_cohort(5, 2, 6, [8, 8, 8]).unwrap()).unwrap();
        let reference = make_reference(&c).unwrap();
        let s = Smoother::from_config(&KernelConfig::default()).unwrap();
        (c, s, TrainState::new(reference, 11))
    }

    fn micro_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            internal_epochs: 3,
            per_subject_samples: 3,
            ..Default::default()
        }
    }

    #[test]
    fn micro_cohort_loss_decreases() {
        // every volume in every batch, so successive losses are comparable
        let (c, s, st) = micro();
        let dist = ParamDistribution::identity();
        let cfg = TrainConfig {
            per_subject_samples: 6,
            ..micro_config()
        };
        let out = train_smoother(&c, &dist, &cfg, &s, st).unwrap();
        assert_eq!(out.history.len(), 6);
        let first = out.history.first().unwrap().total;
        let last = out.history.last().unwrap().total;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let (c, s, st) = micro();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            momentum: 0.0,
            epochs: 1,
            ..micro_config()
        };
        let out = train_smoother(&c, &ParamDistribution::identity(), &cfg, &s, st.clone()).unwrap();
        assert_eq!(out.paramnet, st.paramnet);
        let t0 = out.history[0].total;
        assert!(out.history.iter().all(|r| r.total == t0));
    }

    #[test]
    fn same_seed_same_history() {
        let (c, s, st) = micro();
        let a = train_smoother(&c, &ParamDistribution::identity(), &micro_config(), &s, st.clone()).unwrap();
        let b = train_smoother(&c, &ParamDistribution::identity(), &micro_config(), &s, st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resuming_matches_uninterrupted_run() {
        let (c, s, st) = micro();
        let dist = ParamDistribution::identity();
        let full = train_smoother(&c, &dist, &micro_config(), &s, st.clone()).unwrap();
        let half = train_smoother(&c, &dist, &TrainConfig { epochs: 1, ..micro_config() }, &s, st).unwrap();
        let resumed = train_smoother(&c, &dist, &micro_config(), &s, half).unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn frozen_paramnet_is_bitwise_unchanged() {
        let (c, s, st) = micro();
        let cfg = DecoderConfig {
            epochs: 3,
            freeze_paramnet: true,
            ..Default::default()
        };
        let out = train_decoder(&c, st.clone(), &cfg, &s, DecoderFront::Adaptive).unwrap();
        assert_eq!(out.paramnet, st.paramnet);
        assert_ne!(out.decoder_history.len(), 0);
    }

    #[test]
    fn decoder_learns_separable_phantom() {
        let c = normalize_cohort(&generate_phantom_cohort(2, 3, 24, [8, 8, 8]).unwrap()).unwrap();
        let s = Smoother::from_config(&KernelConfig::default()).unwrap();
        let st = TrainState::new(make_reference(&c).unwrap(), 4);
        let out = train_decoder(&c, st, &DecoderConfig::default(), &s, DecoderFront::Adaptive).unwrap();
        let acc = out.decoder_history.last().unwrap().accuracy;
        assert!(acc > 0.9, "training accuracy {acc}");
    }
}
