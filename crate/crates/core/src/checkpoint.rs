//! Training checkpoints.
//!
//! A checkpoint directory holds
//!
//! * `manifest.json`: format version, config echo, epoch counters, RNG
//!   position and loss histories;
//! * `state.bin`: every weight and velocity as little-endian `f64`, so a
//!   resumed run continues bit for bit;
//! * `paramnet.json` + `paramnet.bin`: the parameters-network weights as
//!   little-endian `f32` (`w` then `b`) for external consumers;
//! * `reference.vol` / `reference.json`: the centring reference;
//! * `loss.csv` and, after decoder training, `decoder_loss.csv`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::SCHEMA_VERSION;
use crate::io::{decode_f64, encode_f32, encode_f64, read_file, save_volume, write_atomic};
use crate::objective::DecoderWeights;
use crate::paramnet::ParamNetWeights;
use crate::trainer::{DecoderRecord, LossRecord, TrainState};
use crate::volume::Volume3D;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RngSnapshot {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    epoch: usize,
    decoder_epoch: usize,
    radius_jumps: u64,
    dims: [usize; 3],
    voxel_size_mm: f64,
    pooled_len: usize,
    decoder_len: Option<usize>,
    rng: RngSnapshot,
    config: serde_json::Value,
    history: Vec<LossRecord>,
    decoder_history: Vec<DecoderRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamNetHeader {
    format_version: u32,
    dims: [usize; 3],
    pooled_len: usize,
    seed: u64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("schema_version,epoch,step,total,variability,penalty,mean_sigma\n");
    for r in history {
        out.push_str(&format!(
            "{SCHEMA_VERSION},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.total, r.variability, r.penalty, r.mean_sigma
        ));
    }
    out
}

pub fn decoder_loss_csv(history: &[DecoderRecord]) -> String {
    let mut out = String::from("schema_version,epoch,loss,accuracy,mean_sigma\n");
    for r in history {
        out.push_str(&format!(
            "{SCHEMA_VERSION},{},{},{},{}\n",
            r.epoch, r.loss, r.accuracy, r.mean_sigma
        ));
    }
    out
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &serde_json::Value) -> Result<()> {
    let pn = &state.paramnet;
    let mut flat: Vec<f64> = pn.reference.data().to_vec();
    flat.extend_from_slice(&pn.w);
    flat.push(pn.b);
    flat.extend_from_slice(&state.paramnet_velocity);
    if let Some(d) = &state.decoder {
        flat.extend_from_slice(&d.v);
        flat.push(d.c);
        flat.push(d.norm_epsilon);
        flat.extend_from_slice(&state.decoder_velocity);
    }
    write_atomic(&dir.join("state.bin"), &encode_f64(flat))?;

    let header = ParamNetHeader {
        format_version: CHECKPOINT_VERSION,
        dims: pn.reference.dims(),
        pooled_len: pn.w.len(),
        seed: state.seed,
    };
    write_atomic(
        &dir.join("paramnet.json"),
        &serde_json::to_vec_pretty(&header).expect("header serializes"),
    )?;
    write_atomic(
        &dir.join("paramnet.bin"),
        &encode_f32(pn.w.iter().chain(std::iter::once(&pn.b)).map(|&x| x as f32)),
    )?;
    save_volume(&pn.reference, &dir.join("reference"))?;
    write_atomic(&dir.join("loss.csv"), loss_csv(&state.history).as_bytes())?;
    if !state.decoder_history.is_empty() {
        write_atomic(
            &dir.join("decoder_loss.csv"),
            decoder_loss_csv(&state.decoder_history).as_bytes(),
        )?;
    }

    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed: state.seed,
        epoch: state.epoch,
        decoder_epoch: state.decoder_epoch,
        radius_jumps: state.radius_jumps,
        dims: pn.reference.dims(),
        voxel_size_mm: pn.reference.voxel_size_mm(),
        pooled_len: pn.w.len(),
        decoder_len: state.decoder.as_ref().map(|d| d.v.len()),
        rng: RngSnapshot {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        config: config.clone(),
        history: state.history.clone(),
        decoder_history: state.decoder_history.clone(),
    };
    write_atomic(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
}

fn bad(dir: &Path, msg: impl Into<String>) -> Error {
    Error::Header {
        path: dir.join("manifest.json"),
        msg: msg.into(),
    }
}

/// Loads a checkpoint and the config it was written with.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, serde_json::Value)> {
    let raw = read_file(&dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| bad(dir, e.to_string()))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(bad(dir, format!("unsupported format version {}", m.format_version)));
    }
    let flat = decode_f64(&read_file(&dir.join("state.bin"))?)?;
    let voxels: usize = m.dims.iter().product();
    let p = m.pooled_len;
    let mut expected = voxels + 2 * (p + 1);
    if let Some(n) = m.decoder_len {
        expected += 2 * (n + 1) + 1;
    }
    if flat.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: flat.len(),
        });
    }
    let mut rest = flat.as_slice();
    let mut take = |n: usize| {
        let (a, b) = rest.split_at(n);
        rest = b;
        a.to_vec()
    };
    let reference = Volume3D::new(m.dims, m.voxel_size_mm, take(voxels))?;
    let w = take(p);
    let b = take(1)[0];
    let paramnet_velocity = take(p + 1);
    let (decoder, decoder_velocity) = match m.decoder_len {
        Some(n) => {
            let v = take(n);
            let c = take(1)[0];
            let norm_epsilon = take(1)[0];
            (Some(DecoderWeights { v, c, norm_epsilon }), take(n + 1))
        }
        None => (None, Vec::new()),
    };
    let seed: [u8; 32] = m
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| bad(dir, "rng seed must be 32 bytes"))?;
    let word_pos: u128 = m
        .rng
        .word_pos
        .parse()
        .map_err(|_| bad(dir, "rng word position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(m.rng.stream);
    rng.set_word_pos(word_pos);
    let state = TrainState {
        seed: m.seed,
        paramnet: ParamNetWeights { w, b, reference },
        paramnet_velocity,
        decoder,
        decoder_velocity,
        epoch: m.epoch,
        decoder_epoch: m.decoder_epoch,
        history: m.history,
        decoder_history: m.decoder_history,
        radius_jumps: m.radius_jumps,
        rng,
    };
    Ok((state, m.config))
}
