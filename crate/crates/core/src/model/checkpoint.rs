use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use layoutgen_numeric::{AdamConfig, AdamState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::train::{EpochLoss, ModelCheckpoint};
use super::{names, TrainingConfig};
use crate::graph::GraphConfig;
use crate::{io, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

// Optimizer state rides along in the params map so a reload resumes exactly.
const ADAM_PREFIXES: [(&str, Side); 2] = [("adam.gen", Side::Gen), ("adam.disc", Side::Disc)];

#[derive(Clone, Copy)]
enum Side {
    Gen,
    Disc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    training_config: TrainingConfig,
    graph_config: GraphConfig,
    params: BTreeMap<String, ParamFile>,
    rng_state: String,
    loss_trace: Vec<EpochLoss>,
}

fn encode_tensor(t: &Tensor) -> ParamFile {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    ParamFile {
        shape: t.shape().to_vec(),
        data_b64: STANDARD.encode(bytes),
    }
}

fn decode_tensor(name: &str, p: &ParamFile) -> Result<Tensor> {
    let bad = |msg: String| Error::Checkpoint(format!("parameter `{name}`: {msg}"));
    let bytes = STANDARD
        .decode(&p.data_b64)
        .map_err(|e| bad(format!("corrupt base64: {e}")))?;
    let expected: usize = p.shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(bad(format!(
            "shape {:?} needs {expected} bytes, payload has {}",
            p.shape,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(p.shape.clone(), data).map_err(|e| bad(e.to_string()))
}

pub fn checkpoint_to_string(ckpt: &ModelCheckpoint) -> String {
    let mut params: BTreeMap<String, ParamFile> = ckpt
        .params
        .iter()
        .map(|(name, p)| (name.to_string(), encode_tensor(&p.value)))
        .collect();
    for (prefix, side) in ADAM_PREFIXES {
        let state = match side {
            Side::Gen => &ckpt.gen_opt,
            Side::Disc => &ckpt.disc_opt,
        };
        params.insert(format!("{prefix}.t"), encode_tensor(&Tensor::vector(vec![state.t as f64])));
        for (name, (m, v)) in &state.moments {
            params.insert(format!("{prefix}.m/{name}"), encode_tensor(m));
            params.insert(format!("{prefix}.v/{name}"), encode_tensor(v));
        }
    }
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        training_config: ckpt.training.clone(),
        graph_config: ckpt.graph,
        params,
        rng_state: ckpt.rng_state.to_string(),
        loss_trace: ckpt.loss_trace.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelCheckpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "unsupported version {v} (expected {CHECKPOINT_VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("missing version field".into())),
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let training = file.training_config;
    training
        .validate()
        .map_err(|e| Error::Checkpoint(format!("training_config: {e}")))?;
    file.graph_config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("graph_config: {e}")))?;
    let rng_state: u64 = file
        .rng_state
        .parse()
        .map_err(|e| Error::Checkpoint(format!("rng_state: {e}")))?;

    let mut tensors = BTreeMap::new();
    for (name, p) in &file.params {
        tensors.insert(name.as_str(), decode_tensor(name, p)?);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: expected shape {shape:?}, found {:?}",
                t.shape()
            )));
        }
        Ok(t)
    };

    let shapes = training.param_shapes();
    let mut params = ParamStore::new();
    for (name, shape) in &shapes {
        params.insert(name.clone(), take(name, shape)?)?;
    }
    let adam = AdamConfig {
        lr: training.lr,
        ..AdamConfig::default()
    };
    let mut gen_opt = AdamState::new(&params, adam, names::is_generator);
    let mut disc_opt = AdamState::new(&params, adam, names::is_discriminator);
    for (prefix, side) in ADAM_PREFIXES {
        let state = match side {
            Side::Gen => &mut gen_opt,
            Side::Disc => &mut disc_opt,
        };
        let t = take(&format!("{prefix}.t"), &[1])?.item();
        if !(t >= 0.0 && t.fract() == 0.0) {
            return Err(Error::Checkpoint(format!("{prefix}.t: not a step count: {t}")));
        }
        state.t = t as u64;
        for (name, (m, v)) in state.moments.iter_mut() {
            *m = take(&format!("{prefix}.m/{name}"), m.shape())?;
            *v = take(&format!("{prefix}.v/{name}"), v.shape())?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(ModelCheckpoint {
        training,
        graph: file.graph_config,
        params,
        gen_opt,
        disc_opt,
        rng_state,
        loss_trace: file.loss_trace,
    })
}

/// Writes `ckpt` atomically.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    io::write_atomic(path, checkpoint_to_string(ckpt).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    checkpoint_from_str(&io::read_to_string(path)?)
}
