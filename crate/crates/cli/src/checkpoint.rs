//! Checkpoint files.
//!
//! A checkpoint is a JSON object. Parameter vectors, optimizer moments and
//! prototype arrays are stored as base64 strings of little-endian f64
//! bytes, so a load reproduces them bit for bit. The `checksum` field holds
//! the SHA-256 of the compact serialization of every other field.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use protostream::encoder::{EncoderConfig, ParameterSet, ScalarInit};
use protostream::memory::{MemoryConfig, MemorySnapshot};
use protostream::optim::{Adam, AdamConfig};
use protostream::trainer::{RunningStats, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FORMAT: &str = "protostream-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub params: ParameterSet,
    pub adam: Adam,
    pub stats: RunningStats,
    pub memory: Option<MemorySnapshot>,
}

impl Checkpoint {
    pub fn from_state(config: &RunConfig, state: &TrainState) -> Self {
        Self {
            step: state.step,
            config: config.clone(),
            params: state.params.clone(),
            adam: state.adam.clone(),
            stats: state.stats,
            memory: None,
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            step: self.step,
            params: self.params,
            adam: self.adam,
            stats: self.stats,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamBody {
    config: AdamConfig,
    t: u64,
    m: String,
    v: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryBody {
    config: MemoryConfig,
    dim: usize,
    ids: Vec<u64>,
    means: String,
    counts: String,
    birth_steps: Vec<u64>,
    next_id: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    format: String,
    version: u32,
    step: u64,
    config: RunConfig,
    encoder: EncoderConfig,
    pseudo_ratio: f64,
    params: String,
    adam: AdamBody,
    stats: RunningStats,
    memory: Option<MemoryBody>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!(
            "{} bytes is not a whole number of f64s",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn to_body(c: &Checkpoint) -> Body {
    let memory = c.memory.as_ref().map(|m| MemoryBody {
        config: m.config,
        dim: m.means.first().map_or(0, Vec::len),
        ids: m.ids.clone(),
        means: encode_f64s(&m.means.concat()),
        counts: encode_f64s(&m.counts),
        birth_steps: m.birth_steps.clone(),
        next_id: m.next_id,
        step: m.step,
    });
    Body {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        step: c.step,
        config: c.config.clone(),
        encoder: c.params.encoder,
        pseudo_ratio: c.params.pseudo_ratio,
        params: encode_f64s(&c.params.flat()),
        adam: AdamBody {
            config: *c.adam.config(),
            t: c.adam.updates(),
            m: encode_f64s(c.adam.first_moment()),
            v: encode_f64s(c.adam.second_moment()),
        },
        stats: c.stats,
        memory,
    }
}

/// Serialized checkpoint bytes.
pub fn to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(to_body(c))?;
    let checksum = sha256_hex(&serde_json::to_vec(&value)?);
    value
        .as_object_mut()
        .expect("body is an object")
        .insert("checksum".to_string(), Value::String(checksum));
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save(path: &Path, c: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(c)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |message: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut value: Value =
        serde_json::from_slice(bytes).map_err(|e| bad(format!("not JSON: {e}")))?;
    let stored = match value.as_object_mut().and_then(|m| m.remove("checksum")) {
        Some(Value::String(s)) => s,
        _ => return Err(bad("missing checksum".into())),
    };
    let actual = sha256_hex(&serde_json::to_vec(&value)?);
    if actual != stored {
        return Err(bad(format!(
            "checksum mismatch: stored {stored}, computed {actual}"
        )));
    }
    let body: Body = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    if body.format != CHECKPOINT_FORMAT || body.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported format {} version {}",
            body.format, body.version
        )));
    }
    let decode =
        |what: &str, text: &str| decode_f64s(text).map_err(|e| bad(format!("{what}: {e}")));

    let mut params = ParameterSet::init(body.encoder, ScalarInit::default())?;
    params.set_flat(&decode("params", &body.params)?)?;
    params.pseudo_ratio = body.pseudo_ratio;
    let adam = Adam::from_state(
        body.adam.config,
        decode("adam.m", &body.adam.m)?,
        decode("adam.v", &body.adam.v)?,
        body.adam.t,
    )?;
    if adam.first_moment().len() != params.len() {
        return Err(bad(format!(
            "optimizer holds {} moments for {} parameters",
            adam.first_moment().len(),
            params.len()
        )));
    }
    let memory = match body.memory {
        None => None,
        Some(m) => {
            let flat = decode("memory.means", &m.means)?;
            if flat.len() != m.dim * m.ids.len() {
                return Err(bad(format!(
                    "memory holds {} mean coordinates for {} prototypes of dim {}",
                    flat.len(),
                    m.ids.len(),
                    m.dim
                )));
            }
            let means = if m.dim == 0 {
                vec![Vec::new(); m.ids.len()]
            } else {
                flat.chunks(m.dim).map(<[f64]>::to_vec).collect()
            };
            Some(MemorySnapshot {
                config: m.config,
                ids: m.ids,
                means,
                counts: decode("memory.counts", &m.counts)?,
                birth_steps: m.birth_steps,
                next_id: m.next_id,
                step: m.step,
            })
        }
    };
    body.config.validate()?;
    Ok(Checkpoint {
        step: body.step,
        config: body.config,
        params,
        adam,
        stats: body.stats,
        memory,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(path, &bytes)
}
