//! Run configuration: named profiles, JSON override documents and dotted
//! `key=value` overrides, validated as a whole.

use std::path::{Path, PathBuf};

use protostream::encoder::{Activation, EncoderConfig, ScalarInit};
use protostream::memory::MemoryConfig;
use protostream::metrics::{default_alpha_grid, ApMode, LinearReadoutConfig};
use protostream::objective::LossConfig;
use protostream::optim::AdamConfig;
use protostream::streams::StreamConfig;
use protostream::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const DEFAULT_PROFILE: &str = "omniglot-like";
pub const PROFILES: [&str; 4] = [
    "roamingrooms-like",
    "saycam-like",
    "omniglot-like",
    "imagenet-like",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalProtocol {
    Unsupervised,
    Supervised,
    /// kNN and linear readout on frozen embeddings.
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub protocol: EvalProtocol,
    /// Episodes generated for evaluation (and by `gen`).
    pub episodes: usize,
    pub sweep_alpha: bool,
    pub alpha_grid: Vec<f64>,
    pub ap_mode: ApMode,
    pub knn_k: usize,
    pub linear: LinearReadoutConfig,
    pub dump_embeddings: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::Unsupervised,
            episodes: 50,
            sweep_alpha: false,
            alpha_grid: default_alpha_grid(),
            ap_mode: ApMode::default(),
            knn_k: 5,
            linear: LinearReadoutConfig::default(),
            dump_embeddings: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSettings {
    /// Overrides the stream's episode length.
    pub episode_len: usize,
    pub episodes: usize,
    pub h: f64,
    pub floor: f64,
    pub max_attempts: usize,
    /// `None` picks 1e-6 for the identity encoder and 1e-4 otherwise.
    pub tolerance: Option<f64>,
    /// Check with and without prototype gradients.
    pub both_modes: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            episode_len: 5,
            episodes: 3,
            h: 1e-5,
            floor: 1e-6,
            max_attempts: 200,
            tolerance: None,
            both_modes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub encoder: EncoderConfig,
    pub scalars: ScalarInit,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    /// `train.seed` roots every random stream of a run.
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub eval: EvalSettings,
    pub gradcheck: GradCheckSettings,
    pub out: PathBuf,
}

struct ProfileValues {
    capacity: usize,
    decay: f64,
    beta_mean: f64,
    lambda_new: f64,
    lambda_ent: f64,
    pseudo_ratio: f64,
    episode_len: usize,
    num_contexts: usize,
    total_steps: u64,
    decay_steps: Vec<u64>,
}

/// The named profile, or `None` for an unknown name.
pub fn profile(name: &str) -> Option<RunConfig> {
    let v = match name {
        "roamingrooms-like" => ProfileValues {
            capacity: 150,
            decay: 0.995,
            beta_mean: 0.5,
            lambda_new: 0.5,
            lambda_ent: 0.0,
            pseudo_ratio: 0.1,
            episode_len: 50,
            num_contexts: 5,
            total_steps: 80_000,
            decay_steps: vec![40_000, 60_000],
        },
        "saycam-like" => ProfileValues {
            capacity: 75,
            decay: 0.99,
            beta_mean: 0.6,
            lambda_new: 0.3,
            lambda_ent: 0.0,
            pseudo_ratio: 0.0,
            episode_len: 75,
            num_contexts: 5,
            total_steps: 30_000,
            decay_steps: vec![20_000],
        },
        "omniglot-like" => ProfileValues {
            capacity: 150,
            decay: 0.995,
            beta_mean: 0.5,
            lambda_new: 1.0,
            lambda_ent: 1.0,
            pseudo_ratio: 0.2,
            episode_len: 150,
            num_contexts: 5,
            total_steps: 80_000,
            decay_steps: vec![40_000, 60_000],
        },
        "imagenet-like" => ProfileValues {
            capacity: 600,
            decay: 0.99,
            beta_mean: 0.5,
            lambda_new: 0.5,
            lambda_ent: 0.5,
            pseudo_ratio: 0.0,
            episode_len: 48,
            num_contexts: 3,
            total_steps: 80_000,
            decay_steps: vec![40_000, 60_000],
        },
        _ => return None,
    };
    Some(RunConfig {
        profile: name.to_string(),
        encoder: EncoderConfig::mlp(16, 32, 8, Activation::Tanh, 0),
        scalars: ScalarInit {
            beta: -12.0,
            gamma: 1.0,
            tau: 0.1,
            pseudo_ratio: v.pseudo_ratio,
        },
        memory: MemoryConfig {
            capacity: v.capacity,
            decay: v.decay,
            decay_on_create: false,
        },
        loss: LossConfig {
            lambda_ent: v.lambda_ent,
            lambda_new: v.lambda_new,
            beta_mean: v.beta_mean,
            ..LossConfig::default()
        },
        train: TrainConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            decay_steps: v.decay_steps,
            decay_factor: 0.1,
            total_steps: v.total_steps,
            alpha: 0.5,
            seed: 0,
            checkpoint_every: 10_000,
        },
        stream: StreamConfig {
            episode_len: v.episode_len,
            num_contexts: v.num_contexts,
            latent_dim: 8,
            obs_dim: 16,
            nuisance_noise: 0.5,
            resample_nuisance: true,
            ..StreamConfig::default()
        },
        eval: EvalSettings::default(),
        gradcheck: GradCheckSettings::default(),
        out: PathBuf::from("runs"),
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !PROFILES.contains(&self.profile.as_str()) {
            return Err(unknown_profile(&self.profile));
        }
        self.encoder.validate()?;
        self.scalars.validate()?;
        self.memory.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.stream.validate()?;
        if self.encoder.input_dim != self.stream.obs_dim {
            return Err(CliError::config(format!(
                "encoder.input_dim is {} but stream.obs_dim is {}",
                self.encoder.input_dim, self.stream.obs_dim
            )));
        }
        let e = &self.eval;
        if e.episodes == 0 {
            return Err(CliError::config("eval.episodes must be at least 1"));
        }
        if e.alpha_grid.is_empty() || e.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CliError::config(
                "eval.alpha_grid must be a nonempty list of values in [0, 1]",
            ));
        }
        if e.knn_k == 0 || e.linear.epochs == 0 || e.linear.batch_size == 0 {
            return Err(CliError::config(
                "eval.knn_k, eval.linear.epochs and eval.linear.batch_size must be positive",
            ));
        }
        let g = &self.gradcheck;
        if g.episode_len == 0 || g.episodes == 0 {
            return Err(CliError::config(
                "gradcheck.episode_len and gradcheck.episodes must be positive",
            ));
        }
        if g.tolerance.is_some_and(|t| !(t >= 0.0)) {
            return Err(CliError::config("gradcheck.tolerance must be non-negative"));
        }
        Ok(())
    }
}

fn unknown_profile(name: &str) -> CliError {
    CliError::config(format!(
        "unknown profile {name:?}; expected one of {}",
        PROFILES.join(", ")
    ))
}

/// Overlays `overrides` onto `base`. Every key must already exist in
/// `base`; objects merge recursively and anything else is replaced.
pub fn merge(base: &mut Value, overrides: &Value, path: &str) -> Result<()> {
    let Value::Object(over) = overrides else {
        *base = overrides.clone();
        return Ok(());
    };
    let Value::Object(target) = base else {
        *base = overrides.clone();
        return Ok(());
    };
    for (key, value) in over {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match target.get_mut(key) {
            None => return Err(CliError::config(format!("unknown key {full:?}"))),
            Some(slot) if slot.is_object() && value.is_object() => merge(slot, value, &full)?,
            Some(slot) => *slot = value.clone(),
        }
    }
    Ok(())
}

/// Parses `a.b.c=value` into a nested object. The value is read as JSON
/// when it parses and as a bare string otherwise.
pub fn parse_set(assignment: &str) -> Result<Value> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("expected key=value, got {assignment:?}")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("malformed key {key:?}")));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut map = Map::new();
        map.insert(part.to_string(), value);
        value = Value::Object(map);
    }
    Ok(value)
}

/// Where the pieces of a configuration come from, in increasing
/// precedence.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub profile: Option<String>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Builds and validates the run configuration.
pub fn resolve(sources: &ConfigSources) -> Result<RunConfig> {
    resolve_with_base(None, sources)
}

/// Like [`resolve`], but starts from `base` instead of the default profile
/// when neither the command line nor the file names a profile.
pub fn resolve_with_base(base: Option<&RunConfig>, sources: &ConfigSources) -> Result<RunConfig> {
    let mut file = match &sources.file {
        Some(path) => read_json(path)?,
        None => Value::Object(Map::new()),
    };
    if !file.is_object() {
        return Err(CliError::config("a config file must hold a JSON object"));
    }
    let file_profile = match file.as_object_mut().and_then(|m| m.remove("profile")) {
        Some(Value::String(s)) => Some(s),
        Some(other) => {
            return Err(CliError::config(format!(
                "profile must be a string, got {other}"
            )))
        }
        None => None,
    };
    let start = match (sources.profile.clone().or(file_profile), base) {
        (Some(name), _) => profile(&name).ok_or_else(|| unknown_profile(&name))?,
        (None, Some(base)) => base.clone(),
        (None, None) => profile(DEFAULT_PROFILE).expect("default profile exists"),
    };
    let mut value = serde_json::to_value(&start)?;
    merge(&mut value, &file, "")?;
    for set in &sources.sets {
        let over = parse_set(set)?;
        if over.get("profile").is_some() {
            return Err(CliError::config(
                "the profile is chosen with --profile, not --set",
            ));
        }
        merge(&mut value, &over, "")?;
    }
    let mut config: RunConfig = serde_json::from_value(value)
        .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
    if let Some(seed) = sources.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &sources.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}
