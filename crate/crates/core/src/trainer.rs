//! Outer training loop, finite-difference gradient checking, and
//! inference-only evaluation.
//!
//! Step `s` of a run always trains on episode `s` of its source, and the
//! source is a pure function of the episode index. A run stopped at any
//! step and resumed from the saved state therefore follows exactly the
//! trajectory of an uninterrupted run.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed, EncoderConfig, LiveParams, ParameterSet, ScalarInit};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, PrototypeMemory};
use crate::metrics::{
    ami, ami_max, ari, average_precision, homogeneity_completeness, supervised_readout,
    unsupervised_readout, ApMode, EmbeddedEpisode,
};
use crate::numerics::{Real, Shadow, Tape};
use crate::objective::{episode_loss, FrameDecision, LossBreakdown, LossConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::derive_seed;
use crate::streams::{iid_shuffle, Episode, StreamConfig, StreamGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub adam: AdamConfig,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    #[serde(default)]
    pub decay_steps: Vec<u64>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub total_steps: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint interval in steps; zero disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_alpha() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            decay_steps: Vec::new(),
            decay_factor: default_decay_factor(),
            total_steps: 0,
            alpha: default_alpha(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// base * factor^(number of decay boundaries <= step).
    pub fn learning_rate(&self, step: u64) -> f64 {
        let passed = self.decay_steps.iter().filter(|&&b| b <= step).count();
        self.adam.lr * self.decay_factor.powi(passed as i32)
    }
}

/// Everything the loss needs besides the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.memory.validate()?;
        self.loss.validate()
    }
}

/// Indexed access to training or evaluation episodes.
pub trait EpisodeSource: Sync {
    fn episode(&self, index: u64) -> Result<Episode>;
}

/// Episodes drawn from the synthetic generator. In iid mode the stream is
/// shuffled in fixed blocks of episodes so that each index stays a pure
/// function of the seed.
pub struct GeneratedEpisodes {
    generator: StreamGenerator,
    seed: u64,
    block: u64,
    cache: Mutex<Option<(u64, Vec<Episode>)>>,
}

const IID_BLOCK: u64 = 16;
const STREAM_IID_BLOCK: u64 = 6;

impl GeneratedEpisodes {
    pub fn new(config: StreamConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            generator: StreamGenerator::new(config)?,
            seed,
            block: IID_BLOCK,
            cache: Mutex::new(None),
        })
    }

    pub fn generator(&self) -> &StreamGenerator {
        &self.generator
    }
}

impl EpisodeSource for GeneratedEpisodes {
    fn episode(&self, index: u64) -> Result<Episode> {
        let config = self.generator.config();
        if !config.iid_shuffle {
            return Ok(self.generator.episode(self.seed, index));
        }
        let b = index / self.block;
        let mut cache = self.cache.lock().expect("episode cache poisoned");
        if cache.as_ref().map(|(k, _)| *k) != Some(b) {
            let episodes = (b * self.block..(b + 1) * self.block)
                .map(|i| self.generator.episode(self.seed, i))
                .collect();
            let seed = derive_seed(self.seed, STREAM_IID_BLOCK, b);
            *cache = Some((b, iid_shuffle(episodes, config.queue_size, seed)));
        }
        let (_, episodes) = cache.as_ref().expect("filled above");
        Ok(episodes[(index % self.block) as usize].clone())
    }
}

/// A fixed list of episodes, cycled.
pub struct EpisodeList {
    episodes: Vec<Episode>,
}

impl EpisodeList {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Self { episodes }
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }
}

impl EpisodeSource for EpisodeList {
    fn episode(&self, index: u64) -> Result<Episode> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyInput("episode list"));
        }
        Ok(self.episodes[(index % self.episodes.len() as u64) as usize].clone())
    }
}

/// Exponential moving averages of the training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub ema_total: f64,
    pub ema_p_new: f64,
    pub steps: u64,
}

const EMA_DECAY: f64 = 0.99;

impl RunningStats {
    fn update(&mut self, loss: &LossBreakdown) {
        if self.steps == 0 {
            self.ema_total = loss.total;
            self.ema_p_new = loss.p_new;
        } else {
            self.ema_total = EMA_DECAY * self.ema_total + (1.0 - EMA_DECAY) * loss.total;
            self.ema_p_new = EMA_DECAY * self.ema_p_new + (1.0 - EMA_DECAY) * loss.p_new;
        }
        self.steps += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub params: ParameterSet,
    pub adam: Adam,
    pub stats: RunningStats,
}

impl TrainState {
    pub fn new(params: ParameterSet, adam: AdamConfig) -> Self {
        let adam = Adam::new(params.len(), adam);
        Self {
            step: 0,
            params,
            adam,
            stats: RunningStats::default(),
        }
    }
}

/// What one optimizer step saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Index of the step (and of the episode it trained on).
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

fn parameter_norms(params: &ParameterSet) -> String {
    let flat = params.flat();
    params
        .groups()
        .into_iter()
        .map(|(name, r)| {
            let n = flat[r].iter().map(|v| v * v).sum::<f64>().sqrt();
            format!("{name}={n:e}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn numerical(step: u64, what: &str, params: &ParameterSet) -> Error {
    Error::Numerical {
        episode: step,
        message: format!("{what}; parameter norms: {}", parameter_norms(params)),
    }
}

/// Loss and gradient of one episode against a fresh memory.
pub fn episode_gradient(
    params: &ParameterSet,
    episode: &Episode,
    setup: &TrainSetup,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let tape = Tape::new();
    let live = params.lift(&tape);
    let mut memory = PrototypeMemory::new(setup.memory)?;
    let trace = episode_loss(episode, &mut memory, &live, &setup.loss, setup.train.alpha)?;
    let loss = trace.loss.plain();
    let grads = if trace.loss.total.is_constant() {
        vec![0.0; params.len()]
    } else {
        tape.grad(trace.loss.total)?.into_params()
    };
    Ok((loss, grads))
}

/// Trains on `source[state.step]` and applies one Adam update.
pub fn train_step(
    state: &mut TrainState,
    source: &dyn EpisodeSource,
    setup: &TrainSetup,
) -> Result<StepRecord> {
    let step = state.step;
    let episode = source.episode(step)?;
    let (loss, grads) = episode_gradient(&state.params, &episode, setup)?;
    if !loss.total.is_finite() {
        return Err(numerical(step, "non-finite loss", &state.params));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(numerical(step, "non-finite gradient", &state.params));
    }
    let lr = setup.train.learning_rate(step);
    let mut flat = state.params.flat();
    state.adam.step(&mut flat, &grads, lr)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(numerical(
            step,
            "optimizer produced non-finite parameters",
            &state.params,
        ));
    }
    state.params.set_flat(&flat)?;
    state.step += 1;
    state.stats.update(&loss);
    Ok(StepRecord { step, loss, lr })
}

/// Runs until `setup.train.total_steps`, calling `on_step` after every
/// update (logging and checkpointing live there).
pub fn train<F>(
    source: &dyn EpisodeSource,
    setup: &TrainSetup,
    mut state: TrainState,
    mut on_step: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &StepRecord) -> Result<()>,
{
    setup.validate()?;
    while state.step < setup.train.total_steps {
        let record = train_step(&mut state, source, setup)?;
        on_step(&state, &record)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub scalars: ScalarInit,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    pub stream: StreamConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Central-difference step.
    #[serde(default = "default_h")]
    pub h: f64,
    /// Number of episodes that must pass the branch-stability screen.
    #[serde(default = "default_check_episodes")]
    pub episodes: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    /// Lower bound on the denominator of the relative error.
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    /// Added to every analytic derivative; a harness self-test hook.
    #[serde(default)]
    pub corrupt: f64,
}

fn default_h() -> f64 {
    1e-5
}
fn default_check_episodes() -> usize {
    3
}
fn default_attempts() -> usize {
    200
}
fn default_floor() -> f64 {
    1e-6
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.scalars.validate()?;
        self.memory.validate()?;
        self.loss.validate()?;
        self.stream.validate()?;
        if self.encoder.input_dim != self.stream.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.encoder.input_dim,
                found: self.stream.obs_dim,
            });
        }
        if !(self.h > 0.0 && self.floor > 0.0) {
            return Err(Error::invalid("h and floor must be positive"));
        }
        if self.episodes == 0 {
            return Err(Error::invalid("gradient check needs at least one episode"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub coords: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel: f64,
    pub episodes_checked: usize,
    /// Episodes discarded because a perturbation changed a discrete choice.
    pub resampled: usize,
    pub tolerance: f64,
    pub passed: bool,
}

struct Probe {
    total: f64,
    kinked: bool,
    decisions: Vec<FrameDecision>,
    clamped: (bool, bool),
}

/// Loss at `base` with coordinate `coord` shifted by `delta`, holding every
/// stop-gradient quantity at its unperturbed value.
fn probe(
    params: &ParameterSet,
    base: &[f64],
    coord: Option<(usize, f64)>,
    episode: &Episode,
    config: &GradCheckConfig,
) -> Result<Probe> {
    let flat: Vec<Shadow> = base
        .iter()
        .enumerate()
        .map(|(i, &v)| match coord {
            Some((c, delta)) if c == i => Shadow::new(v, v + delta),
            _ => Shadow::new(v, v),
        })
        .collect();
    let live = LiveParams::from_flat(params.encoder, &flat, params.pseudo_ratio);
    let mut memory = PrototypeMemory::new(config.memory)?;
    let trace = episode_loss(episode, &mut memory, &live, &config.loss, config.alpha)?;
    let eps = config.loss.clamp_eps;
    let p_new = trace.loss.p_new.value();
    Ok(Probe {
        total: trace.loss.total.value(),
        kinked: trace.loss.total.kinked,
        decisions: trace.decisions,
        clamped: (p_new < eps, p_new > 1.0 - eps),
    })
}

/// Compares analytic gradients with central finite differences on small
/// generated episodes. Episodes whose discrete choices change, or whose
/// ReLU units cross their kink, under any single-coordinate perturbation
/// are replaced by fresh ones.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    config.validate()?;
    let mut encoder = config.encoder;
    encoder.seed = derive_seed(config.seed, 0, encoder.seed);
    let params = ParameterSet::init(encoder, config.scalars)?;
    let generator = StreamGenerator::new(config.stream.clone())?;
    let setup = TrainSetup {
        train: TrainConfig {
            alpha: config.alpha,
            ..TrainConfig::default()
        },
        memory: config.memory,
        loss: config.loss,
    };
    let base = params.flat();
    let groups = params.groups();
    let mut worst: Vec<(f64, f64)> = vec![(0.0, 0.0); groups.len()];
    let mut checked = 0;
    let mut resampled = 0;
    let mut attempt = 0u64;
    while checked < config.episodes {
        if attempt as usize >= config.max_attempts {
            return Err(Error::invalid(format!(
                "no branch-stable episode found in {} attempts",
                config.max_attempts
            )));
        }
        let episode = generator.episode(config.seed, attempt);
        attempt += 1;
        let reference = probe(&params, &base, None, &episode, config)?;
        let mut numeric = Vec::with_capacity(base.len());
        let mut stable = true;
        for i in 0..base.len() {
            let mut f = [0.0; 2];
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let p = probe(&params, &base, Some((i, sign * config.h)), &episode, config)?;
                if p.kinked || p.decisions != reference.decisions || p.clamped != reference.clamped
                {
                    stable = false;
                }
                f[k] = p.total;
            }
            if !stable {
                break;
            }
            numeric.push((f[0] - f[1]) / (2.0 * config.h));
        }
        if !stable {
            resampled += 1;
            continue;
        }
        let (_, analytic) = episode_gradient(&params, &episode, &setup)?;
        for (g, (_, range)) in groups.iter().enumerate() {
            for i in range.clone() {
                let a = analytic[i] + config.corrupt;
                let n = numeric[i];
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(config.floor);
                worst[g].0 = worst[g].0.max(rel);
                worst[g].1 = worst[g].1.max(abs);
            }
        }
        checked += 1;
    }
    let groups: Vec<GroupError> = groups
        .iter()
        .zip(&worst)
        .filter(|((_, r), _)| !r.is_empty())
        .map(|((name, r), &(rel, abs))| GroupError {
            group: name.to_string(),
            coords: r.len(),
            max_rel: rel,
            max_abs: abs,
        })
        .collect();
    let max_rel = groups.iter().map(|g| g.max_rel).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel,
        episodes_checked: checked,
        resampled,
        tolerance: config.tolerance,
        passed: max_rel <= config.tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Unsupervised,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Threshold grid for AMI_max; `None` skips the sweep.
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub ap_mode: ApMode,
}

impl EvalConfig {
    pub fn unsupervised(alpha: f64) -> Self {
        Self {
            protocol: Protocol::Unsupervised,
            alpha,
            alpha_grid: None,
            ap_mode: ApMode::default(),
        }
    }

    pub fn supervised() -> Self {
        Self {
            protocol: Protocol::Supervised,
            alpha: default_alpha(),
            alpha_grid: None,
            ap_mode: ApMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeMetrics>,
    /// Mean of each per-episode metric, plus `ami_max` and `alpha_star`
    /// when a grid was given.
    pub summary: BTreeMap<String, f64>,
}

/// Embeds every frame of every episode and pairs it with its label.
pub fn embed_episodes(params: &ParameterSet, episodes: &[Episode]) -> Result<Vec<EmbeddedEpisode>> {
    let live = params.plain();
    episodes
        .par_iter()
        .map(|episode| {
            let embeddings = episode
                .iter()
                .map(|f| embed(&f.features, &live))
                .collect::<Result<Vec<_>>>()?;
            let labels = episode.iter().map(|f| f.label).collect();
            Ok(EmbeddedEpisode { embeddings, labels })
        })
        .collect()
}

fn required_labels(episode: &EmbeddedEpisode, index: usize) -> Result<Vec<u64>> {
    episode
        .labels
        .iter()
        .enumerate()
        .map(|(frame, l)| {
            l.ok_or(Error::MissingLabel {
                episode: index,
                frame,
            })
        })
        .collect()
}

/// Inference-only evaluation, one fresh memory per episode. Episodes run
/// in parallel and are reported in input order.
pub fn evaluate(
    params: &ParameterSet,
    episodes: &[Episode],
    memory: MemoryConfig,
    config: &EvalConfig,
) -> Result<EvalReport> {
    memory.validate()?;
    if episodes.is_empty() {
        return Ok(EvalReport::default());
    }
    let embedded = embed_episodes(params, episodes)?;
    let cluster = params.cluster_params();
    let per_episode: Vec<EpisodeMetrics> = embedded
        .par_iter()
        .enumerate()
        .map(|(i, ep)| -> Result<EpisodeMetrics> {
            let truth = required_labels(ep, i)?;
            let metrics = match config.protocol {
                Protocol::Unsupervised => {
                    let pred =
                        unsupervised_readout(&ep.embeddings, &cluster, memory, config.alpha)?;
                    let (h, c) = homogeneity_completeness(&truth, &pred)?;
                    let clusters = pred.iter().collect::<std::collections::BTreeSet<_>>().len();
                    vec![
                        ("ami".to_string(), ami(&truth, &pred)?),
                        ("ari".to_string(), ari(&truth, &pred)?),
                        ("homogeneity".to_string(), h),
                        ("completeness".to_string(), c),
                        ("clusters".to_string(), clusters as f64),
                    ]
                }
                Protocol::Supervised => {
                    let preds = supervised_readout(&ep.embeddings, &ep.labels, &cluster, memory)?;
                    let ap = average_precision(&preds, config.ap_mode)?;
                    vec![("ap".to_string(), ap.ap)]
                }
            };
            Ok(EpisodeMetrics {
                episode: i,
                metrics,
            })
        })
        .collect::<Result<_>>()?;

    let mut summary: BTreeMap<String, f64> = BTreeMap::new();
    for ep in &per_episode {
        for (name, v) in &ep.metrics {
            *summary.entry(name.clone()).or_default() += v / per_episode.len() as f64;
        }
    }
    if let (Protocol::Unsupervised, Some(grid)) = (config.protocol, &config.alpha_grid) {
        let best = ami_max(&embedded, &cluster, memory, grid)?;
        summary.insert("ami_max".to_string(), best.ami);
        summary.insert("alpha_star".to_string(), best.alpha);
    }
    Ok(EvalReport {
        episodes: per_episode,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::streams::MeanLayout;

    fn small_stream() -> StreamConfig {
        StreamConfig {
            episode_len: 12,
            num_contexts: 2,
            latent_dim: 4,
            obs_dim: 4,
            ..StreamConfig::default()
        }
    }

    fn setup(steps: u64) -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                total_steps: steps,
                decay_steps: vec![2, 4],
                ..TrainConfig::default()
            },
            memory: MemoryConfig {
                capacity: 6,
                ..MemoryConfig::default()
            },
            loss: LossConfig::default(),
        }
    }

    fn state() -> TrainState {
        let p = ParameterSet::init(EncoderConfig::linear(4, 3, 7), ScalarInit::default()).unwrap();
        TrainState::new(p, AdamConfig::default())
    }

    #[test]
    fn schedule_is_staircase() {
        let c = TrainConfig {
            decay_steps: vec![10, 20],
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate(0), 1e-3);
        assert_eq!(c.learning_rate(9), 1e-3);
        assert_eq!(c.learning_rate(10), 1e-3 * 0.1);
        assert_eq!(c.learning_rate(19), 1e-3 * 0.1);
        assert_eq!(c.learning_rate(20), 1e-3 * 0.1f64.powi(2));
        assert_eq!(c.learning_rate(1_000_000), 1e-3 * 0.1f64.powi(2));
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let source = GeneratedEpisodes::new(small_stream(), 1).unwrap();
        let s0 = state();
        let s = train(&source, &setup(0), s0.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let source = GeneratedEpisodes::new(small_stream(), 3).unwrap();
        let full = train(&source, &setup(6), state(), |_, _| Ok(())).unwrap();
        let again = train(&source, &setup(6), state(), |_, _| Ok(())).unwrap();
        assert_eq!(full, again);
        let half = train(&source, &setup(3), state(), |_, _| Ok(())).unwrap();
        let resumed = train(&source, &setup(6), half, |_, _| Ok(())).unwrap();
        assert_eq!(full, resumed);
        assert_ne!(full.params, state().params);
        assert_eq!(full.step, 6);
        assert_eq!(full.adam.updates(), 6);
    }

    #[test]
    fn callback_sees_schedule() {
        let source = GeneratedEpisodes::new(small_stream(), 3).unwrap();
        let mut lrs = Vec::new();
        train(&source, &setup(5), state(), |_, r| {
            lrs.push((r.step, r.lr));
            Ok(())
        })
        .unwrap();
        let expected = [1e-3, 1e-3, 1e-3 * 0.1, 1e-3 * 0.1, 1e-3 * 0.1f64.powi(2)];
        for (i, (s, lr)) in lrs.iter().enumerate() {
            assert_eq!(*s, i as u64);
            assert_eq!(*lr, expected[i]);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut s = state();
        s.params.beta = f64::NAN;
        let source = GeneratedEpisodes::new(small_stream(), 3).unwrap();
        match train_step(&mut s, &source, &setup(1)) {
            Err(Error::Numerical { episode, message }) => {
                assert_eq!(episode, 0);
                assert!(message.contains("encoder="), "{message}");
            }
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn iid_source_is_indexed_consistently() {
        let cfg = StreamConfig {
            iid_shuffle: true,
            queue_size: 50,
            ..small_stream()
        };
        let a = GeneratedEpisodes::new(cfg.clone(), 9).unwrap();
        let b = GeneratedEpisodes::new(cfg, 9).unwrap();
        let e20 = a.episode(20).unwrap();
        assert_eq!(a.episode(3).unwrap(), b.episode(3).unwrap());
        assert_eq!(e20, b.episode(20).unwrap());
        assert_eq!(a.episode(20).unwrap(), e20);
    }

    #[test]
    fn episode_list_cycles() {
        let g = StreamGenerator::new(small_stream()).unwrap();
        let list = EpisodeList::new(g.episodes(1, 2));
        assert_eq!(list.episode(0).unwrap(), list.episode(2).unwrap());
        assert!(EpisodeList::new(Vec::new()).episode(0).is_err());
    }

    fn gc(encoder: EncoderConfig, stop: bool) -> GradCheckConfig {
        let dim = encoder.input_dim;
        GradCheckConfig {
            encoder,
            scalars: ScalarInit {
                beta: -8.5,
                ..ScalarInit::default()
            },
            memory: MemoryConfig {
                capacity: 2,
                ..MemoryConfig::default()
            },
            loss: LossConfig {
                lambda_ent: 0.5,
                stop_prototype_gradient: stop,
                ..LossConfig::default()
            },
            stream: StreamConfig {
                episode_len: 5,
                num_contexts: 1,
                latent_dim: dim,
                obs_dim: dim,
                frame_noise: 0.3,
                ..StreamConfig::default()
            },
            alpha: 0.5,
            h: 1e-5,
            episodes: 3,
            max_attempts: 200,
            floor: default_floor(),
            tolerance: 1e-4,
            seed: 5,
            corrupt: 0.0,
        }
    }

    #[test]
    fn grad_check_identity_single_frame() {
        let mut c = gc(EncoderConfig::identity(4), false);
        c.stream.episode_len = 1;
        c.tolerance = 1e-6;
        let r = grad_check(&c).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn grad_check_mlp_both_modes() {
        for stop in [false, true] {
            let r = grad_check(&gc(
                EncoderConfig::mlp(4, 6, 4, crate::encoder::Activation::Tanh, 1),
                stop,
            ))
            .unwrap();
            assert!(r.passed, "{r:?}");
            assert_eq!(r.episodes_checked, 3);
        }
    }

    #[test]
    fn grad_check_catches_corruption() {
        let mut c = gc(EncoderConfig::linear(4, 3, 2), false);
        c.corrupt = 1e-2;
        assert!(!grad_check(&c).unwrap().passed);
    }

    #[test]
    fn evaluate_separable_identity() {
        let stream = StreamConfig {
            episode_len: 20,
            num_contexts: 1,
            classes_per_context: Some(4),
            crp_concentration: 2.0,
            latent_dim: 6,
            obs_dim: 6,
            layout: MeanLayout::Orthogonal,
            frame_noise: 0.0,
            ..StreamConfig::default()
        };
        let eps = StreamGenerator::new(stream).unwrap().episodes(4, 3);
        let params = ParameterSet::init(EncoderConfig::identity(6), ScalarInit::default()).unwrap();
        // û is sigmoid(2) on a perfect match and sigmoid(12) on an orthogonal one
        let r = evaluate(
            &params,
            &eps,
            MemoryConfig::default(),
            &EvalConfig::unsupervised(0.95),
        )
        .unwrap();
        assert_eq!(r.episodes.len(), 3);
        for ep in &r.episodes {
            assert_eq!(ep.metrics[0], ("ami".to_string(), 1.0));
        }
        let r = evaluate(
            &params,
            &eps,
            MemoryConfig::default(),
            &EvalConfig::supervised(),
        )
        .unwrap();
        assert!((r.summary["ap"] - 1.0).abs() < 1e-12);
        let empty = evaluate(
            &params,
            &[],
            MemoryConfig::default(),
            &EvalConfig::supervised(),
        )
        .unwrap();
        assert!(empty.episodes.is_empty() && empty.summary.is_empty());
    }

    #[test]
    fn evaluate_requires_labels() {
        let g = StreamGenerator::new(small_stream()).unwrap();
        let mut eps = g.episodes(1, 1);
        eps[0][3].label = None;
        let params = ParameterSet::init(EncoderConfig::identity(4), ScalarInit::default()).unwrap();
        let err = evaluate(
            &params,
            &eps,
            MemoryConfig::default(),
            &EvalConfig::supervised(),
        );
        assert!(matches!(err, Err(Error::MissingLabel { .. })));
    }
}
