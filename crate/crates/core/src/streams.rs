//! Non-iid episode streams.
//!
//! An episode is split into contiguous context blocks. Inside a block,
//! classes follow a Chinese restaurant process: frame `t` of the block
//! joins an existing class with probability proportional to its count, or
//! opens a new class with probability `theta / (t + theta)`. Each class has
//! a latent mean drawn once per episode; a frame is the mean plus Gaussian
//! noise, padded with nuisance coordinates and rotated into observation
//! space by a fixed random orthogonal transform. The second view of a frame
//! shares its latent sample and differs only by augmentation noise (and,
//! optionally, freshly drawn nuisance coordinates).
//!
//! Episodes can also be read from and written to JSONL files, one frame
//! per line with a blank line between episodes.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng64};

/// Labels at or above this value belong to the distractor pool.
pub const DISTRACTOR_LABEL_BASE: u64 = 1 << 32;

const STREAM_DISTRACTOR_MEANS: u64 = 1;
const STREAM_INJECT: u64 = 2;
const STREAM_EPISODE: u64 = 3;
const STREAM_SYNTH_VIEW: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFrame {
    pub t: usize,
    pub context: usize,
    pub label: Option<u64>,
    pub features: Vec<f64>,
    pub view2: Vec<f64>,
}

pub type Episode = Vec<EpisodeFrame>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanLayout {
    /// Uniform directions on a sphere of radius `separation`.
    Sphere,
    /// Class `c` sits at `separation * e_(c mod latent_dim)`.
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub episode_len: usize,
    pub num_contexts: usize,
    /// Cap on distinct classes inside one context; `None` leaves the CRP
    /// unbounded.
    pub classes_per_context: Option<usize>,
    pub crp_concentration: f64,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub layout: MeanLayout,
    pub separation: f64,
    /// Per-frame latent noise around the class mean.
    pub frame_noise: f64,
    /// Augmentation noise between the two views.
    pub view_noise: f64,
    /// Standard deviation of the `obs_dim - latent_dim` nuisance coordinates.
    pub nuisance_noise: f64,
    /// Draw fresh nuisance coordinates for the second view.
    pub resample_nuisance: bool,
    pub world_seed: u64,
    pub distractor_rate: f64,
    pub distractor_pool: usize,
    pub iid_shuffle: bool,
    pub queue_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            episode_len: 150,
            num_contexts: 5,
            classes_per_context: None,
            crp_concentration: 1.0,
            latent_dim: 8,
            obs_dim: 8,
            layout: MeanLayout::Sphere,
            separation: 1.0,
            frame_noise: 0.1,
            view_noise: 0.1,
            nuisance_noise: 0.0,
            resample_nuisance: false,
            world_seed: 0,
            distractor_rate: 0.0,
            distractor_pool: 10,
            iid_shuffle: false,
            queue_size: 1000,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 || self.num_contexts == 0 {
            return Err(Error::invalid(
                "episode_len and num_contexts must be at least 1",
            ));
        }
        if self.latent_dim == 0 || self.obs_dim < self.latent_dim {
            return Err(Error::invalid(format!(
                "need 1 <= latent_dim <= obs_dim, got {} and {}",
                self.latent_dim, self.obs_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::invalid(format!(
                "distractor_rate must lie in [0, 1], got {}",
                self.distractor_rate
            )));
        }
        if self.distractor_rate > 0.0 && self.distractor_pool == 0 {
            return Err(Error::invalid("distractor_pool must be positive"));
        }
        if self.classes_per_context == Some(0) {
            return Err(Error::invalid("classes_per_context must be positive"));
        }
        if self.queue_size == 0 {
            return Err(Error::invalid("queue_size must be at least 1"));
        }
        let scales = [
            self.crp_concentration,
            self.separation,
            self.frame_noise,
            self.view_noise,
            self.nuisance_noise,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid(
                "concentration, separation and noise scales must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Lengths of the contiguous context blocks; earlier blocks take the
    /// remainder.
    pub fn context_blocks(&self) -> Vec<usize> {
        let base = self.episode_len / self.num_contexts;
        let extra = self.episode_len % self.num_contexts;
        (0..self.num_contexts)
            .map(|i| base + usize::from(i < extra))
            .collect()
    }
}

/// Fixed random rotation of observation space.
#[derive(Clone, Debug)]
pub struct WorldTransform {
    matrix: DMatrix<f64>,
}

impl WorldTransform {
    /// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
    /// signs of R's diagonal folded into Q.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let g = DMatrix::from_fn(dim, dim, |_, _| gaussian(&mut rng));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Self { matrix: q }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.matrix[(i, j)] * v[j]).sum())
            .collect()
    }
}

fn gaussian(rng: &mut Rng64) -> f64 {
    StandardNormal.sample(rng)
}

fn sphere_point(rng: &mut Rng64, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| radius * x / n).collect();
        }
    }
}

/// Episode generator for one configuration; holds the world transform and
/// the distractor class means, which are shared by every episode.
#[derive(Clone, Debug)]
pub struct StreamGenerator {
    config: StreamConfig,
    world: WorldTransform,
    distractor_means: Vec<Vec<f64>>,
}

impl StreamGenerator {
    pub fn new(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        let world = WorldTransform::new(config.obs_dim, config.world_seed);
        let distractor_means = (0..config.distractor_pool)
            .map(|j| {
                let mut rng = seeded(derive_seed(
                    config.world_seed,
                    STREAM_DISTRACTOR_MEANS,
                    j as u64,
                ));
                sphere_point(&mut rng, config.latent_dim, config.separation)
            })
            .collect();
        Ok(Self {
            config,
            world,
            distractor_means,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldTransform {
        &self.world
    }

    fn class_mean(&self, rng: &mut Rng64, class_index: usize) -> Vec<f64> {
        let c = &self.config;
        match c.layout {
            MeanLayout::Sphere => sphere_point(rng, c.latent_dim, c.separation),
            MeanLayout::Orthogonal => {
                let mut v = vec![0.0; c.latent_dim];
                v[class_index % c.latent_dim] = c.separation;
                v
            }
        }
    }

    /// Both views of one frame drawn around `mean`.
    fn observe(&self, rng: &mut Rng64, mean: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let nuisance_dim = c.obs_dim - c.latent_dim;
        let latent: Vec<f64> = mean
            .iter()
            .map(|m| m + c.frame_noise * gaussian(rng))
            .collect();
        let nuisance: Vec<f64> = (0..nuisance_dim)
            .map(|_| c.nuisance_noise * gaussian(rng))
            .collect();
        let mut first = latent.clone();
        first.extend(&nuisance);
        let mut second: Vec<f64> = latent
            .iter()
            .map(|x| x + c.view_noise * gaussian(rng))
            .collect();
        if c.resample_nuisance {
            second.extend((0..nuisance_dim).map(|_| c.nuisance_noise * gaussian(rng)));
        } else {
            second.extend(nuisance.iter().map(|x| x + c.view_noise * gaussian(rng)));
        }
        (self.world.apply(&first), self.world.apply(&second))
    }

    /// One episode without distractors.
    pub fn generate_episode(&self, seed: u64) -> Episode {
        let c = &self.config;
        let mut rng = seeded(seed);
        let mut frames = Vec::with_capacity(c.episode_len);
        let mut means: Vec<Vec<f64>> = Vec::new();
        let theta = c.crp_concentration;
        for (context, block) in c.context_blocks().into_iter().enumerate() {
            // (episode class index, count) per table of this context
            let mut tables: Vec<(usize, usize)> = Vec::new();
            for t_ctx in 0..block {
                let p_new = if t_ctx == 0 {
                    1.0
                } else {
                    theta / (t_ctx as f64 + theta)
                };
                let capped = c.classes_per_context.is_some_and(|cap| tables.len() >= cap);
                let draw: f64 = rng.random();
                let table = if !capped && draw < p_new {
                    let class = means.len();
                    means.push(self.class_mean(&mut rng, class));
                    tables.push((class, 0));
                    tables.len() - 1
                } else {
                    // existing table, proportional to its count
                    let mut pick = rng.random_range(0..t_ctx);
                    tables
                        .iter()
                        .position(|&(_, n)| {
                            if pick < n {
                                true
                            } else {
                                pick -= n;
                                false
                            }
                        })
                        .expect("counts sum to t_ctx")
                };
                tables[table].1 += 1;
                let class = tables[table].0;
                let (features, view2) = self.observe(&mut rng, &means[class]);
                frames.push(EpisodeFrame {
                    t: frames.len(),
                    context,
                    label: Some(class as u64),
                    features,
                    view2,
                });
            }
        }
        frames
    }

    /// Replaces each frame, independently with probability
    /// `distractor_rate`, by a draw from the distractor pool.
    pub fn inject_distractors(&self, mut episode: Episode, seed: u64) -> Episode {
        let rate = self.config.distractor_rate;
        if rate <= 0.0 {
            return episode;
        }
        let mut rng = seeded(seed);
        for frame in &mut episode {
            let hit = rate >= 1.0 || rng.random::<f64>() < rate;
            if hit {
                let j = rng.random_range(0..self.distractor_means.len());
                let (features, view2) = self.observe(&mut rng, &self.distractor_means[j]);
                frame.features = features;
                frame.view2 = view2;
                frame.label = Some(DISTRACTOR_LABEL_BASE + j as u64);
            }
        }
        episode
    }

    /// Episode `index` of the stream rooted at `seed`, with distractors.
    pub fn episode(&self, seed: u64, index: u64) -> Episode {
        let base = self.generate_episode(derive_seed(seed, STREAM_EPISODE, index));
        self.inject_distractors(base, derive_seed(seed, STREAM_INJECT, index))
    }

    /// `count` episodes, shuffled through the iid queue when configured.
    pub fn episodes(&self, seed: u64, count: usize) -> Vec<Episode> {
        let episodes: Vec<Episode> = (0..count as u64).map(|i| self.episode(seed, i)).collect();
        if self.config.iid_shuffle {
            iid_shuffle(episodes, self.config.queue_size, derive_seed(seed, 5, 0))
        } else {
            episodes
        }
    }
}

/// Relabels classes so they are unique across episodes, in order of first
/// appearance; distractor labels are shared and kept.
pub fn globalize_labels(episodes: &mut [Episode]) {
    let mut map: HashMap<(usize, u64), u64> = HashMap::new();
    for (e, episode) in episodes.iter_mut().enumerate() {
        for frame in episode {
            if let Some(label) = frame.label {
                if label >= DISTRACTOR_LABEL_BASE {
                    continue;
                }
                let next = map.len() as u64;
                frame.label = Some(*map.entry((e, label)).or_insert(next));
            }
        }
    }
}

/// Streaming shuffle through a buffer of `queue_size` frames that spans
/// episode boundaries; the output is cut back into episodes of the input
/// episode length.
pub fn iid_shuffle(mut episodes: Vec<Episode>, queue_size: usize, seed: u64) -> Vec<Episode> {
    let queue_size = queue_size.max(1);
    let Some(len) = episodes.first().map(Vec::len).filter(|&n| n > 0) else {
        return episodes;
    };
    globalize_labels(&mut episodes);
    let mut rng = seeded(seed);
    let mut source = episodes.into_iter().flatten();
    let mut buffer: Vec<EpisodeFrame> = source.by_ref().take(queue_size).collect();
    let mut out: Vec<EpisodeFrame> = Vec::new();
    while !buffer.is_empty() {
        let i = rng.random_range(0..buffer.len());
        match source.next() {
            Some(next) => out.push(std::mem::replace(&mut buffer[i], next)),
            None => out.push(buffer.remove(i)),
        }
    }
    out.chunks(len)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .map(|(t, f)| EpisodeFrame { t, ..f.clone() })
                .collect()
        })
        .collect()
}

/// Probability that two consecutive frames share a label, corrected for
/// the chance rate: (P(same) - sum p_c^2) / (1 - sum p_c^2). Zero for an
/// iid sequence, one for a perfectly persistent one.
pub fn lag1_label_autocorrelation(frames: &[EpisodeFrame]) -> f64 {
    let labels: Vec<u64> = frames.iter().filter_map(|f| f.label).collect();
    if labels.len() < 2 {
        return 0.0;
    }
    let same =
        labels.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (labels.len() - 1) as f64;
    let chance = chance_same_rate(&labels);
    if chance >= 1.0 {
        return 0.0;
    }
    (same - chance) / (1.0 - chance)
}

fn chance_same_rate(labels: &[u64]) -> f64 {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    counts.values().map(|&c| (c as f64 / n).powi(2)).sum()
}

/// Aggregate statistics of a set of episodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamSummary {
    pub episodes: usize,
    pub frames: usize,
    /// Distinct labels per episode, averaged.
    pub mean_classes: f64,
    /// Distinct labels across all episodes (episode-local ids counted once).
    pub distinct_labels: usize,
    /// Fraction of consecutive same-context frame pairs sharing a label.
    pub lag1_same_rate: f64,
    /// Probability that two frames of the same episode share a label.
    pub marginal_same_rate: f64,
}

impl StreamSummary {
    pub fn of(episodes: &[Episode]) -> Self {
        let frames = episodes.iter().map(Vec::len).sum();
        let mut same = 0usize;
        let mut pairs = 0usize;
        let mut classes = 0usize;
        let mut marginal = 0.0;
        let mut all = std::collections::HashSet::new();
        for episode in episodes {
            for w in episode.windows(2) {
                if w[0].context == w[1].context {
                    if let (Some(a), Some(b)) = (w[0].label, w[1].label) {
                        pairs += 1;
                        same += usize::from(a == b);
                    }
                }
            }
            let labels: Vec<u64> = episode.iter().filter_map(|f| f.label).collect();
            let distinct: std::collections::HashSet<u64> = labels.iter().copied().collect();
            classes += distinct.len();
            all.extend(distinct);
            if !labels.is_empty() {
                marginal += chance_same_rate(&labels);
            }
        }
        let n = episodes.len().max(1) as f64;
        Self {
            episodes: episodes.len(),
            frames,
            mean_classes: classes as f64 / n,
            distinct_labels: all.len(),
            lag1_same_rate: if pairs > 0 {
                same as f64 / pairs as f64
            } else {
                0.0
            },
            marginal_same_rate: marginal / n,
        }
    }
}

/// On-disk frame record; `view2` may be omitted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: usize,
    context: usize,
    label: Option<u64>,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view2: Option<Vec<f64>>,
}

pub fn write_episodes<W: Write>(mut out: W, episodes: &[Episode]) -> Result<()> {
    for (i, episode) in episodes.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        for frame in episode {
            let record = FrameRecord {
                t: frame.t,
                context: frame.context,
                label: frame.label,
                features: frame.features.clone(),
                view2: Some(frame.view2.clone()),
            };
            serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_episodes(std::io::BufWriter::new(file), episodes)
}

/// Streaming reader over a JSONL episode file.
pub struct EpisodeReader<R> {
    input: R,
    path: PathBuf,
    line_no: usize,
    dim: Option<usize>,
    view_noise: f64,
    seed: u64,
    done: bool,
}

impl<R: BufRead> EpisodeReader<R> {
    /// `view_noise` and `seed` drive the additive-noise augmentation used
    /// for frames stored without a second view.
    pub fn new(input: R, path: impl Into<PathBuf>, view_noise: f64, seed: u64) -> Self {
        Self {
            input,
            path: path.into(),
            line_no: 0,
            dim: None,
            view_noise,
            seed,
            done: false,
        }
    }

    /// Requires every frame to carry `dim` features.
    pub fn expect_dim(mut self, dim: usize) -> Self {
        self.dim = Some(dim);
        self
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn parse(&mut self, line: &str) -> Result<EpisodeFrame> {
        let record: FrameRecord =
            serde_json::from_str(line).map_err(|e| self.error(e.to_string()))?;
        let dim = *self.dim.get_or_insert(record.features.len());
        if record.features.len() != dim {
            return Err(self.error(format!(
                "expected {dim} features, found {}",
                record.features.len()
            )));
        }
        let view2 = match record.view2 {
            Some(v) if v.len() != dim => {
                return Err(self.error(format!("expected {dim} view2 values, found {}", v.len())))
            }
            Some(v) => v,
            None => {
                let mut rng = seeded(derive_seed(
                    self.seed,
                    STREAM_SYNTH_VIEW,
                    self.line_no as u64,
                ));
                record
                    .features
                    .iter()
                    .map(|x| x + self.view_noise * gaussian(&mut rng))
                    .collect()
            }
        };
        if record.features.iter().chain(&view2).any(|x| !x.is_finite()) {
            return Err(self.error("non-finite value"));
        }
        Ok(EpisodeFrame {
            t: record.t,
            context: record.context,
            label: record.label,
            features: record.features,
            view2,
        })
    }
}

impl<R: BufRead> Iterator for EpisodeReader<R> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut episode = Vec::new();
        let mut line = String::new();
        loop {
            line.clear();
            match self.input.read_line(&mut line) {
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
                Ok(0) => {
                    self.done = true;
                    return (!episode.is_empty()).then_some(Ok(episode));
                }
                Ok(_) => {}
            }
            self.line_no += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                if episode.is_empty() {
                    continue;
                }
                return Some(Ok(episode));
            }
            match self.parse(trimmed) {
                Ok(frame) => episode.push(frame),
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Reads every episode of a JSONL file.
pub fn load_episodes(path: &Path, view_noise: f64, seed: u64) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path)?;
    EpisodeReader::new(std::io::BufReader::new(file), path, view_noise, seed).collect()
}
