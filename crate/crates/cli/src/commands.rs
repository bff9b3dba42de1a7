//! The five subcommands, as library functions that write their artifacts
//! under `config.out` and return what they computed.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use protostream::encoder::{EncoderKind, ParameterSet};
use protostream::metrics::{ami_max, knn_readout, linear_readout, EmbeddedEpisode, LinearReadout};
use protostream::rng::derive_seed;
use protostream::streams::{load_episodes, save_episodes, Episode, StreamGenerator, StreamSummary};
use protostream::trainer::{
    embed_episodes, evaluate, grad_check, train, EpisodeList, EpisodeSource, EvalConfig,
    GeneratedEpisodes, GradCheckConfig, GradCheckReport, Protocol, StepRecord, TrainSetup,
    TrainState,
};
use protostream::Error;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{merge, EvalProtocol, RunConfig};
use crate::error::{CliError, Result};

/// Version of every JSON summary and CSV layout written here.
pub const FORMAT_VERSION: u32 = 1;

pub const TRAIN_LOG_HEADER: [&str; 7] =
    ["step", "l_self", "l_ent", "l_new", "total", "p_new", "lr"];
pub const METRICS_HEADER: [&str; 4] = ["episode", "protocol", "metric", "value"];
pub const SWEEP_HEADER: [&str; 7] = [
    "parameter",
    "value",
    "ami",
    "ami_max",
    "alpha_star",
    "ap",
    "relative_ami",
];

const SEED_ENCODER: u64 = 0;
const SEED_EVAL_STREAM: u64 = 11;
const SEED_FILE_VIEWS: u64 = 12;

/// Sweepable parameters and the config keys they set.
pub const SWEEP_PARAMETERS: [(&str, &str); 8] = [
    ("K", "memory.capacity"),
    ("rho", "memory.decay"),
    ("alpha", "train.alpha"),
    ("mu", "loss.beta_mean"),
    ("lambda_new", "loss.lambda_new"),
    ("lambda_ent", "loss.lambda_ent"),
    ("tau_ratio", "scalars.pseudo_ratio"),
    ("distractor_rate", "stream.distractor_rate"),
];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut out = create_file(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Seed of the held-out stream used by `gen`, `eval` and `sweep`.
pub fn eval_seed(config: &RunConfig) -> u64 {
    derive_seed(config.train.seed, SEED_EVAL_STREAM, 0)
}

pub fn eval_episodes(config: &RunConfig) -> Result<Vec<Episode>> {
    let generator = StreamGenerator::new(config.stream.clone())?;
    Ok(generator.episodes(eval_seed(config), config.eval.episodes))
}

/// Episodes from a JSONL file; second views are synthesized with the
/// configured view noise.
pub fn read_stream(config: &RunConfig, path: &Path) -> Result<Vec<Episode>> {
    let seed = derive_seed(config.train.seed, SEED_FILE_VIEWS, 0);
    Ok(load_episodes(path, config.stream.view_noise, seed)?)
}

/// Freshly initialized parameters and optimizer.
pub fn initial_state(config: &RunConfig) -> Result<TrainState> {
    let mut encoder = config.encoder;
    encoder.seed = derive_seed(config.train.seed, SEED_ENCODER, encoder.seed);
    let params = ParameterSet::init(encoder, config.scalars)?;
    Ok(TrainState::new(params, config.train.adam))
}

pub fn train_setup(config: &RunConfig) -> TrainSetup {
    TrainSetup {
        train: config.train.clone(),
        memory: config.memory,
        loss: config.loss,
    }
}

// ---- gen -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GenOutcome {
    pub path: PathBuf,
    pub summary: StreamSummary,
}

/// Writes `eval.episodes` episodes of the held-out stream as JSONL.
pub fn cmd_gen(config: &RunConfig) -> Result<GenOutcome> {
    let episodes = eval_episodes(config)?;
    create_dir(&config.out)?;
    let path = config.out.join("episodes.jsonl");
    save_episodes(&path, &episodes)?;
    Ok(GenOutcome {
        path,
        summary: StreamSummary::of(&episodes),
    })
}

// ---- train -----------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Train on the episodes of this JSONL file, cycling, instead of the
    /// generated stream.
    pub stream: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn log_row(record: &StepRecord) -> [String; 7] {
    let l = &record.loss;
    [
        record.step.to_string(),
        l.l_self.to_string(),
        l.l_ent.to_string(),
        l.l_new.to_string(),
        l.total.to_string(),
        l.p_new.to_string(),
        record.lr.to_string(),
    ]
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("checkpoint-{step:08}.json"))
}

/// Trains to `train.total_steps`, appending to `train_log.csv`, writing a
/// checkpoint every `train.checkpoint_every` steps and a final
/// `checkpoint.json`.
pub fn cmd_train(
    config: &RunConfig,
    options: &TrainOptions,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let source: Box<dyn EpisodeSource> = match &options.stream {
        Some(path) => Box::new(EpisodeList::new(read_stream(config, path)?)),
        None => Box::new(GeneratedEpisodes::new(
            config.stream.clone(),
            config.train.seed,
        )?),
    };
    let state = match &options.resume {
        Some(path) => {
            let state = checkpoint::load(path)?.into_state();
            let mut expected = config.encoder;
            expected.seed = state.params.encoder.seed;
            if state.params.encoder != expected {
                return Err(CliError::config(format!(
                    "{} was trained with a different encoder",
                    path.display()
                )));
            }
            state
        }
        None => initial_state(config)?,
    };
    create_dir(&config.out)?;
    write_json(
        &config.out.join("config.json"),
        &serde_json::to_value(config)?,
    )?;
    let log = config.out.join("train_log.csv");
    let appending = options.resume.is_some() && log.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&log)
        .map_err(|e| CliError::io(&log, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    if !appending {
        writer.write_record(TRAIN_LOG_HEADER)?;
    }

    let setup = train_setup(config);
    let every = config.train.checkpoint_every;
    // The trainer's callback speaks the core error type; CLI failures are
    // parked here and the run is stopped.
    let mut failure: Option<CliError> = None;
    let mut on_step = |state: &TrainState, record: &StepRecord| -> protostream::Result<()> {
        let result = writer
            .write_record(log_row(record))
            .map_err(CliError::from)
            .and_then(|_| {
                if every > 0 && state.step.is_multiple_of(every) {
                    writer.flush().map_err(|e| CliError::io(&log, e))?;
                    checkpoint::save(
                        &checkpoint_path(&config.out, state.step),
                        &Checkpoint::from_state(config, state),
                    )?;
                }
                Ok(())
            });
        if let Err(e) = result {
            failure = Some(e);
            return Err(Error::invalid("stopped by the training callback"));
        }
        progress(record);
        Ok(())
    };
    let trained = train(source.as_ref(), &setup, state, &mut on_step);
    if let Some(e) = failure {
        return Err(e);
    }
    let state = trained?;
    writer.flush().map_err(|e| CliError::io(&log, e))?;
    let checkpoint = config.out.join("checkpoint.json");
    checkpoint::save(&checkpoint, &Checkpoint::from_state(config, &state))?;
    Ok(TrainOutcome {
        state,
        checkpoint,
        log,
    })
}

// ---- eval ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    /// `None` for whole-stream metrics.
    pub episode: Option<usize>,
    pub protocol: EvalProtocol,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub summary: BTreeMap<String, f64>,
    /// Mean AMI at every threshold when the sweep ran.
    pub alpha_curve: Option<Vec<(f64, f64)>>,
}

fn protocol_name(p: EvalProtocol) -> &'static str {
    match p {
        EvalProtocol::Unsupervised => "unsupervised",
        EvalProtocol::Supervised => "supervised",
        EvalProtocol::Offline => "offline",
    }
}

fn check_dims(params: &ParameterSet, episodes: &[Episode]) -> Result<()> {
    let expected = params.encoder.input_dim;
    if let Some(found) = episodes
        .iter()
        .flatten()
        .map(|f| f.features.len())
        .find(|&d| d != expected)
    {
        return Err(Error::DimensionMismatch { expected, found }.into());
    }
    Ok(())
}

/// (episode, label): labels are only comparable within an episode.
type PooledLabel = (usize, u64);

/// Frames of `episodes` with labels made unique across episodes.
fn pooled(
    embedded: &[EmbeddedEpisode],
    keep: impl Fn(usize) -> bool,
) -> Result<(Vec<Vec<f64>>, Vec<PooledLabel>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (e, ep) in embedded.iter().enumerate() {
        for (t, (z, label)) in ep.embeddings.iter().zip(&ep.labels).enumerate() {
            if keep(t) {
                let label = label.ok_or(Error::MissingLabel {
                    episode: e,
                    frame: t,
                })?;
                x.push(z.clone());
                y.push((e, label));
            }
        }
    }
    Ok((x, y))
}

fn offline_readout(
    config: &RunConfig,
    params: &ParameterSet,
    episodes: &[Episode],
    train_episodes: Option<&[Episode]>,
) -> Result<(f64, LinearReadout)> {
    let test = embed_episodes(params, episodes)?;
    let ((train_x, train_y), (test_x, test_y)) = match train_episodes {
        // labels of separate files are taken to be global
        Some(train_eps) => {
            let train = embed_episodes(params, train_eps)?;
            let (tx, ty) = pooled(&train, |_| true)?;
            let (sx, sy) = pooled(&test, |_| true)?;
            let strip = |v: Vec<(usize, u64)>| v.into_iter().map(|(_, l)| (0, l)).collect();
            ((tx, strip(ty)), (sx, strip(sy)))
        }
        None => (
            pooled(&test, |t| t % 2 == 0)?,
            pooled(&test, |t| t % 2 == 1)?,
        ),
    };
    let mut ids: HashMap<(usize, u64), u64> = HashMap::new();
    let mut dense = |v: &[(usize, u64)]| -> Vec<u64> {
        v.iter()
            .map(|k| {
                let next = ids.len() as u64;
                *ids.entry(*k).or_insert(next)
            })
            .collect()
    };
    let train_ids = dense(&train_y);
    let test_ids = dense(&test_y);
    let k = config.eval.knn_k.min(train_x.len().max(1));
    let knn = knn_readout(&train_x, &train_ids, &test_x, &test_ids, k)?;
    let linear = linear_readout(
        &train_x,
        &train_ids,
        &test_x,
        &test_ids,
        &config.eval.linear,
    )?;
    Ok((knn, linear))
}

/// Scores `params` on `episodes` under `protocol`, one fresh memory per
/// episode.
pub fn evaluate_params(
    config: &RunConfig,
    params: &ParameterSet,
    episodes: &[Episode],
    protocol: EvalProtocol,
    train_episodes: Option<&[Episode]>,
) -> Result<Evaluation> {
    check_dims(params, episodes)?;
    if let Some(t) = train_episodes {
        check_dims(params, t)?;
    }
    let mut out = Evaluation::default();
    let whole = |metric: &str, value: f64| MetricRow {
        episode: None,
        protocol,
        metric: metric.to_string(),
        value,
    };
    match protocol {
        EvalProtocol::Unsupervised | EvalProtocol::Supervised => {
            let mut eval = match protocol {
                EvalProtocol::Unsupervised => EvalConfig::unsupervised(config.train.alpha),
                _ => EvalConfig::supervised(),
            };
            eval.ap_mode = config.eval.ap_mode;
            let report = evaluate(params, episodes, config.memory, &eval)?;
            for ep in &report.episodes {
                for (name, value) in &ep.metrics {
                    out.rows.push(MetricRow {
                        episode: Some(ep.episode),
                        protocol,
                        metric: name.clone(),
                        value: *value,
                    });
                }
            }
            out.summary = report.summary;
            if eval.protocol == Protocol::Unsupervised
                && config.eval.sweep_alpha
                && !episodes.is_empty()
            {
                let embedded = embed_episodes(params, episodes)?;
                let best = ami_max(
                    &embedded,
                    &params.cluster_params(),
                    config.memory,
                    &config.eval.alpha_grid,
                )?;
                out.summary.insert("ami_max".into(), best.ami);
                out.summary.insert("alpha_star".into(), best.alpha);
                out.alpha_curve = Some(best.curve);
            }
        }
        EvalProtocol::Offline => {
            let (knn, linear) = offline_readout(config, params, episodes, train_episodes)?;
            out.summary.insert("knn_accuracy".into(), knn);
            out.summary
                .insert("linear_train_accuracy".into(), linear.train_accuracy);
            out.summary
                .insert("linear_accuracy".into(), linear.test_accuracy);
        }
    }
    for (name, value) in &out.summary {
        out.rows.push(whole(name, *value));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Evaluate on this JSONL stream instead of the generated one.
    pub stream: Option<PathBuf>,
    /// Labeled training split for the offline protocol.
    pub train_stream: Option<PathBuf>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let episode = r
            .episode
            .map_or_else(|| "all".to_string(), |e| e.to_string());
        w.write_record([
            episode.as_str(),
            protocol_name(r.protocol),
            &r.metric,
            &r.value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_embeddings(path: &Path, embedded: &[EmbeddedEpisode]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let dim = embedded
        .iter()
        .find_map(|e| e.embeddings.first())
        .map_or(0, Vec::len);
    let mut header = vec!["episode".to_string(), "frame".into(), "label".into()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for (e, ep) in embedded.iter().enumerate() {
        for (t, (z, label)) in ep.embeddings.iter().zip(&ep.labels).enumerate() {
            let mut row = vec![
                e.to_string(),
                t.to_string(),
                label.map_or_else(String::new, |l| l.to_string()),
            ];
            row.extend(z.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes `metrics.csv`, `summary.json` and optionally `embeddings.csv`.
pub fn cmd_eval(config: &RunConfig, options: &EvalOptions) -> Result<Evaluation> {
    let ckpt = checkpoint::load(&options.checkpoint)?;
    let episodes = match &options.stream {
        Some(path) => read_stream(config, path)?,
        None => eval_episodes(config)?,
    };
    let train_episodes = match &options.train_stream {
        Some(path) => Some(read_stream(config, path)?),
        None => None,
    };
    let protocol = config.eval.protocol;
    let result = evaluate_params(
        config,
        &ckpt.params,
        &episodes,
        protocol,
        train_episodes.as_deref(),
    )?;
    create_dir(&config.out)?;
    write_metrics_csv(&config.out.join("metrics.csv"), &result.rows)?;
    if config.eval.dump_embeddings {
        write_embeddings(
            &config.out.join("embeddings.csv"),
            &embed_episodes(&ckpt.params, &episodes)?,
        )?;
    }
    write_json(
        &config.out.join("summary.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "eval",
            "protocol": protocol,
            "checkpoint": options.checkpoint,
            "checkpoint_step": ckpt.step,
            "episodes": episodes.len(),
            "summary": result.summary,
            "alpha_curve": result.alpha_curve,
        }),
    )?;
    Ok(result)
}

// ---- gradcheck -------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckRun {
    pub stop_prototype_gradient: bool,
    pub report: GradCheckReport,
}

/// Runs the finite-difference check in each requested prototype-gradient
/// mode. `corrupt` is added to every analytic derivative.
pub fn cmd_gradcheck(config: &RunConfig, corrupt: f64) -> Result<Vec<GradCheckRun>> {
    let g = &config.gradcheck;
    let mut stream = config.stream.clone();
    stream.episode_len = g.episode_len;
    stream.num_contexts = stream.num_contexts.min(g.episode_len);
    let tolerance = g.tolerance.unwrap_or(match config.encoder.kind {
        EncoderKind::Identity => 1e-6,
        _ => 1e-4,
    });
    let modes = if g.both_modes {
        vec![false, true]
    } else {
        vec![config.loss.stop_prototype_gradient]
    };
    modes
        .into_iter()
        .map(|stop| {
            let check = GradCheckConfig {
                encoder: config.encoder,
                scalars: config.scalars,
                memory: config.memory,
                loss: protostream::objective::LossConfig {
                    stop_prototype_gradient: stop,
                    ..config.loss
                },
                stream: stream.clone(),
                alpha: config.train.alpha,
                h: g.h,
                episodes: g.episodes,
                max_attempts: g.max_attempts,
                floor: g.floor,
                tolerance,
                seed: config.train.seed,
                corrupt,
            };
            Ok(GradCheckRun {
                stop_prototype_gradient: stop,
                report: grad_check(&check)?,
            })
        })
        .collect()
}

// ---- sweep -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub ami: f64,
    pub ami_max: f64,
    pub alpha_star: f64,
    pub ap: f64,
    /// `ami_max` relative to the first value's.
    pub relative_ami: f64,
}

/// `config` with one sweep parameter set to `value`.
pub fn with_parameter(config: &RunConfig, parameter: &str, value: f64) -> Result<RunConfig> {
    let key = SWEEP_PARAMETERS
        .iter()
        .find(|(name, _)| *name == parameter)
        .map(|(_, key)| *key)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_PARAMETERS.iter().map(|(n, _)| *n).collect();
            CliError::config(format!(
                "unknown sweep parameter {parameter:?}; valid names: {}",
                names.join(", ")
            ))
        })?;
    let json_value = if parameter == "K" {
        if !(value >= 1.0 && value.fract() == 0.0) {
            return Err(CliError::config(format!(
                "K must be a positive integer, got {value}"
            )));
        }
        Value::from(value as u64)
    } else {
        Value::from(value)
    };
    let mut over = json_value;
    for part in key.rsplit('.') {
        over = json!({ part: over });
    }
    let mut doc = serde_json::to_value(config)?;
    merge(&mut doc, &over, "")?;
    let out: RunConfig = serde_json::from_value(doc)?;
    out.validate()?;
    Ok(out)
}

/// Trains from scratch and evaluates once per value; values run in
/// parallel and are reported in the given order.
pub fn run_sweep(config: &RunConfig, parameter: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::config("a sweep needs at least one value"));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| with_parameter(config, parameter, v))
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = configs
        .par_iter()
        .zip(values)
        .map(|(cfg, &value)| -> Result<SweepRow> {
            let source = GeneratedEpisodes::new(cfg.stream.clone(), cfg.train.seed)?;
            let state = train(&source, &train_setup(cfg), initial_state(cfg)?, |_, _| {
                Ok(())
            })?;
            let episodes = eval_episodes(cfg)?;
            let mut cfg = cfg.clone();
            cfg.eval.sweep_alpha = true;
            let unsup = evaluate_params(
                &cfg,
                &state.params,
                &episodes,
                EvalProtocol::Unsupervised,
                None,
            )?;
            let sup = evaluate_params(
                &cfg,
                &state.params,
                &episodes,
                EvalProtocol::Supervised,
                None,
            )?;
            Ok(SweepRow {
                value,
                ami: unsup.summary["ami"],
                ami_max: unsup.summary["ami_max"],
                alpha_star: unsup.summary["alpha_star"],
                ap: sup.summary["ap"],
                relative_ami: f64::NAN,
            })
        })
        .collect::<Result<_>>()?;
    let reference = rows[0].ami_max;
    Ok(rows
        .into_iter()
        .map(|r| SweepRow {
            relative_ami: r.ami_max / reference,
            ..r
        })
        .collect())
}

/// Runs the sweep and writes `sweep_<parameter>.csv` plus a JSON summary.
pub fn cmd_sweep(config: &RunConfig, parameter: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(config, parameter, values)?;
    create_dir(&config.out)?;
    let path = config.out.join(format!("sweep_{parameter}.csv"));
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record(SWEEP_HEADER)?;
    for r in &rows {
        w.write_record([
            parameter.to_string(),
            r.value.to_string(),
            r.ami.to_string(),
            r.ami_max.to_string(),
            r.alpha_star.to_string(),
            r.ap.to_string(),
            r.relative_ami.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_json(
        &config.out.join(format!("sweep_{parameter}.json")),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "sweep",
            "parameter": parameter,
            "rows": rows,
        }),
    )?;
    Ok(rows)
}
