use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protostream_cli::checkpoint;
use protostream_cli::commands::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_sweep, cmd_train, EvalOptions, TrainOptions,
};
use protostream_cli::config::{resolve, resolve_with_base, ConfigSources, EvalProtocol};
use protostream_cli::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "protostream",
    version,
    about = "Online prototype memory: streams, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config: {"profile": NAME, ...overrides}
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "NAME")]
    profile: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dotted override, e.g. memory.capacity=75; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the evaluation stream as JSONL and print its statistics
    Gen,
    /// Train, logging every step and checkpointing periodically
    Train {
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Train on a JSONL stream instead of the generated one
        #[arg(long, value_name = "PATH")]
        stream: Option<PathBuf>,
    },
    /// Evaluate a checkpoint
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        stream: Option<PathBuf>,
        /// Labeled training split for --protocol offline
        #[arg(long, value_name = "PATH")]
        train_stream: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Option<EvalProtocol>,
        /// Report AMI maximized over the threshold grid
        #[arg(long)]
        sweep_alpha: bool,
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        /// Offset added to every analytic derivative (harness self-test)
        #[arg(long, default_value_t = 0.0, hide = true)]
        corrupt: f64,
    },
    /// Train and evaluate once per value of one parameter
    Sweep {
        /// One of K, rho, alpha, mu, lambda_new, lambda_ent, tau_ratio, distractor_rate
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let sources = ConfigSources {
        file: cli.config,
        profile: cli.profile,
        sets: cli.sets,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Gen => {
            let config = resolve(&sources)?;
            let out = cmd_gen(&config)?;
            let s = &out.summary;
            println!("wrote {}", out.path.display());
            println!(
                "episodes {} frames {} classes/episode {:.3} distinct labels {} lag-1 same-class {:.4} marginal {:.4}",
                s.episodes, s.frames, s.mean_classes, s.distinct_labels, s.lag1_same_rate, s.marginal_same_rate
            );
        }
        Command::Train { resume, stream } => {
            let config = resolve(&sources)?;
            let every = (config.train.total_steps / 20).max(1);
            let out = cmd_train(&config, &TrainOptions { resume, stream }, |r| {
                if (r.step + 1) % every == 0 {
                    eprintln!(
                        "step {} total {:.5} p_new {:.4} lr {:e}",
                        r.step + 1,
                        r.loss.total,
                        r.loss.p_new,
                        r.lr
                    );
                }
            })?;
            println!(
                "trained to step {}; wrote {} and {}",
                out.state.step,
                out.checkpoint.display(),
                out.log.display()
            );
        }
        Command::Eval {
            checkpoint: path,
            stream,
            train_stream,
            protocol,
            sweep_alpha,
            dump_embeddings,
        } => {
            let echoed = checkpoint::load(&path)?.config;
            let mut config = resolve_with_base(Some(&echoed), &sources)?;
            if let Some(p) = protocol {
                config.eval.protocol = p;
            }
            config.eval.sweep_alpha |= sweep_alpha;
            config.eval.dump_embeddings |= dump_embeddings;
            let result = cmd_eval(
                &config,
                &EvalOptions {
                    checkpoint: path,
                    stream,
                    train_stream,
                },
            )?;
            for (name, value) in &result.summary {
                println!("{name} {value}");
            }
        }
        Command::Gradcheck { corrupt } => {
            let config = resolve(&sources)?;
            let runs = cmd_gradcheck(&config, corrupt)?;
            let mut worst: Option<(f64, f64)> = None;
            for run in &runs {
                let r = &run.report;
                let mode = if run.stop_prototype_gradient {
                    "stop"
                } else {
                    "full"
                };
                for g in &r.groups {
                    println!(
                        "mode={mode} group={} coords={} max_rel={:e} max_abs={:e}",
                        g.group, g.coords, g.max_rel, g.max_abs
                    );
                }
                println!(
                    "mode={mode} episodes={} resampled={} max_rel={:e} tolerance={:e} {}",
                    r.episodes_checked,
                    r.resampled,
                    r.max_rel,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                if !r.passed && worst.is_none_or(|(m, _)| r.max_rel > m) {
                    worst = Some((r.max_rel, r.tolerance));
                }
            }
            if let Some((max_rel, tolerance)) = worst {
                return Err(CliError::GradCheckFailed { max_rel, tolerance });
            }
        }
        Command::Sweep { param, values } => {
            let config = resolve(&sources)?;
            let rows = cmd_sweep(&config, &param, &values)?;
            println!("{param} ami ami_max alpha_star ap relative_ami");
            for r in rows {
                println!(
                    "{} {:.4} {:.4} {:.4} {:.4} {:.4}",
                    r.value, r.ami, r.ami_max, r.alpha_star, r.ap, r.relative_ami
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
