//! `hitld`: demo generation, training, evaluation, scripted studies and the
//! live server.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hitld::config::{ConfigError, RunConfig};
use hitld::control::{derive_seed, ControlMode};
use hitld::demo::{scripted_expert, DemoDataset, DemoError};
use hitld::policy::{train_with_progress, PolicyError, TrainedPolicy};
use hitld::sim::TaskId;
use hitld::study::{evaluate, run_study, StudyError, StudyPlan};
use hitld_server::{run_blocking, SessionError, SessionFactory};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "hitld", version, about = "Shared-control teleoperation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random stream of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record one scripted expert demonstration.
    DemoGen {
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a demonstration file.
    DemoInfo {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train an orientation policy on a demonstration file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print the mean loss every this many epochs.
        #[arg(long, default_value_t = 0)]
        log_every: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Orientation error of a policy on a freshly rendered held-out demo.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Scripted study over tasks x modes x trials.
    Study {
        /// Comma separated task names, or "all".
        #[arg(long, default_value = "all")]
        tasks: String,
        /// Comma separated modes.
        #[arg(long, default_value = "hitl_d,cartesian")]
        modes: String,
        /// Overrides `trials` from the config.
        #[arg(long)]
        trials: Option<usize>,
        /// Use this persona in every mode instead of the per-mode default.
        #[arg(long)]
        persona: Option<String>,
        /// Directory with `<task>.json` checkpoints. Missing ones are trained
        /// from a scripted demo and written to the output directory.
        #[arg(long)]
        policies: Option<PathBuf>,
        #[arg(long, default_value = "study_out")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the live WebSocket server.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "shape_match")]
        task: TaskId,
        #[arg(long, default_value = "hitl_d")]
        mode: ControlMode,
        /// Checkpoint for the task; required in hitl_d mode.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_list<T: std::str::FromStr<Err = String>>(s: &str, all: &[T]) -> Result<Vec<T>, CliError>
where
    T: Copy,
{
    if s == "all" {
        return Ok(all.to_vec());
    }
    s.split(',').map(|x| x.trim().parse::<T>().map_err(CliError::Usage)).collect()
}

fn load_policy(path: &Path) -> Result<TrainedPolicy, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("policy file {} does not exist", path.display())));
    }
    Ok(TrainedPolicy::load(path)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::DemoGen { task, out, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let spec = cfg.task_spec(task);
            let ds = scripted_expert(&spec, common.seed, &cfg.perception(&spec))?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{task}.hitldemo")));
            ds.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&ds.summary()).expect("summary serializes"));
            eprintln!("wrote {}", out.display());
        }
        Command::DemoInfo { path, common: _ } => {
            let ds = DemoDataset::load(&path)?;
            println!("{}", serde_json::to_string_pretty(&ds.summary()).expect("summary serializes"));
        }
        Command::Train { data, out, log_every, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let ds = DemoDataset::load(&data)?;
            if let Some(task) = ds.metadata.task {
                let expected = cfg.perception(&cfg.task_spec(task));
                if expected.hash() != ds.metadata.perception.hash() {
                    return Err(CliError::Usage(format!(
                        "dataset perception settings differ from the config (point budget {} vs {})",
                        ds.metadata.perception.point_budget, expected.point_budget
                    )));
                }
            }
            let policy = train_with_progress(&ds, &cfg.policy_config(common.seed), |epoch, loss| {
                if log_every > 0 && (epoch + 1) % log_every == 0 {
                    eprintln!("epoch {:>5} loss {loss:.5}", epoch + 1);
                }
            })?;
            policy.save(&out)?;
            eprintln!("wrote {} (final loss {:.5}, config {})", out.display(), policy.final_loss(), policy.config_hash());
        }
        Command::Eval { policy, task, out, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let policy = load_policy(&policy)?;
            let spec = cfg.task_spec(task);
            // a different seed than training renders fresh clouds
            let held = scripted_expert(&spec, derive_seed(common.seed, 1, 13), &cfg.perception(&spec))?;
            let report = evaluate(&policy, &held, common.seed)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(p) => std::fs::write(&p, &text).map_err(io_err(&p))?,
                None => println!("{text}"),
            }
        }
        Command::Study { tasks, modes, trials, persona, policies, out, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let tasks = parse_list(&tasks, &TaskId::ALL)?;
            let modes = parse_list(&modes, &ControlMode::ALL)?;
            if let Some(p) = &persona {
                cfg.persona(p)?;
            }
            let plan = StudyPlan { tasks: tasks.clone(), modes: modes.clone(), persona, trials: trials.unwrap_or(cfg.trials), seed: common.seed };
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let mut loaded = BTreeMap::new();
            if modes.contains(&ControlMode::HitlD) {
                for &task in &tasks {
                    let given = policies.as_ref().map(|d| d.join(format!("{task}.json")));
                    let policy = match given {
                        Some(p) if p.exists() => TrainedPolicy::load(&p)?,
                        _ => {
                            eprintln!("training {task} policy");
                            let spec = cfg.task_spec(task);
                            let ds = scripted_expert(&spec, common.seed, &cfg.perception(&spec))?;
                            let p = hitld::policy::train(&ds, &cfg.policy_config(common.seed))?;
                            p.save(&out.join(format!("{task}.json")))?;
                            p
                        }
                    };
                    loaded.insert(task, policy);
                }
            }
            let result = run_study(&plan, &cfg, &loaded)?;
            result.write(&out)?;
            print!("{}", result.table());
            eprintln!("wrote {}", out.display());
        }
        Command::Serve { port, host, task, mode, policy, common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let mut policies = BTreeMap::new();
            match (mode, policy) {
                (_, Some(p)) => {
                    policies.insert(task, load_policy(&p)?);
                }
                (ControlMode::HitlD, None) => return Err(CliError::Usage("hitl_d mode needs --policy".into())),
                _ => {}
            }
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
            let factory = SessionFactory { run: cfg, task, mode, seed: common.seed, policies };
            // fail fast on a bad policy before binding
            factory.open("check".into())?;
            run_blocking(addr, factory).map_err(|source| CliError::Io { path: PathBuf::from(addr.to_string()), source })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
