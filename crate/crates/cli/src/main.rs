use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sacadrl::config::ECHO_FILE;
use sacadrl::eval::{mirrored_test_set, run_test_set, write_metrics_csv, MetricsReport};
use sacadrl::sim::{random_test_case, read_cases, save_trajectories, write_cases, TestCase};
use sacadrl::training::{train, Output};
use sacadrl::{Error, PolicyConfig, Result, RunConfig, ValueNetwork, ValuePolicy};

#[derive(Parser)]
#[command(
    name = "sacadrl",
    version,
    about = "Socially aware multiagent collision avoidance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random test cases.
    GenCases {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose [sim] section sets the arena and sampling ranges.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a value network.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rollout threads; 1 is bit-reproducible.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Roll out a checkpoint on a case file and write the trajectories.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the config.toml next to the checkpoint, if any.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate one or more checkpoints and write a metrics table.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append the x-axis reflection of every case.
        #[arg(long)]
        mirror: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Defaults to the config.toml next to each checkpoint, if any.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write all trajectories here.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Print a summary of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "config" => 2,
        "data" => 3,
        _ => 4,
    }
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

/// The explicit config, else the one echoed beside the checkpoint, else
/// defaults.
fn config_for(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let beside = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(ECHO_FILE);
    if beside.is_file() {
        RunConfig::load(beside)
    } else {
        Ok(RunConfig::default())
    }
}

fn check_arity(net: &ValueNetwork, cases: &[TestCase]) -> Result<()> {
    match cases.iter().map(|c| c.agents.len()).max() {
        Some(n) if n > net.n_agents() => Err(Error::Arity {
            expected: net.n_agents(),
            actual: n,
        }),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn method_name(path: &Path, cfg: &RunConfig) -> String {
    let side = match cfg.rewards.side {
        sacadrl::NormRuleSide::None => "none",
        sacadrl::NormRuleSide::LeftHanded => "lh",
        sacadrl::NormRuleSide::RightHanded => "rh",
    };
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("net");
    format!("{stem}-{side}").replace(',', "_")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCases {
            count,
            agents,
            seed,
            out,
            config,
        } => {
            let cfg = config.map(RunConfig::load).transpose()?.unwrap_or_default();
            if agents == 0 {
                return Err(Error::Config("--agents must be >= 1".into()));
            }
            let cases = (0..count as u64)
                .map(|k| random_test_case(agents, seed.wrapping_add(k), &cfg.sim))
                .collect::<Result<Vec<_>>>()?;
            write_cases(&out, &cases)
        }
        Command::Train {
            config,
            out,
            workers,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(w) = workers {
                cfg.training.workers = w;
            }
            cfg.setup().validate()?;
            create_dir(&out)?;
            cfg.echo(&out)?;
            let report = train(&cfg.setup(), Some(&Output { dir: &out }))?;
            if let Some(v) = report.log.iter().rev().find_map(|r| r.validation.as_ref()) {
                println!(
                    "episodes {} success {:.3} correct_side {:.3} collisions {:.3}",
                    report.log.len(),
                    v.success_rate,
                    v.correct_side_rate,
                    v.collision_rate
                );
            }
            Ok(())
        }
        Command::Rollout {
            checkpoint,
            cases,
            out,
            epsilon,
            seed,
            config,
        } => {
            let cfg = config_for(&checkpoint, config.as_deref())?;
            let net = ValueNetwork::load(&checkpoint)?;
            let cases = read_cases(&cases)?;
            check_arity(&net, &cases)?;
            let policy_cfg = PolicyConfig {
                epsilon,
                ..cfg.policy.clone()
            };
            policy_cfg.validate()?;
            let policy = ValuePolicy::new(&net, policy_cfg, cfg.rewards);
            let trajs = run_test_set(&policy, &cases, &cfg.sim, seed, 1)?;
            save_trajectories(&out, &trajs)
        }
        Command::Eval {
            checkpoint,
            cases,
            out,
            mirror,
            seed,
            workers,
            config,
            trajectories,
        } => {
            let mut cases = read_cases(&cases)?;
            if mirror {
                cases = mirrored_test_set(&cases);
            }
            let mut reports = Vec::new();
            let mut all = Vec::new();
            for path in &checkpoint {
                let cfg = config_for(path, config.as_deref())?;
                let net = ValueNetwork::load(path)?;
                check_arity(&net, &cases)?;
                let policy = ValuePolicy::new(
                    &net,
                    PolicyConfig {
                        epsilon: 0.0,
                        ..cfg.policy.clone()
                    },
                    cfg.rewards,
                );
                let trajs = run_test_set(&policy, &cases, &cfg.sim, seed, workers.max(1))?;
                reports.push(MetricsReport::from_trajectories(
                    &method_name(path, &cfg),
                    &trajs,
                ));
                all.extend(trajs);
            }
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &reports)?;
            fs::write(&out, &buf).map_err(|e| Error::io(&out, e))?;
            if let Some(t) = trajectories {
                save_trajectories(&t, &all)?;
            }
            print!("{}", String::from_utf8_lossy(&buf));
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let net = ValueNetwork::load(&checkpoint)?;
            println!("{}", net.summary());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            report("config", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}
