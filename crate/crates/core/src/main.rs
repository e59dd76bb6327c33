//! `ntnlab` command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ntnlab::config::ExperimentConfig;
use ntnlab::env::{PenaltyWeights, Scenario};
use ntnlab::error::{Error, Result};
use ntnlab::gail::PolicyNet;
use ntnlab::harness::{self, ActionSource, Method};
use ntnlab::nn;
use ntnlab::woa::{self, WoaConfig};

#[derive(Parser)]
#[command(name = "ntnlab", version, about = "LEO beam/spectrum allocation laboratory")]
struct Cli {
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learner and write curves, round logs, and checkpoints.
    Train {
        /// "gail" or "ppo".
        #[arg(long)]
        method: String,
        /// Episode-count override.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate a method with online-execution semantics.
    Eval {
        /// "gail", "ppo", "expert", or "fairness".
        #[arg(long)]
        method: String,
        /// Checkpoint directory holding per-agent policies (trained methods).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Run the configured sweep grid over seeds and methods.
    Sweep {
        /// Sweep-axis override: "bandwidth", "power", or "altitude".
        #[arg(long)]
        axis: Option<String>,
    },
    /// Generate an expert demonstration file.
    DemoGen {
        /// Minimum number of state-action records.
        #[arg(long, default_value_t = 2000)]
        records: usize,
        #[arg(long)]
        pop: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        /// Output file path.
        #[arg(long, name = "FILE")]
        file: Option<PathBuf>,
    },
    /// Solve a standalone matching instance file.
    Match {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Write per-slot association snapshots.
    Snapshot {
        #[arg(long, default_value_t = 2)]
        slots: usize,
    },
    /// Trace per-RUE allocation fractions against distance.
    Trace {
        /// "expert", "fairness", "gail", or "ppo".
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 10)]
        slots: usize,
        /// Checkpoint directory for trained methods.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    Ok(cfg)
}

fn penalties(cfg: &ExperimentConfig) -> PenaltyWeights {
    PenaltyWeights {
        c1: cfg.learning.penalty_c1,
        c2: cfg.learning.penalty_c2,
        c8: cfg.learning.penalty_c8,
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn save_policies(dir: &Path, method: Method, policies: &[PolicyNet]) -> Result<()> {
    for (i, p) in policies.iter().enumerate() {
        nn::save_params(&dir.join(format!("{}_agent{i}_policy.bin", method.name())), p.net())?;
    }
    Ok(())
}

fn load_policies(dir: &Path, method: Method, scenario: &Scenario) -> Result<Vec<PolicyNet>> {
    (0..scenario.num_agents())
        .map(|i| {
            let path = dir.join(format!("{}_agent{i}_policy.bin", method.name()));
            let net = nn::load_params(&path)?;
            PolicyNet::from_net(net, scenario.action_dim())
        })
        .collect()
}

fn write_round_logs(path: &Path, logs: &[ntnlab::federated::FederationRoundLog]) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::from("round,weights,pre_hash,post_hash\n");
    for log in logs {
        let weights: Vec<String> = log.weights.iter().map(|w| format!("{w:.6}")).collect();
        let pre: Vec<String> = log.pre_hash.iter().map(|h| format!("{h:016x}")).collect();
        let post: Vec<String> = log.post_hash.iter().map(|h| format!("{h:016x}")).collect();
        let _ = writeln!(
            text,
            "{},{},{},{}",
            log.round,
            weights.join(";"),
            pre.join(";"),
            post.join(";")
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    ensure_out(&cli.out)?;
    let seed = cfg.scenario.seed;

    match &cli.command {
        Command::Train { method, episodes } => {
            if let Some(e) = episodes {
                cfg.learning.episodes = *e;
            }
            let method = Method::parse(method)?;
            let model = match method {
                Method::Gail => {
                    let xe = harness::make_expert_memory(&cfg, seed)?;
                    harness::train_gail(&cfg, seed, &xe)?
                }
                Method::Ppo => harness::train_ppo(&cfg, seed)?,
                other => {
                    return Err(Error::Config(format!(
                        "method '{}' has nothing to train",
                        other.name()
                    )))
                }
            };
            harness::write_curves(
                &cli.out.join(format!("curves_{}_seed{seed}.csv", method.name())),
                &model.rows,
            )?;
            write_round_logs(
                &cli.out.join(format!("rounds_{}_seed{seed}.csv", method.name())),
                &model.round_logs,
            )?;
            save_policies(&cli.out, method, &model.policies)?;
            println!(
                "trained {} for {} episodes; outputs in {}",
                method.name(),
                model.rows.len(),
                cli.out.display()
            );
        }
        Command::Eval { method, checkpoint_dir } => {
            let method = Method::parse(method)?;
            let scenario = Scenario::from_experiment(&cfg)?;
            let stats = match method {
                Method::Fairness => harness::evaluate(
                    &scenario,
                    &ActionSource::Fairness,
                    cfg.learning.eval_episodes.max(1),
                    seed,
                    &penalties(&cfg),
                )?,
                Method::Expert => harness::evaluate(
                    &scenario,
                    &ActionSource::Expert(WoaConfig::from(&cfg.woa)),
                    cfg.learning.eval_episodes.max(1),
                    seed,
                    &penalties(&cfg),
                )?,
                trained => {
                    let dir = checkpoint_dir.clone().unwrap_or_else(|| cli.out.clone());
                    let policies = load_policies(&dir, trained, &scenario)?;
                    harness::evaluate(
                        &scenario,
                        &ActionSource::Policies(&policies),
                        cfg.learning.eval_episodes.max(1),
                        seed,
                        &penalties(&cfg),
                    )?
                }
            };
            let text = format!(
                "method,mean_se,mean_reward,c1_rate,c2_rate,c8_rate\n{},{:.12e},{:.12e},{:.6},{:.6},{:.6}\n",
                method.name(),
                stats.mean_se,
                stats.mean_reward,
                stats.c1_rate,
                stats.c2_rate,
                stats.c8_rate
            );
            let path = cli.out.join(format!("eval_{}_seed{seed}.csv", method.name()));
            std::fs::write(&path, &text).map_err(|e| Error::io(path.display().to_string(), e))?;
            print!("{text}");
        }
        Command::Sweep { axis } => {
            if let Some(a) = axis {
                cfg.sweep.axis = a.clone();
                cfg.validate()?;
            }
            let rows = harness::run_sweep(&cfg, &cli.out)?;
            println!(
                "sweep over {} wrote {} rows to {}",
                cfg.sweep.axis,
                rows.len(),
                cli.out.display()
            );
        }
        Command::DemoGen { records, pop, iters, file } => {
            let mut woa_cfg = WoaConfig::from(&cfg.woa);
            if let Some(p) = pop {
                woa_cfg.population = *p;
            }
            if let Some(i) = iters {
                woa_cfg.iterations = *i;
            }
            let scenario = Scenario::from_experiment(&cfg)?;
            let demos = woa::generate_demonstrations(
                &scenario,
                *records,
                &woa_cfg,
                seed,
                cfg.scenario_hash(),
            )?;
            let path = file.clone().unwrap_or_else(|| cli.out.join("demos.bin"));
            woa::save_demos(&path, &demos)?;
            println!("wrote {} records to {}", demos.records.len(), path.display());
        }
        Command::Match { instance } => {
            let text = std::fs::read_to_string(instance)
                .map_err(|e| Error::io(instance.display().to_string(), e))?;
            let parsed: harness::MatchingInstance =
                toml::from_str(&text).map_err(|e| Error::Format {
                    path: instance.display().to_string(),
                    reason: e.to_string(),
                })?;
            let report = harness::solve_matching_instance(&parsed)?;
            let path = cli.out.join("matching.txt");
            std::fs::write(&path, &report).map_err(|e| Error::io(path.display().to_string(), e))?;
            print!("{report}");
        }
        Command::Snapshot { slots } => {
            let paths = harness::snapshot_association(&cfg, *slots, seed, &cli.out)?;
            println!("wrote {} snapshots to {}", paths.len(), cli.out.display());
        }
        Command::Trace { method, slots, checkpoint_dir } => {
            let method = Method::parse(method)?;
            let scenario = Scenario::from_experiment(&cfg)?;
            let policies;
            let source = match method {
                Method::Fairness => ActionSource::Fairness,
                Method::Expert => ActionSource::Expert(WoaConfig::from(&cfg.woa)),
                trained => {
                    let dir = checkpoint_dir.clone().unwrap_or_else(|| cli.out.clone());
                    policies = load_policies(&dir, trained, &scenario)?;
                    ActionSource::Policies(&policies)
                }
            };
            let rows = harness::trace_allocations(&scenario, &source, *slots, seed)?;
            let path = cli.out.join(format!("trace_{}_seed{seed}.csv", method.name()));
            harness::write_trace(&path, &rows)?;
            println!("wrote {} trace rows to {}", rows.len(), path.display());
        }
    }
    Ok(())
}
