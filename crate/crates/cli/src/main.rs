use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use safereach::environments::EnvKind;
use safereach::experiment::{run_suite, solver_comparison, ExperimentConfig};
use safereach::report::{emit_report, emit_solver_comparison, fmt_num, render_table};

mod replay;

#[derive(Parser, Debug)]
#[command(name = "safereach", version, about = "Contact-allowed reaching experiments")]
struct Cli {
    /// Worker threads for episode-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (environment, method, seed) triple and write the report.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare solver variants by their mean cost decrease.
    CompareSolvers {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a trajectory CSV written by `run`.
    Replay {
        trajectory: PathBuf,
        /// Rebuild this environment to report goal distance and clearance.
        #[arg(long, value_enum, requires = "seed")]
        env: Option<EnvArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Config whose `[env]` table built the environment.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the full default configuration as TOML.
    DefaultConfig,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EnvArg {
    FreeSpace,
    Ball,
    Wall,
}

impl From<EnvArg> for EnvKind {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::FreeSpace => EnvKind::FreeSpace,
            EnvArg::Ball => EnvKind::Ball,
            EnvArg::Wall => EnvKind::Wall,
        }
    }
}

fn load(path: &PathBuf, common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.offset_seeds(common.seed_offset);
    let out = common.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    // The resolved config sits next to its outputs so a run can be repeated verbatim.
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok((cfg, out))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global().context("configuring worker pool")?;
    }
    match cli.command {
        Command::Run { config, common } => {
            let (cfg, out) = load(&config, &common)?;
            let table = run_suite(&cfg)?;
            emit_report(&table, &out)?;
            print!("{}", render_table(&table));
            eprintln!("wrote {} episodes to {}", table.records.len(), out.display());
        }
        Command::CompareSolvers { config, common } => {
            let (cfg, out) = load(&config, &common)?;
            let cmp = solver_comparison(&cfg)?;
            emit_solver_comparison(&cmp, &out)?;
            println!("variant,mean_decrease,std_decrease,mean_step_ms");
            for s in &cmp.summary {
                println!(
                    "{},{},{},{}",
                    s.variant.name(),
                    fmt_num(s.mean_decrease),
                    fmt_num(s.std_decrease),
                    fmt_num(s.mean_seconds_per_step * 1e3)
                );
            }
            eprintln!("wrote solver comparison to {}", out.display());
        }
        Command::Replay { trajectory, env, seed, config } => {
            let env_cfg = match &config {
                Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?.env,
                None => ExperimentConfig::default().env,
            };
            let target = env.zip(seed).map(|(k, s)| (EnvKind::from(k), s));
            let summary = replay::summarize(&trajectory, target, &env_cfg)?;
            print!("{summary}");
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}
