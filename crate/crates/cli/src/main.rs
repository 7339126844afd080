use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use thoughtctl::harness::{self, HarnessError, RunConfig};

#[derive(Parser)]
#[command(
    name = "thoughtctl",
    version,
    about = "Train and evaluate a thought-vector controlled transformer on synthetic arithmetic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a grid-balanced synthetic dataset as JSON lines.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the even-id split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; falls back to `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate under each problem's control signal and score the outputs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the nine ablation rows from one base config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PCA, effective rank, activation statistics and mutual information exports.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run config as TOML.
    DefaultConfig,
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| HarnessError::Usage("no --out given and the config has no out_dir".into()))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { n, seed, out } => {
            let problems = harness::cmd_gen_data(n, seed, &out)?;
            println!("wrote {} problems to {}", problems.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, &cfg)?;
            let o = harness::cmd_train(&cfg, &data, &out, resume.as_deref())?;
            if let Some(last) = o.log.steps.last() {
                println!(
                    "step {} ce {:.4} entropy {:.4} grad_norm {:.4}",
                    last.step, last.ce, last.entropy_mean, last.grad_norm
                );
            }
            println!("checkpoint at step {} in {}", o.state.step(), out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let o = harness::cmd_eval(&ckpt, &data, &out)?;
            let r = &o.report;
            println!(
                "n {} acc {:.4} ctrl {:.4} depth {:.4} length {:.4} path {:.4} entropy {:.4}±{:.4} avg_len {:.1}",
                r.n_problems,
                r.accuracy,
                r.controllability,
                r.depth_match,
                r.length_match,
                r.path_match,
                r.entropy_mean,
                r.entropy_std,
                r.avg_length
            );
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, &cfg)?;
            let table = harness::cmd_ablate(&cfg, &out)?;
            print!("{}", table.markdown());
            if table.failed() > 0 {
                eprintln!("{} ablation row(s) failed", table.failed());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Analyze { ckpt, data, out } => {
            let [sel, comb] = harness::cmd_analyze(&ckpt, &data, &out)?;
            println!("{}", serde_json::to_string_pretty(&sel)?);
            println!("{}", serde_json::to_string_pretty(&comb)?);
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<HarnessError>() {
                Some(HarnessError::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
