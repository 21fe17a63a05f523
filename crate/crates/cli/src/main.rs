use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hausr::config::ExperimentConfig;
use hausr::pipeline;
use hausr::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "hausr", version, about = "Goal-conditioned navigation with universal successor features")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the number of training workers.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// One-hot state inputs instead of rendered frames.
    #[arg(long, global = true)]
    tabular: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record random-policy transitions for every training goal.
    Collect,
    /// Fit the representation and reward networks on the collected transitions.
    Pretrain,
    /// Train the agent with asynchronous workers.
    Train,
    /// Measure success rates on training and held-out goals.
    Eval,
    /// Fine-tune on a novel goal and record the learning curve.
    Transfer {
        /// Goal pose "x,y,H"; defaults to the config, then to the weakest held-out goal.
        #[arg(long)]
        goal: Option<String>,
    },
}

fn load_config(cli: &Cli) -> hausr::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w;
    }
    cfg.tabular |= cli.tabular;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> hausr::Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    match &cli.command {
        Command::Collect => {
            let p = pipeline::cmd_collect(&cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Pretrain => {
            let r = pipeline::cmd_pretrain(&cfg)?;
            let joint = r[..cfg.pretrain.steps.min(r.len())].last();
            if let (Some(j), Some(last)) = (joint, r.last()) {
                println!("pretrain: {} steps, final L_phi {:.6}, L_omega {:.6}", r.len(), j.loss.total, last.omega);
            }
        }
        Command::Train => {
            let out = pipeline::cmd_train(&cfg)?;
            println!("train: {} updates", out.agent.version());
        }
        Command::Eval => {
            let rep = pipeline::cmd_eval(&cfg)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            println!(
                "eval: trained {}, held-out {}",
                fmt(rep.mean_rate(true)),
                fmt(rep.mean_rate(false))
            );
        }
        Command::Transfer { goal } => {
            let r = pipeline::cmd_transfer(&cfg, goal.as_deref())?;
            print!("transfer to goal {}: fine-tuned {:.3}", r.goal, r.finetuned.final_rate());
            if let Some(b) = &r.baseline {
                print!(", scratch {:.3}", b.final_rate());
            }
            println!();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Map(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
