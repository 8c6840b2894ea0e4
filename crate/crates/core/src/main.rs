use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hilearn::cli::{cmd_eval, cmd_gen_demos, cmd_label, cmd_pipeline, cmd_train, CliError};
use hilearn::config::{ModeName, RunConfig};
use hilearn::simworld::Family;

#[derive(Parser)]
#[command(name = "hilearn", version, about = "Learn hierarchical policies from unlabeled pose demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations with ground-truth labels.
    GenDemos(Common),
    /// Infer sub-task labels with the priors or a trained checkpoint.
    Label(Common),
    /// Train a policy stack on labeled demonstrations.
    Train(Common),
    /// Roll out a checkpoint in the simulator.
    Eval(Common),
    /// Generate, label, train, evaluate and write a manifest.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Number of demonstrations to generate.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// Exact Viterbi search.
    #[arg(long, conflicts_with = "beam")]
    exact: bool,
    /// Beam search with this width.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    beam: Option<u64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::ALL
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
            format!("unknown family '{s}', expected one of {}", names.join(", "))
        })
}

fn build_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.demos {
        cfg.paths.demos = Some(p.clone());
    }
    if let Some(p) = &c.checkpoint {
        cfg.paths.checkpoint = Some(p.clone());
    }
    if let Some(e) = c.episodes {
        cfg.eval.episodes = e;
    }
    if let Some(n) = c.count {
        cfg.task.demos = n;
    }
    if let Some(f) = c.family {
        cfg.task.family = f;
    }
    if c.exact {
        cfg.inference.mode = ModeName::Exact;
    }
    if let Some(b) = c.beam {
        cfg.inference.mode = ModeName::Beam;
        cfg.inference.beam = b as usize;
    }
    if let Some(s) = c.stride {
        cfg.inference.stride = s;
    }
    if let Some(p) = &c.out {
        cfg.paths.out = Some(p.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDemos(c) => {
            let s = cmd_gen_demos(&build_config(&c)?)?;
            println!(
                "wrote {} demonstrations, mean length {:.1}, all successful: {}",
                s.files.len(),
                s.mean_len,
                s.all_success
            );
        }
        Command::Label(c) => {
            let files = cmd_label(&build_config(&c)?)?;
            println!("labeled {} demonstrations", files.len());
        }
        Command::Train(c) => {
            let ckpt = cmd_train(&build_config(&c)?)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Eval(c) => {
            let r = cmd_eval(&build_config(&c)?)?;
            println!(
                "success {:.3} ± {:.3}, mean length {:.1}",
                r.mean_success, r.std_success, r.mean_len
            );
        }
        Command::Pipeline(c) => {
            let out = cmd_pipeline(&build_config(&c)?)?;
            for it in &out.em.iterations {
                println!("em iteration {}: {:.4} of frame labels changed", it.outer, it.change_fraction);
            }
            println!(
                "success {:.3} ± {:.3}, mean length {:.1}",
                out.report.mean_success, out.report.std_success, out.report.mean_len
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
