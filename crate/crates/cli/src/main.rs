use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use labelaux_cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_strip, cmd_train, exit_code, resolve, StripOutcome, TrainMode,
};

#[derive(Parser)]
#[command(
    name = "labelaux",
    version,
    about = "Label-guided auxiliary training for a desk-scale 3D detector"
)]
struct Cli {
    /// JSON config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    outdir: PathBuf,
    /// Data seed for gen-data, training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `--set train.aux_weight=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Stage1,
    Stage2,
    OneStage,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        /// Overwrite a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one training mode.
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Upstream checkpoint for stage1/stage2 (defaults to the previous
        /// mode's checkpoint in --outdir).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's deployed model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Run the configured ablation grid.
    Ablate {
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Remove the auxiliary branch from a checkpoint.
    Strip { input: PathBuf, output: PathBuf },
}

fn run(cli: Cli) -> labelaux::Result<()> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        let key = match cli.command {
            Command::GenData { .. } => "data_seed",
            _ => "train.seed",
        };
        overrides.push(format!("{key}={seed}"));
    }
    overrides.extend(cli.overrides);
    let cfg = resolve(cli.config.as_deref(), &overrides)?;
    let out = &cli.outdir;
    match cli.command {
        Command::GenData { force } => {
            let dir = cmd_gen_data(&cfg, out, force)?;
            println!("{}", dir.display());
        }
        Command::Train { mode, checkpoint } => {
            let mode = match mode {
                ModeArg::Baseline => TrainMode::Baseline,
                ModeArg::Stage1 => TrainMode::Stage1,
                ModeArg::Stage2 => TrainMode::Stage2,
                ModeArg::OneStage => TrainMode::OneStage,
            };
            let m = cmd_train(&cfg, out, mode, checkpoint.as_deref())?;
            println!("{} val mAP@0.25 {:.4} mAP@0.50 {:.4}", mode.name(), m.map25, m.map50);
        }
        Command::Eval { checkpoint, split } => {
            let m = cmd_eval(&cfg, out, &checkpoint, &split)?;
            println!("{split} mAP@0.25 {:.4} mAP@0.50 {:.4}", m.map25, m.map50);
        }
        Command::Ablate { jobs } => {
            let report = cmd_ablate(&cfg, out, jobs)?;
            for r in &report.rows {
                println!(
                    "{:<8} {:<60} seed {:<3} mAP@0.25 {:.4} mAP@0.50 {:.4}",
                    r.table, r.cell, r.seed, r.map25, r.map50
                );
            }
        }
        Command::Strip { input, output } => match cmd_strip(&input, &output)? {
            StripOutcome::Stripped => println!("wrote {}", output.display()),
            StripOutcome::AlreadyStripped => println!("{} was already stripped", input.display()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
