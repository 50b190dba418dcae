use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tubeshift_harness::{ablation, run, RunConfig, RunManifest};
use tubeshift_model::{ModuleFlags, Phase};

#[derive(Parser)]
#[command(name = "tubeshift", version, about = "Domain-adaptive action localization on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config, or a run's manifest.json to repeat that run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source, target and held-out target splits into --out.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on the source split, or adapt a pretrained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// pretrain | adapt
        #[arg(long)]
        mode: Option<Phase>,
        /// Adaptation modules, e.g. Timg,Tinst,Simg; "none" for source-only.
        #[arg(long)]
        modules: Option<ModuleFlags>,
        /// Checkpoint to start from; required for adapt.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Frame/video mAP and error breakdown of a checkpoint on the evaluation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the module ablation grid over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Four-way breakdown of the top-ranked detections.
    AnalyzeErrors {
        #[command(flatten)]
        common: Common,
        /// A detection dump written by evaluate.
        #[arg(long, conflicts_with = "checkpoint")]
        detections: Option<PathBuf>,
        /// Run this checkpoint on the evaluation split instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(RunConfig, Option<RunManifest>)> {
    let (mut config, manifest) = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    Ok((config, manifest))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    match run_cli(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let (mut config, _) = load(&common)?;
            config.data_dir = common.out.clone();
            for (split, n) in run::generate(&config)? {
                println!("{split}: {n} videos");
            }
        }
        Command::Train {
            common,
            mode,
            modules,
            init,
        } => {
            let (mut config, manifest) = load(&common)?;
            let recorded = manifest.as_ref();
            let mode = match (mode, recorded.and_then(|m| m.mode.as_deref())) {
                (Some(m), _) => m,
                (None, Some(m)) => m.parse()?,
                (None, None) => bail!("--mode is required (pretrain or adapt)"),
            };
            let flags = match (modules, recorded) {
                (Some(f), _) => f,
                (None, Some(m)) => m.modules.parse()?,
                (None, None) if mode == Phase::Adapt => ModuleFlags::ALL,
                (None, None) => ModuleFlags::NONE,
            };
            if init.is_some() {
                config.init_checkpoint = init;
            }
            let outcome = run::train(&config, mode, flags, &common.out)?;
            let last = outcome.history.last().context("no training steps configured")?;
            println!(
                "{mode} [{flags}] {} steps, final total {:.4}; checkpoint {}",
                outcome.history.len(),
                last.total,
                outcome.checkpoint.display()
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let (config, _) = load(&common)?;
            let report = run::evaluate(&config, &checkpoint, &common.out)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { common } => {
            let (mut config, _) = load(&common)?;
            if let Some(seed) = common.seed {
                config.seeds = vec![seed];
            }
            let table = ablation::run_grid(&config, &common.out)?;
            print!("{}", table.to_markdown());
        }
        Command::AnalyzeErrors {
            common,
            detections,
            checkpoint,
        } => {
            let (config, _) = load(&common)?;
            let dump = match (detections, checkpoint) {
                (Some(d), _) => d,
                (None, Some(ckpt)) => {
                    let (_, dets) = run::detect_split(&config, &ckpt)?;
                    std::fs::create_dir_all(&common.out)?;
                    let path = common.out.join(run::DETECTIONS_FILE);
                    tubeshift_core::textio::write_detections(&path, &dets)?;
                    path
                }
                (None, None) => bail!("give --detections or --checkpoint"),
            };
            let e = run::analyze_errors(&config, &dump, &common.out)?;
            println!(
                "top-{}: correct {:.1}%  mislocalized {:.1}%  background {:.1}%  incorrect {:.1}%",
                e.analyzed,
                100.0 * e.correct,
                100.0 * e.mislocalized,
                100.0 * e.background,
                100.0 * e.incorrect
            );
        }
    }
    Ok(())
}
