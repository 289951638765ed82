use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdae::config::{parse_config, DataSource, RunConfig};
use cdae::corruption::{Corrupt, CorruptionKind};
use cdae::data::{export_image_folder, load_image_folder, Dataset, FolderOptions};
use cdae::run::{exit_code, summarize, Run};
use cdae::tensor::Precision;
use cdae::{seed, Error, Result};

/// Chaotic denoising autoencoder pretraining and attentive fusion.
#[derive(Parser)]
#[command(name = "cdae", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corruption used for pretraining.
    #[arg(long, global = true)]
    corruption: Option<CorruptionKind>,
    /// Numeric precision of training: f64 (default) or f32.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as an image folder.
    GenerateData,
    /// Write corrupted copies of an image folder.
    Corrupt {
        /// Folder with one sub-directory per class.
        #[arg(long)]
        input: PathBuf,
        /// Square side length images are resized to.
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Train and freeze the supervised backbone.
    Stage1,
    /// Pretrain the denoising autoencoder.
    Pretrain,
    /// Finetune the pretrained encoder with a new head.
    Stage2,
    /// Train the attention fusion head over both frozen backbones.
    Stage3,
    /// Evaluate the fusion model and its backbones on the test split.
    Eval,
    /// Compare chaotic, mask and gaussian pretraining.
    Ablate,
    /// Summarise a run directory.
    Report,
    /// Run stage1, pretrain, stage2, stage3 and eval in order.
    Pipeline,
    /// Print the resolved configuration with every default spelled out.
    ShowConfig,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(format!("unknown precision `{other}` (expected f64 or f32)")),
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(kind) = c.corruption {
        cfg.corruption.kind = kind;
    }
    if let Some(p) = c.precision {
        cfg = cfg.with_precision(p);
    }
    Ok(cfg)
}

fn corrupt_folder(cfg: &RunConfig, input: &Path, image_size: usize) -> Result<()> {
    let data = load_image_folder(
        input,
        &FolderOptions {
            image_size,
            ..Default::default()
        },
    )?;
    let corruption = cfg.corruption.build(cfg.corruption.kind);
    let corrupted = corruption.corrupt(data.images(), seed::derive_named(cfg.seed, "corrupt"))?;
    let out = Dataset::new(
        corrupted,
        data.labels().to_vec(),
        data.class_names().to_vec(),
    )?;
    export_image_folder(&out, &cfg.out_dir)?;
    println!(
        "wrote {} {}-corrupted images to {}",
        out.len(),
        corruption.kind(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn print_log_tail(name: &str, log: &cdae::pipeline::TrainLog) {
    if let (Some(first), Some(last)) = (log.first_loss(), log.final_loss()) {
        println!(
            "{name}: loss {first:.6} -> {last:.6} over {} epochs",
            log.records.len()
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Report => {
            print!("{}", summarize(&cfg.out_dir)?);
            return Ok(());
        }
        Command::GenerateData => {
            if !matches!(cfg.data, DataSource::Synthetic(_)) {
                return Err(Error::Config {
                    path: "dataset".into(),
                    reason: "generate-data needs a synthetic dataset source".into(),
                });
            }
            let data = cfg.data.load()?;
            export_image_folder(&data, &cfg.out_dir)?;
            println!("wrote {} images to {}", data.len(), cfg.out_dir.display());
            return Ok(());
        }
        Command::Corrupt { input, image_size } => return corrupt_folder(&cfg, &input, image_size),
        _ => {}
    }

    let run = Run::open(cfg)?;
    match cli.command {
        Command::Stage1 => print_log_tail("stage1", &run.stage1()?.1),
        Command::Pretrain => print_log_tail("pretrain", &run.pretrain(None)?.1),
        Command::Stage2 => print_log_tail("stage2", &run.stage2()?.1),
        Command::Stage3 => print_log_tail("stage3", &run.stage3()?.1),
        Command::Eval => print!("{}", run.eval()?),
        Command::Pipeline => print!("{}", run.pipeline()?),
        Command::Ablate => {
            let results = run.ablate()?;
            print!("{}", cdae::pipeline::ablation_table(&results));
        }
        _ => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
