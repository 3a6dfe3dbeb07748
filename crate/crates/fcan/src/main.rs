use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::*;

#[derive(Debug, Parser)]
#[command(
    name = "fcan",
    version,
    about = "Domain adaptation for semantic segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled split of synthetic scenes.
    SynthData(SynthArgs),
    /// Average Gram statistics of an image directory into a domain style.
    AanStyle(AanStyleArgs),
    /// Render images with a domain style.
    AanAdapt(AanAdaptArgs),
    /// Train the segmenter on labeled source scenes.
    RanPretrain(PretrainArgs),
    /// Adversarially adapt a pretrained segmenter to unlabeled target scenes.
    RanAdapt(AdaptArgs),
    /// Adversarial adaptation with some labeled target scenes.
    RanSemisup(SemisupArgs),
    /// Recompute batch-norm statistics on target images.
    Abn(AbnArgs),
    /// Per-class IoU and mIoU of predictions against ground truth.
    Eval(EvalArgs),
    /// Average class-score maps.
    Fuse(FuseArgs),
    /// Run the ablation ladder on the synthetic benchmark.
    Ablate(AblateArgs),
}

/// Maps FCAN_THREADS onto the matrix kernel's thread count; one thread if unset.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("FCAN_THREADS") else {
        if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
            std::env::set_var("MATMUL_NUM_THREADS", "1");
        }
        return Ok(());
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
            Ok(())
        }
        _ => Err(format!("FCAN_THREADS must be a positive integer, got {v:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::AanStyle(a) => aan_style(a),
        Command::AanAdapt(a) => aan_adapt(a),
        Command::RanPretrain(a) => ran_pretrain(a),
        Command::RanAdapt(a) => ran_adapt(a),
        Command::RanSemisup(a) => ran_semisup(a),
        Command::Abn(a) => abn(a),
        Command::Eval(a) => eval(a),
        Command::Fuse(a) => fuse(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
