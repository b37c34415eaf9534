use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weakneg::autodiff::gradcheck::{finite_difference_check, registered_ops, GradCheckConfig};
use weakneg::data::{generate_synthetic, load_png, read_json, SyntheticConfig};
use weakneg::inference::{evaluate, localize};
use weakneg::model::PatchModel;
use weakneg::train::{train, TrainConfig};

#[derive(Parser)]
#[command(version, about = "Patch-attention multi-label classifier with weak negatives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report per-label AP and mAP of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export the attention heatmap of one label on one image.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every registered op.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> weakneg::Result<bool> {
    match cli.command {
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let out = train(&cfg, true)?;
            if let Some(ckpt) = &out.log.final_checkpoint {
                println!("final checkpoint: {}", ckpt.display());
            }
        }
        Command::Eval { checkpoint, data } => {
            let report = evaluate(&checkpoint, &data)?;
            println!("{}", report.to_json());
            eprint!("{}", report.to_csv());
        }
        Command::Localize {
            checkpoint,
            image,
            label,
            out,
        } => {
            let (model, _) = PatchModel::load(&checkpoint)?;
            let img = load_png(&image)?;
            let stem = image
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let art = localize(&model, &img, &stem, &label, &out)?;
            println!("score {:.6}", art.localization.score);
            println!("{}", art.csv.display());
            println!("{}", art.overlay.display());
        }
        Command::GenData { config, out } => {
            let cfg: SyntheticConfig = read_json(&config)?;
            let data = generate_synthetic(&cfg)?;
            data.save(&out)?;
            println!(
                "{} train / {} val images, {:.3} labels per training image",
                data.train.len(),
                data.val.len(),
                data.train.mean_labels_per_image()
            );
        }
        Command::Gradcheck { points, seed } => {
            let cfg = GradCheckConfig::default();
            let mut all = true;
            for op in registered_ops() {
                let r = finite_difference_check(op.name, None, &cfg, points, seed)?;
                all &= r.pass;
                println!(
                    "{:<24} {} max_rel_err={:.3e} checked={} excluded={}",
                    r.name,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.checked,
                    r.excluded
                );
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
