//! A short single-positive training run on synthetic shapes with the weak
//! negative loss, followed by held-out evaluation.

use weakneg::data::{generate_synthetic, SplitSizes, SyntheticConfig};
use weakneg::embedder::EmbedderConfig;
use weakneg::inference::evaluate_model;
use weakneg::losses::LossKind;
use weakneg::model::ModelConfig;
use weakneg::train::{train_on, LrSchedule, TrainConfig};

pub fn main() -> weakneg::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let data = generate_synthetic(&SyntheticConfig {
        images_per_split: SplitSizes { train: 96, val: 32 },
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        loss: LossKind::Wn,
        epochs,
        lr_schedule: LrSchedule::constant(1e-3),
        model: ModelConfig {
            embedder: EmbedderConfig::reduced(&[8, 16, 32, 64], 32),
            mlp_hidden: 32,
            ..Default::default()
        },
        out_dir: Some(std::env::temp_dir().join("weakneg_train_synthetic")),
        ..Default::default()
    };
    let out = train_on(&cfg, &data.train, Some(&data.val), true)?;
    let report = evaluate_model(&out.model, &data.val)?;
    print!("{}", report.to_csv());
    println!("mAP {:.4} after {} steps", report.map, out.log.steps.len());
    if let Some(ckpt) = out.log.final_checkpoint {
        println!("checkpoint at {}", ckpt.display());
    }
    Ok(())
}
