//! Attention heatmap of one label on one synthetic image.

use weakneg::data::{generate_synthetic, SplitSizes, SyntheticConfig};
use weakneg::embedder::EmbedderConfig;
use weakneg::inference::localize;
use weakneg::model::{ModelConfig, PatchModel};

pub fn main() -> weakneg::Result<()> {
    let data = generate_synthetic(&SyntheticConfig {
        images_per_split: SplitSizes { train: 1, val: 1 },
        ..Default::default()
    })?;
    let model = PatchModel::new(
        ModelConfig {
            embedder: EmbedderConfig::reduced(&[8, 16, 32, 64], 32),
            mlp_hidden: 32,
            ..Default::default()
        },
        data.train.label_names().to_vec(),
        0,
    )?;
    let item = &data.val.items()[0];
    let label = &data.val.label_names()[item.y.iter().position(|&v| v == 1.0).expect("a positive")];
    let image = item.load_image()?;

    let out = std::env::temp_dir().join("weakneg_localize");
    let art = localize(&model, &image, "val_0", label, &out)?;
    let top = art.localization.top_level0().expect("level-0 patches");
    println!("label {label}: score {:.4}", art.localization.score);
    println!(
        "top level-0 patch {:?} covers {:?}",
        top.location,
        art.localization.rect(top.location)
    );
    for rec in &data.val_records[0].objects {
        println!("object {} at {:?}", rec.name, rec.bbox);
    }
    println!("{}\n{}", art.csv.display(), art.overlay.display());
    Ok(())
}
