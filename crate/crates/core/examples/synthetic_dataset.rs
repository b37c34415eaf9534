//! Generate a small synthetic shapes dataset, write it, and read the
//! manifest back.

use weakneg::data::{generate_synthetic, load_annotations, SplitSizes, SyntheticConfig};

pub fn main() -> weakneg::Result<()> {
    let cfg = SyntheticConfig {
        images_per_split: SplitSizes { train: 12, val: 4 },
        rng_seed: 5,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg)?;
    let out = std::env::temp_dir().join("weakneg_synthetic_dataset");
    data.save(&out)?;

    let train = load_annotations(&out.join("train.json"))?;
    println!("labels: {:?}", train.label_names());
    println!(
        "{} images, {:.2} labels per image",
        train.len(),
        train.mean_labels_per_image()
    );
    println!("positives per label: {:?}", train.positives_per_label());
    for rec in data.train_records.iter().take(3) {
        let objs: Vec<_> = rec.objects.iter().map(|o| format!("{} {:?}", o.name, o.bbox)).collect();
        println!("{}: {}", rec.image, objs.join(", "));
    }
    println!("written to {}", out.display());
    Ok(())
}
