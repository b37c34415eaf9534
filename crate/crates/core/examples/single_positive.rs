//! Reducing full annotations to one frozen positive per image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakneg::data::{freeze_single_positives, generate_synthetic, sample_single_positive, SplitSizes, SyntheticConfig};

pub fn main() -> weakneg::Result<()> {
    let y = [1.0, 0.0, 1.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 4];
    for _ in 0..3000 {
        let z = sample_single_positive(&y, &mut rng)?;
        counts[z.iter().position(|&v| v == 1.0).expect("one positive")] += 1;
    }
    println!("draws per label over 3000 samples: {counts:?}");

    let data = generate_synthetic(&SyntheticConfig {
        images_per_split: SplitSizes { train: 6, val: 1 },
        ..Default::default()
    })?;
    let frozen = freeze_single_positives(&data.train, 9)?;
    for (item, z) in data.train.items().iter().zip(&frozen) {
        println!("{}: y = {:?} -> z+ = {:?}", item.name, item.y, z);
    }
    Ok(())
}
