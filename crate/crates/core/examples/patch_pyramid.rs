//! Multi-resolution patch grid of a 640×640 image, then proportional
//! subsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakneg::patches::{build_pyramid, extract_patches, level_quotas, subsample_patches, ImageTensor, PatchGridConfig};

pub fn main() -> weakneg::Result<()> {
    let cfg = PatchGridConfig::default();
    let (h, w) = (640, 640);
    let data = (0..h * w * 3).map(|i| ((i / 3) % 97) as f64 / 96.0).collect();
    let image = ImageTensor::new(h, w, 3, data)?;

    let pyramid = build_pyramid(&image, &cfg)?;
    for (r, level) in pyramid.levels.iter().enumerate() {
        println!("level {r}: {}x{}", level.height(), level.width());
    }
    let set = extract_patches(&pyramid, &cfg)?;
    println!("patches per level {:?}, total {}", set.level_counts(), set.len());

    println!("quotas for a cap of 65: {:?}", level_quotas(&set.level_counts(), 65));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sub = subsample_patches(&set, 65, &mut rng);
    println!(
        "subsampled per level {:?}; first kept {:?}",
        sub.level_counts(),
        sub.provenance[0]
    );
    Ok(())
}
