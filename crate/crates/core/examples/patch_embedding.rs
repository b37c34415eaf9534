//! Shared CNN embedding of every patch of an image.

use weakneg::autodiff::ParameterStore;
use weakneg::embedder::{embed_patches, Embedder, EmbedderConfig};
use weakneg::patches::{image_to_patches, ImageTensor, PatchGridConfig};

pub fn main() -> weakneg::Result<()> {
    let grid = PatchGridConfig::default();
    let mut image = ImageTensor::filled(128, 192, 3, 0.1);
    for y in 20..50 {
        for x in 70..110 {
            image.set(y, x, 0, 0.9);
        }
    }
    let set = image_to_patches(&image, &grid)?;

    let cfg = EmbedderConfig::reduced(&[8, 16, 32, 64], 32);
    let mut store = ParameterStore::new(1);
    Embedder::new(cfg.clone())?.init(&mut store)?;
    println!("embedder: {} tensors, {} scalars", store.len(), store.num_scalars());

    let emb = embed_patches(&set, &store, &cfg)?;
    println!("E_patch is {:?}", emb.matrix.shape());
    for (i, loc) in emb.provenance.iter().enumerate() {
        let row = emb.matrix.row(i);
        println!("{loc:?}: |e| = {:.4}", row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    // Background-only patches are bit-identical, so are their embeddings.
    println!("rows 3 and 4 equal: {}", emb.matrix.row(3) == emb.matrix.row(4));
    Ok(())
}
