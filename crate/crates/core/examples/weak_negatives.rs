//! Soft negative targets from representation similarity.

use weakneg::autodiff::Tensor;
use weakneg::negatives::{cosine_similarity, estimate_negatives, SimilarityConfig};

pub fn main() -> weakneg::Result<()> {
    // Rows are per-label image representations; label 0 is the observed positive.
    let reps = Tensor::matrix(
        4,
        3,
        vec![
            1.0, 0.0, 0.0, //
            0.8, 0.6, 0.0, //
            0.0, 1.0, 0.0, //
            -1.0, 0.2, 0.0,
        ],
    );
    let z_plus = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
    println!("cos(r0, r1) = {:.3}", cosine_similarity(reps.row(0), reps.row(1))?);

    for theta in [0.0, 0.5, 0.9] {
        let est = estimate_negatives(
            &reps,
            &z_plus,
            &SimilarityConfig {
                theta,
                ..Default::default()
            },
        )?;
        println!(
            "theta {theta:.1}: z_tilde = {:.3?} (mass {:.3})",
            est.z_tilde.data(),
            est.mass()
        );
    }
    Ok(())
}
