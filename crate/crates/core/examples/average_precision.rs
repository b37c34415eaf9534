//! Per-label average precision and mAP.

use weakneg::autodiff::Tensor;
use weakneg::metrics::{average_precision, mean_average_precision};

pub fn main() -> weakneg::Result<()> {
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1.0, 0.0, 1.0, 0.0])?;
    println!("ranked [+, -, +, -]: AP = {:.4}", ap.expect("has positives"));

    let scores = Tensor::matrix(4, 3, vec![0.9, 0.1, 0.4, 0.2, 0.8, 0.3, 0.7, 0.6, 0.2, 0.1, 0.3, 0.1]);
    let truths = Tensor::matrix(4, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let names: Vec<String> = ["cat", "dog", "bird"].map(String::from).into();
    let report = mean_average_precision(&scores, &truths, &names)?;
    print!("{}", report.to_csv());
    println!("mAP = {:.4}; notes: {:?}", report.map, report.notes);
    Ok(())
}
