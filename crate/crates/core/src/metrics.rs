//! Average precision and mean average precision over labels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Non-interpolated AP: the mean of precision at the rank of each positive,
/// ranking by descending score with ties kept in input order. `None` when
/// there are no positives.
pub fn average_precision(scores: &[f64], truths: &[f64]) -> Result<Option<f64>> {
    if scores.len() != truths.len() {
        return Err(Error::Shape {
            context: "average_precision",
            expected: vec![scores.len()],
            actual: vec![truths.len()],
        });
    }
    let positives = truths.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] == 1.0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(total / positives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_names: Vec<String>,
    /// `None` for labels without positives; they do not enter the mean.
    pub per_label_ap: Vec<Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_images: usize,
    pub positives_per_label: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per label: `label,ap,positives`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,ap,positives\n");
        for ((name, ap), pos) in self
            .label_names
            .iter()
            .zip(&self.per_label_ap)
            .zip(&self.positives_per_label)
        {
            let ap = ap.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{name},{ap},{pos}");
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json() + "\n").map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

/// Per-label AP over the image axis of `N × |L|` matrices.
pub fn mean_average_precision(scores: &Tensor, truths: &Tensor, label_names: &[String]) -> Result<EvalReport> {
    if scores.shape() != truths.shape() || scores.rank() != 2 {
        return Err(Error::Shape {
            context: "mean_average_precision",
            expected: scores.shape().to_vec(),
            actual: truths.shape().to_vec(),
        });
    }
    let (n, l) = scores.dims2();
    if label_names.len() != l {
        return Err(Error::Shape {
            context: "mean_average_precision label names",
            expected: vec![l],
            actual: vec![label_names.len()],
        });
    }
    let column = |t: &Tensor, j: usize| -> Vec<f64> { (0..n).map(|i| t.at2(i, j)).collect() };
    let mut per_label_ap = Vec::with_capacity(l);
    let mut positives_per_label = Vec::with_capacity(l);
    let mut notes = Vec::new();
    for (j, name) in label_names.iter().enumerate() {
        let t = column(truths, j);
        positives_per_label.push(t.iter().filter(|&&v| v == 1.0).count());
        let ap = average_precision(&column(scores, j), &t)?;
        if ap.is_none() {
            notes.push(format!("label `{name}` has no positives and is excluded from the mean"));
        }
        per_label_ap.push(ap);
    }
    let included: Vec<f64> = per_label_ap.iter().flatten().copied().collect();
    let map = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(EvalReport {
        label_names: label_names.to_vec(),
        per_label_ap,
        map,
        num_images: n,
        positives_per_label,
        notes,
    })
}
