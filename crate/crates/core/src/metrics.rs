//! Dice, precision and recall over binary masks.
//!
//! The positive class is the defaced voxel (mask value 0): precision drops
//! when non-facial voxels get zeroed, recall drops when facial voxels
//! survive. `binarize_baseline_output` recovers a mask from a directly
//! defaced image by thresholding the delta against the original.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{MaskVolume, Volume};
use crate::reference;

/// Voxel counts where positive = defaced (mask value 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(predicted: &MaskVolume, truth: &MaskVolume) -> Result<Self> {
        check_dims("confusion", predicted, truth)?;
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.data.iter().zip(truth.data.iter()) {
            match (p, t) {
                (0, 0) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            // both defaced sets empty: perfect agreement
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

fn check_dims(op: &'static str, a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch {
            op,
            axis: "depth",
            expected: a.dims[0],
            actual: b.dims[0],
        });
    }
    Ok(())
}

/// Dice overlap between the defaced-voxel sets of two masks.
pub fn dice(x: &MaskVolume, y: &MaskVolume) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(x, y)?.dice())
}

/// (precision, recall) of a predicted mask against ground truth.
pub fn precision_recall(predicted: &MaskVolume, truth: &MaskVolume) -> Result<(f64, f64)> {
    let c = ConfusionCounts::from_masks(predicted, truth)?;
    Ok((c.precision(), c.recall()))
}

/// Recovers a binary mask from a directly defaced prediction: voxels whose
/// intensity moved by more than `tau_eq` from the original are defaced.
pub fn binarize_baseline_output(
    original: &Volume,
    predicted_defaced: &Volume,
    tau_eq: f64,
) -> Result<MaskVolume> {
    if original.dims != predicted_defaced.dims {
        return Err(Error::DimMismatch {
            op: "binarize_baseline_output",
            axis: "depth",
            expected: original.dims[0],
            actual: predicted_defaced.dims[0],
        });
    }
    let data = original
        .data
        .iter()
        .zip(predicted_defaced.data.iter())
        .map(|(&o, &p)| {
            if ((o - p).abs() as f64) <= tau_eq {
                1u8
            } else {
                0u8
            }
        })
        .collect();
    Ok(MaskVolume {
        dims: original.dims,
        spacing: original.spacing,
        data,
        orientation: original.orientation,
    })
}

/// Anything that can produce a defacing mask for an image.
pub trait MaskSource: Sync {
    fn predict(&self, image: &Volume) -> Result<MaskVolume>;
}

impl<F> MaskSource for F
where
    F: Fn(&Volume) -> Result<MaskVolume> + Sync,
{
    fn predict(&self, image: &Volume) -> Result<MaskVolume> {
        self(image)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub protocol: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Metrics are computed per image, then averaged.
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
    pub mean_dice: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

/// One evaluation case: image, optional ground truth, identifiers.
pub struct EvalCase {
    pub id: String,
    pub protocol: String,
    pub image: Volume,
    pub truth: Option<MaskVolume>,
}

/// Evaluates a mask source over a test set. Rows without ground truth are
/// skipped and counted. Aggregation order is fixed regardless of threading.
pub fn evaluate(source: &dyn MaskSource, cases: &[EvalCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    use rayon::prelude::*;
    let results: Vec<Result<Option<EvalRow>>> = cases
        .par_iter()
        .map(|case| {
            let truth = match &case.truth {
                Some(t) => t,
                None => return Ok(None),
            };
            let predicted = source.predict(&case.image)?;
            let c = ConfusionCounts::from_masks(&predicted, truth)?;
            Ok(Some(EvalRow {
                id: case.id.clone(),
                protocol: case.protocol.clone(),
                dice: c.dice(),
                precision: c.precision(),
                recall: c.recall(),
            }))
        })
        .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (case, res) in cases.iter().zip(results) {
        match res? {
            Some(row) => rows.push(row),
            None => {
                eprintln!("warning: no ground truth for '{}', skipping", case.id);
                skipped.push(case.id.clone());
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(
            "evaluation set has no rows with ground truth".into(),
        ));
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        mean_precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        mean_recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        rows,
        skipped,
    })
}

impl EvalReport {
    /// Summary table with the published reference rows for context.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "metrics are per-image, then averaged over the set");
        let _ = writeln!(
            out,
            "{:<26} {:>8} {:>10} {:>8}",
            "", "Dice", "Precision", "Recall"
        );
        let _ = writeln!(
            out,
            "{:<26} {:>8.3} {:>10.3} {:>8.3}",
            "measured (this run)", self.mean_dice, self.mean_precision, self.mean_recall
        );
        for r in [reference::DEEPDEFACER, reference::BASELINE_UNET3D] {
            let _ = writeln!(
                out,
                "{:<26} {:>8.3} {:>10.3} {:>8.3}  (published reference)",
                r.name, r.dice, r.precision, r.recall
            );
        }
        let _ = writeln!(
            out,
            "images: {} evaluated, {} skipped",
            self.rows.len(),
            self.skipped.len()
        );
        out
    }

    /// One JSON record per line: rows first, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "mean_dice": self.mean_dice,
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "evaluated": self.rows.len(),
            "skipped": self.skipped.len(),
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}
