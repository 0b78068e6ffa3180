//! End-to-end defacing: normalize, fit to the inference grid, predict,
//! restore to the acquisition grid, threshold, Hadamard-mask the original.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::pipeline::{
    deface, fit_to_grid, normalize_intensity, restore_to_original, threshold_mask, FitOptions,
    MaskVolume, Volume,
};
use crate::tensor::Tensor5;
use crate::unet::{forward_infer, HeadKind, ModelConfig, WeightStore};

/// Default mask threshold, selected on held-out validation data.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageTimings {
    pub normalize_ms: f64,
    pub fit_ms: f64,
    pub forward_ms: f64,
    pub restore_ms: f64,
    pub threshold_ms: f64,
    pub deface_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.normalize_ms
            + self.fit_ms
            + self.forward_ms
            + self.restore_ms
            + self.threshold_ms
            + self.deface_ms
    }
}

pub struct DefaceResult {
    /// Original image with defaced voxels zeroed; kept voxels bit-equal.
    pub defaced: Volume,
    pub mask: MaskVolume,
    /// Keep probability restored to the acquisition grid.
    pub probabilities: Volume,
    pub timings: StageTimings,
}

/// Extracts the keep-probability channel from a forward output.
fn keep_probability(output: &Tensor5, head: HeadKind, grid: &Volume) -> Result<Volume> {
    let s = output.shape();
    let spatial = s.spatial();
    let data = match head {
        HeadKind::Sigmoid1 => output.data().to_vec(),
        // channel 1 is the keep class
        HeadKind::Softmax2 => output.data()[spatial..2 * spatial].to_vec(),
    };
    let mut vol = Volume::new(grid.dims, grid.spacing, data)?;
    vol.orientation = grid.orientation;
    Ok(vol)
}

/// Keep probabilities restored to the image's own grid, with stage timings
/// up to that point.
pub fn predict_probabilities(
    store: &WeightStore,
    config: &ModelConfig,
    image: &Volume,
    fit: &FitOptions,
) -> Result<(Volume, StageTimings)> {
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let normalized = normalize_intensity(image);
    timings.normalize_ms = ms(t);

    let t = Instant::now();
    let (fitted, recipe) = fit_to_grid(&normalized, fit)?;
    timings.fit_ms = ms(t);

    let t = Instant::now();
    let output = forward_infer(store, config, &fitted.to_tensor())?;
    timings.forward_ms = ms(t);

    let t = Instant::now();
    let prob_fitted = keep_probability(&output, config.head, &fitted)?;
    let restored = restore_to_original(&prob_fitted, &recipe)?;
    timings.restore_ms = ms(t);

    Ok((restored, timings))
}

/// Predicted binary mask at the image's own resolution.
pub fn predict_mask(
    store: &WeightStore,
    config: &ModelConfig,
    image: &Volume,
    fit: &FitOptions,
    tau: f64,
) -> Result<MaskVolume> {
    let (prob, _) = predict_probabilities(store, config, image, fit)?;
    threshold_mask(&prob, tau)
}

/// Full defacing pipeline. The Hadamard product applies to the original
/// (unnormalized) image, so kept voxels are bit-equal to the input.
pub fn run_deface(
    store: &WeightStore,
    config: &ModelConfig,
    image: &Volume,
    fit: &FitOptions,
    tau: f64,
) -> Result<DefaceResult> {
    let (probabilities, mut timings) = predict_probabilities(store, config, image, fit)?;

    let t = Instant::now();
    let mask = threshold_mask(&probabilities, tau)?;
    timings.threshold_ms = ms(t);

    let t = Instant::now();
    let defaced = deface(image, &mask)?;
    timings.deface_ms = ms(t);

    Ok(DefaceResult {
        defaced,
        mask,
        probabilities,
        timings,
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Candidate thresholds for the validation search.
#[derive(Debug, Clone)]
pub struct ThresholdGrid {
    pub candidates: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Usage("threshold grid is empty".into()));
        }
        if candidates.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Validation("thresholds must lie in [0, 1]".into()));
        }
        Ok(ThresholdGrid { candidates })
    }

    /// Evenly spaced candidates in [lo, hi].
    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self> {
        let candidates = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64)
            .collect();
        Self::new(candidates)
    }

    /// Geometrically spaced candidates in [lo, hi] (lo > 0).
    pub fn log_linear(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if lo <= 0.0 || hi <= lo {
            return Err(Error::Usage(format!(
                "log grid needs 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        let candidates = (0..n)
            .map(|i| {
                let t = i as f64 / (n.max(2) - 1) as f64;
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            })
            .collect();
        Self::new(candidates)
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::linear(0.1, 0.9, 9).expect("static grid is valid")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdSearch {
    pub best_tau: f64,
    /// (tau, mean dice) per candidate, in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Sweeps the grid over a validation set and returns the Dice-optimal
/// threshold. Probabilities are computed once per image; ties break toward
/// 0.5.
pub fn threshold_search(
    store: &WeightStore,
    config: &ModelConfig,
    validation: &[(Volume, MaskVolume)],
    grid: &ThresholdGrid,
    fit: &FitOptions,
) -> Result<ThresholdSearch> {
    if validation.is_empty() {
        return Err(Error::Usage(
            "threshold search needs a non-empty validation set".into(),
        ));
    }
    let probs: Vec<(Volume, &MaskVolume)> = validation
        .iter()
        .map(|(image, truth)| {
            let (p, _) = predict_probabilities(store, config, image, fit)?;
            Ok((p, truth))
        })
        .collect::<Result<_>>()?;

    let mut table = Vec::with_capacity(grid.candidates.len());
    for &tau in &grid.candidates {
        let mut total = 0.0;
        for (prob, truth) in &probs {
            let mask = threshold_mask(prob, tau)?;
            total += dice(&mask, truth)?;
        }
        table.push((tau, total / probs.len() as f64));
    }

    let mut best = table[0];
    for &(tau, score) in &table[1..] {
        let better = score > best.1;
        let tie_toward_center = score == best.1
            && ((tau - 0.5).abs() < (best.0 - 0.5).abs()
                || ((tau - 0.5).abs() == (best.0 - 0.5).abs() && tau < best.0));
        if better || tie_toward_center {
            best = (tau, score);
        }
    }
    Ok(ThresholdSearch {
        best_tau: best.0,
        table,
    })
}
