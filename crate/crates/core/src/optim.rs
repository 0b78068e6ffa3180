//! Training objectives and the Adam optimizer.
//!
//! The streamlined variant trains with voxel-mean binary cross entropy on
//! sigmoid outputs; the baseline trains with per-voxel two-class softmax
//! cross entropy on its logits. Batch size is 1 throughout.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deface::predict_mask;
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::pipeline::{
    augment, fit_mask_to, fit_to_grid, normalize_intensity, AugmentRanges, FitOptions, MaskVolume,
    RigidAugmentation, Volume,
};
use crate::tensor::Tensor5;
use crate::unet::{forward_train, HeadKind, ModelConfig, WeightStore};

/// Predictions are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before the logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
pub struct LossValue {
    pub loss: f64,
    /// d(loss)/d(predictions or logits), shaped like the network output.
    pub grad: Tensor5,
}

/// Mean binary cross entropy over all voxels of the batch.
///
/// Targets must be exactly binary. The gradient is
/// (p - y) / (p (1 - p)) / M on unclamped entries and 0 where the clamp is
/// active.
pub fn bce_loss(predictions: &Tensor5, targets: &Tensor5) -> Result<LossValue> {
    if predictions.shape() != targets.shape() {
        return Err(Error::DimMismatch {
            op: "bce_loss",
            axis: "flat",
            expected: predictions.numel(),
            actual: targets.numel(),
        });
    }
    for &t in targets.data() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Validation(format!(
                "bce targets must be exactly 0 or 1, found {t}"
            )));
        }
    }
    let m = predictions.numel() as f64;
    let lo = BCE_CLAMP;
    let hi = 1.0 - BCE_CLAMP;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; predictions.numel()];
    for (i, (&p_raw, &y)) in predictions
        .data()
        .iter()
        .zip(targets.data().iter())
        .enumerate()
    {
        let p = (p_raw as f64).clamp(lo, hi);
        let y = y as f64;
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        let raw = p_raw as f64;
        if (lo..=hi).contains(&raw) {
            grad[i] = ((p - y) / (p * (1.0 - p)) / m) as f32;
        }
    }
    Ok(LossValue {
        loss: total / m,
        grad: Tensor5::new(predictions.shape(), grad)?,
    })
}

/// Mean two-class softmax cross entropy over voxels. `target_classes` holds
/// the class index per voxel (0 = deface, 1 = keep), which is exactly the
/// mask value. Gradient is with respect to the logits.
pub fn softmax_ce_loss(logits: &Tensor5, target_classes: &Tensor5) -> Result<LossValue> {
    let s = logits.shape();
    if s.c != 2 {
        return Err(Error::DimMismatch {
            op: "softmax_ce_loss",
            axis: "channel",
            expected: 2,
            actual: s.c,
        });
    }
    let ts = target_classes.shape();
    if ts.c != 1 || [ts.n, ts.d, ts.h, ts.w] != [s.n, s.d, s.h, s.w] {
        return Err(Error::DimMismatch {
            op: "softmax_ce_loss",
            axis: "flat",
            expected: s.n * s.spatial(),
            actual: target_classes.numel(),
        });
    }
    for &t in target_classes.data() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Validation(format!(
                "softmax targets must be class indices 0 or 1, found {t}"
            )));
        }
    }
    let spatial = s.spatial();
    let m = (s.n * spatial) as f64;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; logits.numel()];
    for n in 0..s.n {
        let base = n * 2 * spatial;
        for v in 0..spatial {
            let z0 = logits.data()[base + v] as f64;
            let z1 = logits.data()[base + spatial + v] as f64;
            let mx = z0.max(z1);
            let e0 = (z0 - mx).exp();
            let e1 = (z1 - mx).exp();
            let denom = e0 + e1;
            let (p0, p1) = (e0 / denom, e1 / denom);
            let class = target_classes.data()[n * spatial + v] as usize;
            total -= if class == 0 { p0.ln() } else { p1.ln() };
            grad[base + v] = ((p0 - if class == 0 { 1.0 } else { 0.0 }) / m) as f32;
            grad[base + spatial + v] = ((p1 - if class == 1 { 1.0 } else { 0.0 }) / m) as f32;
        }
    }
    Ok(LossValue {
        loss: total / m,
        grad: Tensor5::new(s, grad)?,
    })
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers aligned with the store's parameter list.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &WeightStore) -> Self {
        let m = store
            .params()
            .iter()
            .map(|p| {
                if p.trainable {
                    vec![0.0f32; p.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update. `grads` is aligned with the store's
/// parameter list; `None` entries (and non-trainable parameters) are left
/// untouched. `t` increments once per call.
pub fn adam_step(
    store: &mut WeightStore,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    config.validate()?;
    if grads.len() != store.params().len() {
        return Err(Error::Usage(format!(
            "gradient list has {} entries for {} parameters",
            grads.len(),
            store.params().len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (idx, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let param = store.param_mut(idx);
        if !param.trainable {
            continue;
        }
        if grad.len() != param.data.len() {
            return Err(Error::Usage(format!(
                "gradient for '{}' has {} entries, parameter has {}",
                param.name,
                grad.len(),
                param.data.len()
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..grad.len() {
            let g = grad[i] as f64;
            let mi = config.beta1 * m[i] as f64 + (1.0 - config.beta1) * g;
            let vi = config.beta2 * v[i] as f64 + (1.0 - config.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            param.data[i] =
                (param.data[i] as f64 - config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon))
                    as f32;
        }
    }
    Ok(())
}

/// One training example: an image and its ground-truth mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Volume,
    pub mask: MaskVolume,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Rigid augmentation ranges; `None` disables augmentation.
    pub augment: Option<AugmentRanges>,
    pub fit: FitOptions,
    /// Validate every this many iterations (0 = never).
    pub validate_every: u64,
    /// Checkpoint every this many iterations (0 = never).
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Mask threshold used for validation metrics.
    pub tau: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 0,
            seed: 0,
            adam: AdamConfig::default(),
            augment: Some(AugmentRanges::default()),
            fit: FitOptions::default(),
            validate_every: 50,
            checkpoint_every: 50,
            checkpoint_dir: None,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub iter: u64,
    pub loss: f64,
    /// Wall-clock time of the step; excluded from determinism comparisons.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValRecord {
    pub iter: u64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestCheckpoint {
    pub iter: u64,
    pub dice: f64,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct TrainReport {
    pub iterations: Vec<IterRecord>,
    pub validations: Vec<ValRecord>,
    pub best: Option<BestCheckpoint>,
    pub final_loss: Option<f64>,
}

impl TrainReport {
    /// Loss curve without wall-clock noise, for determinism comparisons.
    pub fn loss_curve(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.loss).collect()
    }
}

/// Keep/deface class map read off a defaced image: a voxel is "keep" only
/// where the defaced target would retain a nonzero intensity.
fn rendered_defaced_classes(image: &Volume, mask: &MaskVolume) -> Result<MaskVolume> {
    let data = image
        .data
        .iter()
        .zip(mask.data.iter())
        .map(|(&v, &m)| if m == 1 && v != 0.0 { 1u8 } else { 0u8 })
        .collect();
    MaskVolume::new(image.dims, image.spacing, data)
}

fn param_norm_diagnostics(store: &WeightStore) -> String {
    let mut parts = Vec::new();
    for p in store.params().iter().filter(|p| p.trainable) {
        let norm: f64 = p.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        parts.push(format!("{}={norm:.3e}", p.name));
    }
    parts.join(", ")
}

/// Batch-size-1 training loop: shuffled epochs, on-the-fly augmentation,
/// fit-to-grid preprocessing, Adam updates, periodic validation and
/// checkpoints. `iterations == 0` returns an empty report without touching
/// the model.
pub fn train_loop(
    store: &mut WeightStore,
    config: &ModelConfig,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut report = TrainReport::default();
    if opts.iterations == 0 {
        return Ok(report);
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::new(store);
    let mut best_dice = f64::NEG_INFINITY;

    for iter in 0..opts.iterations {
        let t0 = Instant::now();
        if order.is_empty() {
            order = (0..data.train.len()).collect();
            order.shuffle(&mut order_rng);
        }
        let sample = &data.train[order.pop().expect("refilled above")];

        let (image, mask) = match &opts.augment {
            Some(ranges) => {
                let aug = RigidAugmentation::sample(&mut aug_rng, ranges);
                augment(&sample.image, &sample.mask, &aug)?
            }
            None => (sample.image.clone(), sample.mask.clone()),
        };
        let image = normalize_intensity(&image);
        let target_mask = match config.head {
            // the mask head trains against the oracle mask itself
            HeadKind::Sigmoid1 => mask,
            // the direct-defacing head trains against the class map rendered
            // from the defaced image, where background voxels are
            // indistinguishable from defaced ones
            HeadKind::Softmax2 => rendered_defaced_classes(&image, &mask)?,
        };
        let (fitted, _recipe) = fit_to_grid(&image, &opts.fit)?;
        let target = fit_mask_to(&target_mask, fitted.dims)?;

        let graph = forward_train(store, config, fitted.to_tensor())?;
        let loss = match config.head {
            HeadKind::Sigmoid1 => {
                bce_loss(graph.tape.value(graph.output), &target.to_target_tensor())?
            }
            HeadKind::Softmax2 => {
                softmax_ce_loss(graph.tape.value(graph.logits), &target.to_target_tensor())?
            }
        };
        if !loss.loss.is_finite() {
            return Err(Error::NumericalAbort {
                iteration: iter,
                diagnostics: format!("loss is not finite; {}", param_norm_diagnostics(store)),
            });
        }

        let mut graph = graph;
        graph.tape.backward(graph.output, &loss.grad)?;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; store.params().len()];
        for tp in &graph.params {
            grads[tp.store_index] = Some(graph.tape.param_grad(tp.tape_id).to_vec());
        }
        let bn_updates = std::mem::take(&mut graph.bn_updates);
        drop(graph);
        for update in bn_updates {
            store.param_mut(update.store_index).data = update.values;
        }
        adam_step(store, &grads, &mut state, &opts.adam)?;

        report.iterations.push(IterRecord {
            iter,
            loss: loss.loss,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        let done = iter + 1 == opts.iterations;
        if opts.validate_every > 0
            && !data.val.is_empty()
            && ((iter + 1) % opts.validate_every == 0 || done)
        {
            let val = validate(store, config, &data.val, opts)?;
            let record = ValRecord {
                iter,
                dice: val.0,
                precision: val.1,
                recall: val.2,
            };
            if record.dice > best_dice {
                best_dice = record.dice;
                let path = match &opts.checkpoint_dir {
                    Some(dir) => {
                        let path = dir.join("best.vdfw");
                        crate::io::save_weights(store, config.variant, &path)?;
                        Some(path)
                    }
                    None => None,
                };
                report.best = Some(BestCheckpoint {
                    iter,
                    dice: record.dice,
                    path,
                });
            }
            report.validations.push(record);
        }
        if opts.checkpoint_every > 0 && (iter + 1) % opts.checkpoint_every == 0 {
            if let Some(dir) = &opts.checkpoint_dir {
                let path = dir.join(format!("checkpoint_{:06}.vdfw", iter + 1));
                crate::io::save_weights(store, config.variant, &path)?;
            }
        }
    }
    report.final_loss = report.iterations.last().map(|r| r.loss);
    Ok(report)
}

fn validate(
    store: &WeightStore,
    config: &ModelConfig,
    val: &[TrainSample],
    opts: &TrainOptions,
) -> Result<(f64, f64, f64)> {
    let mut dice = 0.0;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for sample in val {
        let predicted = predict_mask(store, config, &sample.image, &opts.fit, opts.tau)?;
        let c = ConfusionCounts::from_masks(&predicted, &sample.mask)?;
        dice += c.dice();
        precision += c.precision();
        recall += c.recall();
    }
    let n = val.len() as f64;
    Ok((dice / n, precision / n, recall / n))
}
