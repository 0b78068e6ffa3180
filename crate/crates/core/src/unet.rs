//! 3D U-Net construction and forward passes.
//!
//! Two variants share one topology: four encoder blocks of two 3x3x3 convs
//! with ReLU followed by 2x max pooling, one widening bottleneck conv, and a
//! decoder of upsample + skip concat + one conv per level, closed by a 1x1x1
//! head. The streamlined variant runs filters (8,16,32,64) with a 128-wide
//! bottleneck, no batch norm, and a single-channel sigmoid head; the baseline
//! runs (32,64,128,256) with a 1024 bottleneck, batch norm after each pool,
//! and a two-class softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{batch_moments, normalize, BatchStats};
use crate::tensor::{Padding, ParamId, Tape, Tensor5, TensorId};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    DeepDefacer,
    Baseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::DeepDefacer => "deepdefacer",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepdefacer" => Ok(Variant::DeepDefacer),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Single channel through a sigmoid: per-voxel keep probability.
    Sigmoid1,
    /// Two channels through a channel softmax: deface/keep distribution.
    Softmax2,
}

impl HeadKind {
    pub fn channels(&self) -> usize {
        match self {
            HeadKind::Sigmoid1 => 1,
            HeadKind::Softmax2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_filters: Vec<usize>,
    pub bottleneck: usize,
    pub use_batchnorm: bool,
    pub head: HeadKind,
    pub input_channels: usize,
}

impl ModelConfig {
    pub fn deepdefacer() -> Self {
        ModelConfig {
            variant: Variant::DeepDefacer,
            encoder_filters: vec![8, 16, 32, 64],
            bottleneck: 128,
            use_batchnorm: false,
            head: HeadKind::Sigmoid1,
            input_channels: 1,
        }
    }

    pub fn baseline() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            encoder_filters: vec![32, 64, 128, 256],
            bottleneck: 1024,
            use_batchnorm: true,
            head: HeadKind::Softmax2,
            input_channels: 1,
        }
    }

    pub fn canonical(variant: Variant) -> Self {
        match variant {
            Variant::DeepDefacer => Self::deepdefacer(),
            Variant::Baseline => Self::baseline(),
        }
    }

    /// Streamlined variant scaled to a different base width, keeping the
    /// canonical doubling pattern and bottleneck ratio.
    pub fn deepdefacer_scaled(base: usize) -> Self {
        ModelConfig {
            encoder_filters: (0..4).map(|l| base << l).collect(),
            bottleneck: base * 16,
            ..Self::deepdefacer()
        }
    }

    /// Baseline variant scaled to a different base width.
    pub fn baseline_scaled(base: usize) -> Self {
        ModelConfig {
            encoder_filters: (0..4).map(|l| base << l).collect(),
            bottleneck: base * 32,
            ..Self::baseline()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_filters.is_empty() {
            return Err(Error::Config("encoder filter list is empty".into()));
        }
        if self.encoder_filters[0] == 0 {
            return Err(Error::Config("encoder filters must be positive".into()));
        }
        for pair in self.encoder_filters.windows(2) {
            if pair[1] != pair[0] * 2 {
                return Err(Error::Config(format!(
                    "encoder filters must double per level, got {:?}",
                    self.encoder_filters
                )));
            }
        }
        let last = *self.encoder_filters.last().unwrap();
        if self.bottleneck <= last {
            return Err(Error::Config(format!(
                "bottleneck ({}) must widen beyond the last encoder level ({})",
                self.bottleneck, last
            )));
        }
        if self.input_channels != 1 {
            return Err(Error::Config("input_channels must be 1".into()));
        }
        Ok(())
    }

    /// Reconstructs the configuration from the parameter inventory of a
    /// loaded store; shapes are fully cross-checked by the caller.
    pub fn infer_from_store(store: &WeightStore) -> Result<Self> {
        let first = store.param("enc0.conv1.weight")?;
        if first.shape.len() != 5 {
            return Err(Error::Corrupt("enc0.conv1.weight is not rank 5".into()));
        }
        let input_channels = first.shape[1];
        let mut encoder_filters = Vec::new();
        let mut l = 0;
        while let Ok(p) = store.param(&format!("enc{l}.conv1.weight")) {
            encoder_filters.push(p.shape[0]);
            l += 1;
        }
        let bottleneck = store.param("bottleneck.conv.weight")?.shape[0];
        let use_batchnorm = store.param("enc0.bn.scale").is_ok();
        let head_channels = store.param("head.conv.weight")?.shape[0];
        let head = match head_channels {
            1 => HeadKind::Sigmoid1,
            2 => HeadKind::Softmax2,
            other => {
                return Err(Error::Corrupt(format!(
                    "head has {other} channels, expected 1 or 2"
                )))
            }
        };
        let variant = if use_batchnorm || head == HeadKind::Softmax2 {
            Variant::Baseline
        } else {
            Variant::DeepDefacer
        };
        let config = ModelConfig {
            variant,
            encoder_filters,
            bottleneck,
            use_batchnorm,
            head,
            input_channels,
        };
        config.validate()?;
        Ok(config)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Running batch-norm statistics are stored but not optimized.
    pub trainable: bool,
}

/// Ordered, uniquely named parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    params: Vec<Param>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn push(&mut self, param: Param) -> Result<usize> {
        if self.index_of(&param.name).is_some() {
            return Err(Error::Config(format!(
                "duplicate parameter name '{}'",
                param.name
            )));
        }
        let want: usize = param.shape.iter().product();
        if want != param.data.len() {
            return Err(Error::DimMismatch {
                op: "WeightStore::push",
                axis: "flat",
                expected: want,
                actual: param.data.len(),
            });
        }
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Usage(format!("missing parameter '{name}'")))
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    /// Exact element count over every stored tensor.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Exact element count of a weight store.
pub fn count_parameters(store: &WeightStore) -> usize {
    store.total_count()
}

/// Layer inventory in build/execution order.
#[derive(Debug, Clone)]
pub enum LayerDef {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        k: usize,
    },
    Norm {
        name: String,
        channels: usize,
    },
}

pub fn layer_defs(config: &ModelConfig) -> Vec<LayerDef> {
    let mut defs = Vec::new();
    let levels = config.levels();
    let mut in_c = config.input_channels;
    for (l, &f) in config.encoder_filters.iter().enumerate() {
        defs.push(LayerDef::Conv {
            name: format!("enc{l}.conv1"),
            in_channels: in_c,
            out_channels: f,
            k: 3,
        });
        defs.push(LayerDef::Conv {
            name: format!("enc{l}.conv2"),
            in_channels: f,
            out_channels: f,
            k: 3,
        });
        if config.use_batchnorm {
            defs.push(LayerDef::Norm {
                name: format!("enc{l}.bn"),
                channels: f,
            });
        }
        in_c = f;
    }
    defs.push(LayerDef::Conv {
        name: "bottleneck.conv".into(),
        in_channels: in_c,
        out_channels: config.bottleneck,
        k: 3,
    });
    let mut cur = config.bottleneck;
    for l in (0..levels).rev() {
        let f = config.encoder_filters[l];
        defs.push(LayerDef::Conv {
            name: format!("dec{l}.conv"),
            in_channels: cur + f,
            out_channels: f,
            k: 3,
        });
        cur = f;
    }
    defs.push(LayerDef::Conv {
        name: "head.conv".into(),
        in_channels: cur,
        out_channels: config.head.channels(),
        k: 1,
    });
    defs
}

/// Parameter count implied by a configuration, without building it.
pub fn config_param_count(config: &ModelConfig) -> usize {
    layer_defs(config)
        .iter()
        .map(|def| match def {
            LayerDef::Conv {
                in_channels,
                out_channels,
                k,
                ..
            } => out_channels * in_channels * k * k * k + out_channels,
            LayerDef::Norm { channels, .. } => 4 * channels,
        })
        .sum()
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// Builds a freshly initialized store: conv weights He-normal
/// (variance 2 / fan_in), biases zero, batch-norm at identity.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for def in layer_defs(config) {
        match def {
            LayerDef::Conv {
                name,
                in_channels,
                out_channels,
                k,
            } => {
                let fan_in = in_channels * k * k * k;
                let n = out_channels * fan_in;
                store.push(Param {
                    name: format!("{name}.weight"),
                    shape: vec![out_channels, in_channels, k, k, k],
                    data: he_normal(&mut rng, fan_in, n),
                    trainable: true,
                })?;
                store.push(Param {
                    name: format!("{name}.bias"),
                    shape: vec![out_channels],
                    data: vec![0.0; out_channels],
                    trainable: true,
                })?;
            }
            LayerDef::Norm { name, channels } => {
                store.push(Param {
                    name: format!("{name}.scale"),
                    shape: vec![channels],
                    data: vec![1.0; channels],
                    trainable: true,
                })?;
                store.push(Param {
                    name: format!("{name}.shift"),
                    shape: vec![channels],
                    data: vec![0.0; channels],
                    trainable: true,
                })?;
                store.push(Param {
                    name: format!("{name}.running_mean"),
                    shape: vec![channels],
                    data: vec![0.0; channels],
                    trainable: false,
                })?;
                store.push(Param {
                    name: format!("{name}.running_var"),
                    shape: vec![channels],
                    data: vec![1.0; channels],
                    trainable: false,
                })?;
            }
        }
    }
    Ok(store)
}

/// Standalone batch-norm state matching what the store carries per level.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Validation("batch-norm epsilon must be > 0".into()));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation(
                "batch-norm running variance must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch normalization over (N, D, H, W) per channel. Train mode uses batch
/// statistics and folds them into the running estimates; infer mode uses the
/// running estimates.
pub fn batchnorm3d(input: &Tensor5, state: &mut BatchNormState, mode: Mode) -> Result<Tensor5> {
    state.validate()?;
    let s = input.shape();
    if s.c != state.scale.len() {
        return Err(Error::DimMismatch {
            op: "batchnorm3d",
            axis: "channel",
            expected: state.scale.len(),
            actual: s.c,
        });
    }
    if s.n * s.spatial() == 0 {
        return Err(Error::Usage("batchnorm3d over an empty batch".into()));
    }
    match mode {
        Mode::Train => {
            let (mean, var) = batch_moments(input);
            for c in 0..s.c {
                state.running_mean[c] = ((1.0 - state.momentum)
                    * state.running_mean[c] as f64
                    + state.momentum * mean[c]) as f32;
                state.running_var[c] = ((1.0 - state.momentum) * state.running_var[c] as f64
                    + state.momentum * var[c]) as f32;
            }
            Ok(normalize(
                input,
                &mean,
                &var,
                &state.scale,
                &state.shift,
                state.epsilon,
            ))
        }
        Mode::Infer => {
            let mean: Vec<f64> = state.running_mean.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = state.running_var.iter().map(|&v| v as f64).collect();
            Ok(normalize(
                input,
                &mean,
                &var,
                &state.scale,
                &state.shift,
                state.epsilon,
            ))
        }
    }
}

fn check_input(config: &ModelConfig, input: &Tensor5) -> Result<()> {
    let s = input.shape();
    if s.c != config.input_channels {
        return Err(Error::DimMismatch {
            op: "forward",
            axis: "channel",
            expected: config.input_channels,
            actual: s.c,
        });
    }
    let divisor = 1usize << config.levels();
    for (axis, size) in [("depth", s.d), ("height", s.h), ("width", s.w)] {
        if size % divisor != 0 {
            return Err(Error::NotDivisible {
                op: "forward",
                axis,
                size,
                divisor,
                hint: " (resample the volume to a compatible grid first)",
            });
        }
    }
    Ok(())
}

fn kernel_from_store(store: &WeightStore, name: &str) -> Result<crate::tensor::ConvKernel3> {
    let w = store.param(&format!("{name}.weight"))?;
    let b = store.param(&format!("{name}.bias"))?;
    crate::tensor::ConvKernel3::new(w.shape[0], w.shape[1], w.shape[2], w.data.clone(), b.data.clone())
}

/// Inference forward pass. Probabilities out: one sigmoid channel for the
/// streamlined variant, a two-channel softmax for the baseline.
/// Intermediates are dropped as soon as possible; safe to call concurrently
/// on a shared store.
pub fn forward_infer(store: &WeightStore, config: &ModelConfig, input: &Tensor5) -> Result<Tensor5> {
    check_input(config, input)?;
    let levels = config.levels();
    let mut skips: Vec<Tensor5> = Vec::with_capacity(levels);
    let mut cur = input.clone();
    for l in 0..levels {
        let k1 = kernel_from_store(store, &format!("enc{l}.conv1"))?;
        cur = ops::relu(&ops::conv3d(&cur, &k1, Padding::Same)?);
        let k2 = kernel_from_store(store, &format!("enc{l}.conv2"))?;
        cur = ops::relu(&ops::conv3d(&cur, &k2, Padding::Same)?);
        skips.push(cur.clone());
        let (pooled, _) = ops::maxpool3d(&cur)?;
        cur = pooled;
        if config.use_batchnorm {
            let mean: Vec<f64> = store
                .param(&format!("enc{l}.bn.running_mean"))?
                .data
                .iter()
                .map(|&v| v as f64)
                .collect();
            let var: Vec<f64> = store
                .param(&format!("enc{l}.bn.running_var"))?
                .data
                .iter()
                .map(|&v| v as f64)
                .collect();
            cur = normalize(
                &cur,
                &mean,
                &var,
                &store.param(&format!("enc{l}.bn.scale"))?.data,
                &store.param(&format!("enc{l}.bn.shift"))?.data,
                BN_EPSILON,
            );
        }
    }
    let kb = kernel_from_store(store, "bottleneck.conv")?;
    cur = ops::relu(&ops::conv3d(&cur, &kb, Padding::Same)?);
    for l in (0..levels).rev() {
        cur = ops::upsample_nearest3d(&cur);
        let skip = skips.pop().expect("one skip per level");
        cur = ops::concat_channels(&cur, &skip)?;
        drop(skip);
        let kd = kernel_from_store(store, &format!("dec{l}.conv"))?;
        cur = ops::relu(&ops::conv3d(&cur, &kd, Padding::Same)?);
    }
    let kh = kernel_from_store(store, "head.conv")?;
    let logits = ops::conv3d(&cur, &kh, Padding::Same)?;
    drop(cur);
    Ok(match config.head {
        HeadKind::Sigmoid1 => ops::sigmoid(&logits),
        HeadKind::Softmax2 => ops::softmax_channels(&logits),
    })
}

/// Pending running-statistics update produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub store_index: usize,
    pub values: Vec<f32>,
}

/// Tape parameter bound to its store slot.
#[derive(Debug, Clone, Copy)]
pub struct TapeParam {
    pub tape_id: ParamId,
    pub store_index: usize,
}

pub struct TrainGraph {
    pub tape: Tape,
    pub input: TensorId,
    /// Head output before the activation.
    pub logits: TensorId,
    /// Sigmoid output for the streamlined head; equals `logits` for the
    /// baseline, whose softmax is fused into the loss.
    pub output: TensorId,
    pub bn_updates: Vec<BnUpdate>,
    pub params: Vec<TapeParam>,
}

/// The tape-resident part of a training forward pass.
pub struct RecordedForward {
    pub logits: TensorId,
    pub output: TensorId,
    pub bn_updates: Vec<BnUpdate>,
    pub params: Vec<TapeParam>,
}

/// Training forward pass recorded on a fresh tape.
pub fn forward_train(
    store: &WeightStore,
    config: &ModelConfig,
    input: Tensor5,
) -> Result<TrainGraph> {
    check_input(config, &input)?;
    let mut tape = Tape::new();
    let input_id = tape.leaf(input);
    let recorded = record_forward(&mut tape, store, config, input_id)?;
    Ok(TrainGraph {
        tape,
        input: input_id,
        logits: recorded.logits,
        output: recorded.output,
        bn_updates: recorded.bn_updates,
        params: recorded.params,
    })
}

/// Records the network on an existing tape from an existing input leaf;
/// used by training and by gradient checks that wrap the whole net.
pub fn record_forward(
    tape: &mut Tape,
    store: &WeightStore,
    config: &ModelConfig,
    input_id: TensorId,
) -> Result<RecordedForward> {
    check_input(config, tape.value(input_id))?;
    let levels = config.levels();
    let mut params = Vec::new();
    let mut bn_updates = Vec::new();

    let bind = |tape: &mut Tape, params: &mut Vec<TapeParam>, name: &str| -> Result<ParamId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Usage(format!("missing parameter '{name}'")))?;
        let id = tape.param(store.params()[idx].data.clone());
        params.push(TapeParam {
            tape_id: id,
            store_index: idx,
        });
        Ok(id)
    };

    let mut cur = input_id;
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        for conv in ["conv1", "conv2"] {
            let w = bind(tape, &mut params, &format!("enc{l}.{conv}.weight"))?;
            let b = bind(tape, &mut params, &format!("enc{l}.{conv}.bias"))?;
            let out_c = store.param(&format!("enc{l}.{conv}.weight"))?.shape[0];
            cur = tape.conv3d(cur, w, b, out_c, 3, Padding::Same)?;
            cur = tape.relu(cur);
        }
        skips.push(cur);
        cur = tape.maxpool(cur)?;
        if config.use_batchnorm {
            let scale = bind(tape, &mut params, &format!("enc{l}.bn.scale"))?;
            let shift = bind(tape, &mut params, &format!("enc{l}.bn.shift"))?;
            let (normed, stats) = tape.batchnorm_train(cur, scale, shift, BN_EPSILON)?;
            cur = normed;
            bn_updates.extend(running_updates(store, l, &stats)?);
        }
    }
    {
        let w = bind(tape, &mut params, "bottleneck.conv.weight")?;
        let b = bind(tape, &mut params, "bottleneck.conv.bias")?;
        cur = tape.conv3d(cur, w, b, config.bottleneck, 3, Padding::Same)?;
        cur = tape.relu(cur);
    }
    for l in (0..levels).rev() {
        cur = tape.upsample(cur);
        cur = tape.concat(cur, skips[l])?;
        let w = bind(tape, &mut params, &format!("dec{l}.conv.weight"))?;
        let b = bind(tape, &mut params, &format!("dec{l}.conv.bias"))?;
        cur = tape.conv3d(cur, w, b, config.encoder_filters[l], 3, Padding::Same)?;
        cur = tape.relu(cur);
    }
    let w = bind(tape, &mut params, "head.conv.weight")?;
    let b = bind(tape, &mut params, "head.conv.bias")?;
    let logits = tape.conv3d(cur, w, b, config.head.channels(), 1, Padding::Same)?;
    let output = match config.head {
        HeadKind::Sigmoid1 => tape.sigmoid(logits),
        HeadKind::Softmax2 => logits,
    };

    Ok(RecordedForward {
        logits,
        output,
        bn_updates,
        params,
    })
}

fn running_updates(store: &WeightStore, level: usize, stats: &BatchStats) -> Result<Vec<BnUpdate>> {
    let mut updates = Vec::with_capacity(2);
    for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
        let name = format!("enc{level}.bn.{suffix}");
        let idx = store
            .index_of(&name)
            .ok_or_else(|| Error::Usage(format!("missing parameter '{name}'")))?;
        let old = &store.params()[idx].data;
        let values = old
            .iter()
            .zip(batch.iter())
            .map(|(&r, &b)| ((1.0 - BN_MOMENTUM) * r as f64 + BN_MOMENTUM * b) as f32)
            .collect();
        updates.push(BnUpdate {
            store_index: idx,
            values,
        });
    }
    Ok(updates)
}

/// Plain-text per-layer summary with total and published reference counts.
pub fn model_summary(config: &ModelConfig, store: &WeightStore) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "variant: {}", config.variant.as_str());
    let _ = writeln!(out, "{:<28} {:<20} {:>12}", "layer", "shape", "params");
    for p in store.params() {
        let shape = p
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let _ = writeln!(out, "{:<28} {:<20} {:>12}", p.name, shape, p.data.len());
    }
    let total = store.total_count();
    let _ = writeln!(out, "total parameters: {total}");
    let reference = match config.variant {
        Variant::DeepDefacer => crate::reference::DEEPDEFACER,
        Variant::Baseline => crate::reference::BASELINE_UNET3D,
    };
    let _ = writeln!(
        out,
        "published reference count ({}): {} (delta {:+})",
        reference.name,
        reference.parameters,
        total as i64 - reference.parameters as i64
    );
    out
}
