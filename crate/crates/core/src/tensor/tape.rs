//! Reverse-mode tape over the tensor ops.
//!
//! The tape owns every intermediate tensor plus a copy of each parameter used
//! in the step. Backward walks the op records in exact reverse execution
//! order and accumulates gradients additively into shared inputs, so skip
//! connections and parameter reuse come out right.

use super::ops;
use super::{ConvKernel3, Padding, Tensor5};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Per-channel statistics of a batch-norm forward pass in train mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Node {
    value: Tensor5,
    grad: Option<Vec<f32>>,
    op: Op,
}

struct ParamSlot {
    data: Vec<f32>,
    grad: Vec<f32>,
}

enum Op {
    Leaf,
    Conv {
        input: TensorId,
        weight: ParamId,
        bias: ParamId,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        padding: Padding,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    MaxPool {
        input: TensorId,
        argmax: Vec<u32>,
    },
    Upsample {
        input: TensorId,
    },
    Concat {
        a: TensorId,
        b: TensorId,
        c_a: usize,
        c_b: usize,
    },
    BatchNorm {
        input: TensorId,
        scale: ParamId,
        shift: ParamId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Scale {
        input: TensorId,
        factor: f32,
    },
}

/// A scalar-valued head over a tape output, with the f64 value and the seed
/// gradient d(value)/d(output) needed to start backward.
pub struct ScalarFn {
    pub value: f64,
    pub output: TensorId,
    pub seed: Tensor5,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<ParamSlot>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&mut self, value: Tensor5) -> TensorId {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter buffer for this step; its gradient is
    /// accumulated during backward.
    pub fn param(&mut self, data: Vec<f32>) -> ParamId {
        let n = data.len();
        self.params.push(ParamSlot {
            data,
            grad: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    fn push(&mut self, value: Tensor5, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor5 {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn param_data(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn param_grad(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].grad
    }

    fn kernel_of(
        &self,
        weight: ParamId,
        bias: ParamId,
        out_channels: usize,
        in_channels: usize,
        k: usize,
    ) -> Result<ConvKernel3> {
        ConvKernel3::new(
            out_channels,
            in_channels,
            k,
            self.params[weight.0].data.clone(),
            self.params[bias.0].data.clone(),
        )
    }

    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: ParamId,
        bias: ParamId,
        out_channels: usize,
        k: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let in_channels = self.value(input).shape().c;
        let kernel = self.kernel_of(weight, bias, out_channels, in_channels, k)?;
        let out = ops::conv3d(self.value(input), &kernel, padding)?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                in_channels,
                out_channels,
                k,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input })
    }

    pub fn maxpool(&mut self, input: TensorId) -> Result<TensorId> {
        let (out, argmax) = ops::maxpool3d(self.value(input))?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn upsample(&mut self, input: TensorId) -> TensorId {
        let out = ops::upsample_nearest3d(self.value(input));
        self.push(out, Op::Upsample { input })
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let (c_a, c_b) = (self.value(a).shape().c, self.value(b).shape().c);
        Ok(self.push(out, Op::Concat { a, b, c_a, c_b }))
    }

    pub fn scale(&mut self, input: TensorId, factor: f32) -> TensorId {
        let src = self.value(input);
        let out = Tensor5::new(
            src.shape(),
            src.data().iter().map(|&x| x * factor).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Scale { input, factor })
    }

    /// Batch normalization in train mode: normalizes with batch statistics
    /// and returns them so the caller can update running estimates.
    pub fn batchnorm_train(
        &mut self,
        input: TensorId,
        scale: ParamId,
        shift: ParamId,
        eps: f64,
    ) -> Result<(TensorId, BatchStats)> {
        let shape = self.value(input).shape();
        let c = shape.c;
        if self.params[scale.0].data.len() != c || self.params[shift.0].data.len() != c {
            return Err(Error::DimMismatch {
                op: "batchnorm",
                axis: "channel",
                expected: c,
                actual: self.params[scale.0].data.len(),
            });
        }
        let m = shape.n * shape.spatial();
        if m == 0 {
            return Err(Error::Usage("batchnorm over an empty batch".into()));
        }
        let (mean, var) = batch_moments(self.value(input));
        let out = {
            let input_t = self.value(input);
            let gamma = &self.params[scale.0].data;
            let beta = &self.params[shift.0].data;
            normalize(input_t, &mean, &var, gamma, beta, eps)
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let id = self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                var,
                eps,
            },
        );
        Ok((id, stats))
    }

    /// Hash of the piecewise-linear active set: ReLU input signs and pooling
    /// argmax choices. Central differences are valid for a probe only when
    /// this signature is identical at both evaluation points.
    pub fn kink_signature(&self) -> u64 {
        // FNV-1a over packed ReLU sign bits and argmax indices
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    let mut acc = 0u8;
                    let mut nbits = 0u8;
                    for &v in self.nodes[input.0].value.data() {
                        acc = (acc << 1) | (v > 0.0) as u8;
                        nbits += 1;
                        if nbits == 8 {
                            feed(acc);
                            acc = 0;
                            nbits = 0;
                        }
                    }
                    if nbits > 0 {
                        feed(acc);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &i in argmax {
                        for b in i.to_le_bytes() {
                            feed(b);
                        }
                    }
                }
                _ => {}
            }
        }
        hash
    }

    /// Scalar head: f64 sum of the output tensor, seed gradient of ones.
    pub fn scalar_sum(&self, output: TensorId) -> ScalarFn {
        let t = self.value(output);
        let value: f64 = t.data().iter().map(|&v| v as f64).sum();
        ScalarFn {
            value,
            output,
            seed: Tensor5::filled(t.shape(), 1.0),
        }
    }

    /// Runs the backward pass from `output`, seeded with d(loss)/d(output).
    pub fn backward(&mut self, output: TensorId, seed: &Tensor5) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward from unknown tape entry {}",
                output.0
            )));
        }
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::DimMismatch {
                op: "tape::backward",
                axis: "flat",
                expected: self.nodes[output.0].value.numel(),
                actual: seed.numel(),
            });
        }
        self.nodes[output.0].grad = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let shape = self.nodes[i].value.shape();
            let upstream = Tensor5::new(shape, grad)?;
            // Ops are matched by value where cheap; conv parameters are
            // resolved through their slots.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    in_channels,
                    out_channels,
                    k,
                    padding,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let kernel =
                        self.kernel_of(weight, bias, *out_channels, *in_channels, *k)?;
                    let padding = *padding;
                    let grads = ops::conv3d_backward(
                        &self.nodes[input.0].value,
                        &kernel,
                        padding,
                        &upstream,
                    )?;
                    acc_tensor(&mut self.nodes[input.0].grad, grads.input_grad.data());
                    acc_slice(&mut self.params[weight.0].grad, &grads.weight_grad);
                    acc_slice(&mut self.params[bias.0].grad, &grads.bias_grad);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let g = ops::relu_backward(&self.nodes[input.0].value, &upstream);
                    acc_tensor(&mut self.nodes[input.0].grad, g.data());
                }
                Op::Sigmoid { input } => {
                    let input = *input;
                    let g = ops::sigmoid_backward(&self.nodes[i].value, &upstream);
                    acc_tensor(&mut self.nodes[input.0].grad, g.data());
                }
                Op::MaxPool { input, argmax } => {
                    let input = *input;
                    let g = ops::maxpool3d_backward(
                        self.nodes[input.0].value.shape(),
                        argmax,
                        &upstream,
                    )?;
                    acc_tensor(&mut self.nodes[input.0].grad, g.data());
                }
                Op::Upsample { input } => {
                    let input = *input;
                    let g = ops::upsample_nearest3d_backward(&upstream)?;
                    acc_tensor(&mut self.nodes[input.0].grad, g.data());
                }
                Op::Concat { a, b, c_a, c_b } => {
                    let (a, b) = (*a, *b);
                    let (ga, gb) = ops::concat_channels_backward(&upstream, *c_a, *c_b)?;
                    acc_tensor(&mut self.nodes[a.0].grad, ga.data());
                    acc_tensor(&mut self.nodes[b.0].grad, gb.data());
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    mean,
                    var,
                    eps,
                } => {
                    let (input, scale, shift) = (*input, *scale, *shift);
                    let (gx, ggamma, gbeta) = batchnorm_backward(
                        &self.nodes[input.0].value,
                        &self.params[scale.0].data,
                        mean,
                        var,
                        *eps,
                        &upstream,
                    );
                    acc_tensor(&mut self.nodes[input.0].grad, &gx);
                    acc_slice(&mut self.params[scale.0].grad, &ggamma);
                    acc_slice(&mut self.params[shift.0].grad, &gbeta);
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let g: Vec<f32> = upstream.data().iter().map(|&v| v * factor).collect();
                    acc_tensor(&mut self.nodes[input.0].grad, &g);
                }
            }
        }
        Ok(())
    }
}

fn acc_tensor(target: &mut Option<Vec<f32>>, src: &[f32]) {
    match target {
        Some(t) => {
            for (a, &b) in t.iter_mut().zip(src.iter()) {
                *a += b;
            }
        }
        None => *target = Some(src.to_vec()),
    }
}

fn acc_slice(target: &mut [f32], src: &[f32]) {
    for (a, &b) in target.iter_mut().zip(src.iter()) {
        *a += b;
    }
}

/// Per-channel mean and biased variance over (N, D, H, W).
pub(crate) fn batch_moments(input: &Tensor5) -> (Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let spatial = s.spatial();
    let m = (s.n * spatial) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for c in 0..s.c {
        let mut acc = 0.0f64;
        for n in 0..s.n {
            let base = s.slice_offset(n, c);
            for &v in &input.data()[base..base + spatial] {
                acc += v as f64;
            }
        }
        mean[c] = acc / m;
        let mut acc2 = 0.0f64;
        for n in 0..s.n {
            let base = s.slice_offset(n, c);
            for &v in &input.data()[base..base + spatial] {
                let d = v as f64 - mean[c];
                acc2 += d * d;
            }
        }
        var[c] = acc2 / m;
    }
    (mean, var)
}

pub(crate) fn normalize(
    input: &Tensor5,
    mean: &[f64],
    var: &[f64],
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Tensor5 {
    let s = input.shape();
    let spatial = s.spatial();
    let mut out = vec![0.0f32; s.numel()];
    for c in 0..s.c {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let (g, b) = (gamma[c] as f64, beta[c] as f64);
        for n in 0..s.n {
            let base = s.slice_offset(n, c);
            for v in 0..spatial {
                let x = input.data()[base + v] as f64;
                out[base + v] = ((x - mean[c]) * inv_std * g + b) as f32;
            }
        }
    }
    Tensor5::new(s, out).expect("same shape")
}

fn batchnorm_backward(
    input: &Tensor5,
    gamma: &[f32],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    upstream: &Tensor5,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let s = input.shape();
    let spatial = s.spatial();
    let m = (s.n * spatial) as f64;
    let mut gx = vec![0.0f32; s.numel()];
    let mut ggamma = vec![0.0f32; s.c];
    let mut gbeta = vec![0.0f32; s.c];

    for c in 0..s.c {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..s.n {
            let base = s.slice_offset(n, c);
            for v in 0..spatial {
                let g = upstream.data()[base + v] as f64;
                let xhat = (input.data()[base + v] as f64 - mean[c]) * inv_std;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        ggamma[c] = sum_gx as f32;
        gbeta[c] = sum_g as f32;

        let gm = gamma[c] as f64;
        for n in 0..s.n {
            let base = s.slice_offset(n, c);
            for v in 0..spatial {
                let g = upstream.data()[base + v] as f64;
                let xhat = (input.data()[base + v] as f64 - mean[c]) * inv_std;
                gx[base + v] =
                    (gm * inv_std * (g - sum_g / m - xhat * sum_gx / m)) as f32;
            }
        }
    }
    (gx, ggamma, gbeta)
}
