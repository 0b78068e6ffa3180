//! Dense rank-5 tensors and the differentiable ops a 3D U-Net needs.
//!
//! Layout is row-major `(N, C, D, H, W)` with 32-bit floats; convolution
//! accumulates in 64-bit per output voxel and stores back as 32-bit.

mod kernels;
pub mod ops;
mod tape;

pub mod gradcheck;

pub use tape::{BatchStats, ParamId, ScalarFn, Tape, TensorId};
pub(crate) use tape::{batch_moments, normalize};

use crate::error::{Error, Result};

/// Shape of a rank-5 tensor: batch, channels, depth, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, d, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    /// Number of voxels in one (batch, channel) slice.
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    /// Flat offset of the (n, c) slice start.
    pub fn slice_offset(&self, n: usize, c: usize) -> usize {
        (n * self.c + c) * self.spatial()
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{},{},{})",
            self.n, self.c, self.d, self.h, self.w
        )
    }
}

/// Dense rank-5 tensor, row-major in (N, C, D, H, W) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f32>,
    /// Gradient buffer of identical shape, populated by the tape.
    pub grad: Option<Vec<f32>>,
}

impl Tensor5 {
    pub fn new(shape: Shape5, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DimMismatch {
                op: "Tensor5::new",
                axis: "flat",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor5 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 {
            shape,
            data: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape5, value: f32) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut(usize) -> f32) -> Self {
        let data = (0..shape.numel()).map(|i| f(i)).collect();
        Tensor5 {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat index of (n, c, z, y, x).
    pub fn index(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((n * s.c + c) * s.d + z) * s.h + y) * s.w + x
    }

    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, z, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, z, y, x);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution padding mode. Stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves spatial dims (requires odd kernel).
    Same,
    /// No padding; output spatial dims shrink by k-1.
    Valid,
}

/// A 3D convolution kernel with per-output-channel bias.
///
/// Weights are row-major in (out, in, kd, kh, kw); body layers use k = 3,
/// the head layer k = 1.
#[derive(Debug, Clone)]
pub struct ConvKernel3 {
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub weight_grad: Vec<f32>,
    pub bias_grad: Vec<f32>,
}

impl ConvKernel3 {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        k: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let expect = out_channels * in_channels * k * k * k;
        if weights.len() != expect {
            return Err(Error::DimMismatch {
                op: "ConvKernel3::new",
                axis: "weights",
                expected: expect,
                actual: weights.len(),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::DimMismatch {
                op: "ConvKernel3::new",
                axis: "bias",
                expected: out_channels,
                actual: bias.len(),
            });
        }
        let wn = weights.len();
        Ok(ConvKernel3 {
            out_channels,
            in_channels,
            k,
            weights,
            bias,
            weight_grad: vec![0.0; wn],
            bias_grad: vec![0.0; out_channels],
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        let wn = out_channels * in_channels * k * k * k;
        ConvKernel3 {
            out_channels,
            in_channels,
            k,
            weights: vec![0.0; wn],
            bias: vec![0.0; out_channels],
            weight_grad: vec![0.0; wn],
            bias_grad: vec![0.0; out_channels],
        }
    }

    /// Flat index of weight (o, i, kz, ky, kx).
    pub fn widx(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((o * self.in_channels + i) * self.k + kz) * self.k + ky) * self.k + kx
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}
