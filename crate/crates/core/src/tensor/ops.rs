//! Forward and backward implementations of the network ops.
//!
//! Every op is a pure function; parallel sections split work over disjoint
//! (batch, channel) slices and keep a fixed per-voxel accumulation order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::kernels::{dot_body, have_avx2_fma, saxpy_body};
use super::{ConvKernel3, Padding, Shape5, Tensor5};
use crate::error::{Error, Result};

pub struct ConvGrads {
    pub input_grad: Tensor5,
    pub weight_grad: Vec<f32>,
    pub bias_grad: Vec<f32>,
}

fn conv_out_dims(input: Shape5, k: usize, padding: Padding) -> Result<[usize; 3]> {
    match padding {
        Padding::Same => {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "same-padded convolution requires an odd kernel, got {k}"
                )));
            }
            Ok([input.d, input.h, input.w])
        }
        Padding::Valid => {
            for (axis, size) in [("depth", input.d), ("height", input.h), ("width", input.w)] {
                if size < k {
                    return Err(Error::DimMismatch {
                        op: "conv3d",
                        axis,
                        expected: k,
                        actual: size,
                    });
                }
            }
            Ok([input.d - k + 1, input.h - k + 1, input.w - k + 1])
        }
    }
}

/// Kernel tap offset relative to the output coordinate.
fn tap_offset(kpos: usize, k: usize, padding: Padding) -> isize {
    match padding {
        Padding::Same => kpos as isize - (k / 2) as isize,
        Padding::Valid => kpos as isize,
    }
}


/// Forward slab worker: computes output rows for all channels over a fixed
/// depth range, written in (channel, local z, y, x) order. The body is
/// inlined into a feature-gated wrapper so the row kernels vectorize without
/// per-row dispatch.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_slab_body(
    kernel: &ConvKernel3,
    padding: Padding,
    [d, h, w]: [usize; 3],
    [_od, oh, ow]: [usize; 3],
    batch_in: &[f32],
    (z0, z1): (usize, usize),
    slab: &mut [f32],
) {
    let k = kernel.k;
    let c_in = kernel.in_channels;
    let c_out = kernel.out_channels;
    let spatial_in = d * h * w;
    let mut acc = vec![0.0f64; C_BLOCK * ow];
    for z in z0..z1 {
        for y in 0..oh {
            for ob in (0..c_out).step_by(C_BLOCK) {
                let oe = (ob + C_BLOCK).min(c_out);
                let width = oe - ob;
                for (slot, o) in (ob..oe).enumerate() {
                    acc[slot * ow..(slot + 1) * ow].fill(kernel.bias[o] as f64);
                }
                for i in 0..c_in {
                    let islice = &batch_in[i * spatial_in..][..spatial_in];
                    for kz in 0..k {
                        let dz = tap_offset(kz, k, padding);
                        let iz = z as isize + dz;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let dy = tap_offset(ky, k, padding);
                            let iy = y as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = (iz as usize * h + iy as usize) * w;
                            for kx in 0..k {
                                let dx = tap_offset(kx, k, padding);
                                let x0 = 0.max(-dx) as usize;
                                let x1 = (ow as isize).min(w as isize - dx) as usize;
                                if x0 >= x1 {
                                    continue;
                                }
                                let src0 = (irow as isize + x0 as isize + dx) as usize;
                                let src = &islice[src0..src0 + (x1 - x0)];
                                for (slot, o) in (ob..oe).enumerate() {
                                    let wgt =
                                        kernel.weights[kernel.widx(o, i, kz, ky, kx)] as f64;
                                    saxpy_body(&mut acc[slot * ow + x0..slot * ow + x1], src, wgt);
                                }
                            }
                        }
                    }
                }
                for slot in 0..width {
                    let orow = (((ob + slot) * (z1 - z0) + (z - z0)) * oh + y) * ow;
                    for x in 0..ow {
                        slab[orow + x] = acc[slot * ow + x] as f32;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_slab_avx2(
    kernel: &ConvKernel3,
    padding: Padding,
    dims: [usize; 3],
    out_dims: [usize; 3],
    batch_in: &[f32],
    z_range: (usize, usize),
    slab: &mut [f32],
) {
    forward_slab_body(kernel, padding, dims, out_dims, batch_in, z_range, slab)
}

#[allow(clippy::too_many_arguments)]
fn forward_slab(
    kernel: &ConvKernel3,
    padding: Padding,
    dims: [usize; 3],
    out_dims: [usize; 3],
    batch_in: &[f32],
    z_range: (usize, usize),
    slab: &mut [f32],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if have_avx2_fma() {
            unsafe {
                forward_slab_avx2(kernel, padding, dims, out_dims, batch_in, z_range, slab)
            };
            return;
        }
    }
    forward_slab_body(kernel, padding, dims, out_dims, batch_in, z_range, slab)
}


/// Input-gradient slab worker over a fixed input-depth range, channel
/// blocked; same dispatch scheme as the forward slab.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn input_grad_slab_body(
    kernel: &ConvKernel3,
    padding: Padding,
    [_d, h, w]: [usize; 3],
    [od, oh, ow]: [usize; 3],
    up_batch: &[f32],
    (z0, z1): (usize, usize),
    slab: &mut [f32],
) {
    let k = kernel.k;
    let c_in = kernel.in_channels;
    let c_out = kernel.out_channels;
    let spatial_out = od * oh * ow;
    let mut acc = vec![0.0f64; C_BLOCK * w];
    for zi in z0..z1 {
        for yi in 0..h {
            for ib in (0..c_in).step_by(C_BLOCK) {
                let ie = (ib + C_BLOCK).min(c_in);
                let width = ie - ib;
                acc[..width * w].fill(0.0);
                for o in 0..c_out {
                    let uslice = &up_batch[o * spatial_out..][..spatial_out];
                    for kz in 0..k {
                        let dz = tap_offset(kz, k, padding);
                        let zo = zi as isize - dz;
                        if zo < 0 || zo >= od as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let dy = tap_offset(ky, k, padding);
                            let yo = yi as isize - dy;
                            if yo < 0 || yo >= oh as isize {
                                continue;
                            }
                            let urow = (zo as usize * oh + yo as usize) * ow;
                            for kx in 0..k {
                                let dx = tap_offset(kx, k, padding);
                                // input x feeds output x - dx
                                let x0 = 0.max(dx) as usize;
                                let x1 = (w as isize).min(ow as isize + dx) as usize;
                                if x0 >= x1 {
                                    continue;
                                }
                                let src0 = (urow as isize + x0 as isize - dx) as usize;
                                let src = &uslice[src0..src0 + (x1 - x0)];
                                for (slot, i) in (ib..ie).enumerate() {
                                    let wgt =
                                        kernel.weights[kernel.widx(o, i, kz, ky, kx)] as f64;
                                    saxpy_body(&mut acc[slot * w + x0..slot * w + x1], src, wgt);
                                }
                            }
                        }
                    }
                }
                for slot in 0..width {
                    let irow = (((ib + slot) * (z1 - z0) + (zi - z0)) * h + yi) * w;
                    for x in 0..w {
                        slab[irow + x] = acc[slot * w + x] as f32;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn input_grad_slab_avx2(
    kernel: &ConvKernel3,
    padding: Padding,
    dims: [usize; 3],
    out_dims: [usize; 3],
    up_batch: &[f32],
    z_range: (usize, usize),
    slab: &mut [f32],
) {
    input_grad_slab_body(kernel, padding, dims, out_dims, up_batch, z_range, slab)
}

#[allow(clippy::too_many_arguments)]
fn input_grad_slab(
    kernel: &ConvKernel3,
    padding: Padding,
    dims: [usize; 3],
    out_dims: [usize; 3],
    up_batch: &[f32],
    z_range: (usize, usize),
    slab: &mut [f32],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if have_avx2_fma() {
            unsafe {
                input_grad_slab_avx2(kernel, padding, dims, out_dims, up_batch, z_range, slab)
            };
            return;
        }
    }
    input_grad_slab_body(kernel, padding, dims, out_dims, up_batch, z_range, slab)
}

/// Weight/bias gradient partials for one output-depth slab.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn weight_grad_slab_body(
    kernel: &ConvKernel3,
    padding: Padding,
    [d, h, w]: [usize; 3],
    [od, oh, ow]: [usize; 3],
    in_batch: &[f32],
    up_batch: &[f32],
    (z0, z1): (usize, usize),
    wpart: &mut [f64],
    bpart: &mut [f64],
) {
    let k = kernel.k;
    let c_in = kernel.in_channels;
    let c_out = kernel.out_channels;
    let taps = k * k * k;
    let per_o = c_in * taps;
    let spatial_in = d * h * w;
    let spatial_out = od * oh * ow;
    for zo in z0..z1 {
        for yo in 0..oh {
            let urow_base = (zo * oh + yo) * ow;
            for o in 0..c_out {
                let urow = &up_batch[o * spatial_out + urow_base..][..ow];
                let mut bacc = 0.0f64;
                for &v in urow {
                    bacc += v as f64;
                }
                bpart[o] += bacc;
            }
            for kz in 0..k {
                let dz = tap_offset(kz, k, padding);
                let iz = zo as isize + dz;
                if iz < 0 || iz >= d as isize {
                    continue;
                }
                for ky in 0..k {
                    let dy = tap_offset(ky, k, padding);
                    let iy = yo as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow_base = (iz as usize * h + iy as usize) * w;
                    for kx in 0..k {
                        let dx = tap_offset(kx, k, padding);
                        let x0 = 0.max(-dx) as usize;
                        let x1 = (ow as isize).min(w as isize - dx) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let src0 = (irow_base as isize + x0 as isize + dx) as usize;
                        let tap = (kz * k + ky) * k + kx;
                        for i in 0..c_in {
                            let src = &in_batch[i * spatial_in + src0..][..x1 - x0];
                            for o in 0..c_out {
                                let urow =
                                    &up_batch[o * spatial_out + urow_base + x0..][..x1 - x0];
                                wpart[o * per_o + i * taps + tap] += dot_body(urow, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn weight_grad_slab_avx2(
    kernel: &ConvKernel3,
    padding: Padding,
    dims: [usize; 3],
    out_dims: [usize; 3],
    in_batch: &[f32],
    up_batch: &[f32],
    z_range: (usize, usize),
    wpart: &mut [f64],
    bpart: &mut [f64],
) {
    weight_grad_slab_body(
        kernel, padding, dims, out_dims, in_batch, up_batch, z_range, wpart, bpart,
    )
}

#[allow(clippy::too_many_arguments)]
fn weight_grad_slab(
    kernel: &ConvKernel3,
    padding: Padding,
    dims: [usize; 3],
    out_dims: [usize; 3],
    in_batch: &[f32],
    up_batch: &[f32],
    z_range: (usize, usize),
    wpart: &mut [f64],
    bpart: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if have_avx2_fma() {
            unsafe {
                weight_grad_slab_avx2(
                    kernel, padding, dims, out_dims, in_batch, up_batch, z_range, wpart, bpart,
                )
            };
            return;
        }
    }
    weight_grad_slab_body(
        kernel, padding, dims, out_dims, in_batch, up_batch, z_range, wpart, bpart,
    )
}

/// Fixed-depth work chunks: boundaries depend only on the tensor, never on
/// the thread count, so parallel results are schedule-independent.
const Z_CHUNK: usize = 4;
/// Output channels processed per input-row pass (input-row reuse).
const C_BLOCK: usize = 8;

fn z_chunks(depth: usize) -> Vec<(usize, usize)> {
    (0..depth)
        .step_by(Z_CHUNK)
        .map(|z0| (z0, (z0 + Z_CHUNK).min(depth)))
        .collect()
}

/// 3D convolution, stride 1. Accumulates in f64 per output voxel, in a
/// fixed (in-channel, kz, ky, kx) tap order.
pub fn conv3d(input: &Tensor5, kernel: &ConvKernel3, padding: Padding) -> Result<Tensor5> {
    let ishape = input.shape();
    if ishape.c != kernel.in_channels {
        return Err(Error::DimMismatch {
            op: "conv3d",
            axis: "channel",
            expected: kernel.in_channels,
            actual: ishape.c,
        });
    }
    let [od, oh, ow] = conv_out_dims(ishape, kernel.k, padding)?;
    let oshape = Shape5::new(ishape.n, kernel.out_channels, od, oh, ow);
    let (d, h, w) = (ishape.d, ishape.h, ishape.w);
    let c_out = kernel.out_channels;
    let spatial_in = ishape.spatial();
    let spatial_out = oshape.spatial();

    let mut out = vec![0.0f32; oshape.numel()];
    for n in 0..ishape.n {
        let batch_in = &input.data()[n * ishape.c * spatial_in..][..ishape.c * spatial_in];
        // each task computes all channels for a fixed slab of output depth
        let slabs: Vec<Vec<f32>> = z_chunks(od)
            .par_iter()
            .map(|&(z0, z1)| {
                let mut slab = vec![0.0f32; c_out * (z1 - z0) * oh * ow];
                forward_slab(
                    kernel,
                    padding,
                    [d, h, w],
                    [od, oh, ow],
                    batch_in,
                    (z0, z1),
                    &mut slab,
                );
                slab
            })
            .collect();

        let out_batch = &mut out[n * c_out * spatial_out..][..c_out * spatial_out];
        for (&(z0, z1), slab) in z_chunks(od).iter().zip(slabs.iter()) {
            let rows = (z1 - z0) * oh * ow;
            for o in 0..c_out {
                let dst = (o * od + z0) * oh * ow;
                out_batch[dst..dst + rows].copy_from_slice(&slab[o * rows..(o + 1) * rows]);
            }
        }
    }

    Tensor5::new(oshape, out)
}

/// Gradients of `conv3d` with respect to input, weights and bias.
pub fn conv3d_backward(
    input: &Tensor5,
    kernel: &ConvKernel3,
    padding: Padding,
    upstream: &Tensor5,
) -> Result<ConvGrads> {
    let ishape = input.shape();
    let [od, oh, ow] = conv_out_dims(ishape, kernel.k, padding)?;
    let expected = Shape5::new(ishape.n, kernel.out_channels, od, oh, ow);
    if upstream.shape() != expected {
        return Err(Error::DimMismatch {
            op: "conv3d_backward",
            axis: "flat",
            expected: expected.numel(),
            actual: upstream.numel(),
        });
    }
    let (d, h, w) = (ishape.d, ishape.h, ishape.w);
    let k = kernel.k;
    let spatial_in = ishape.spatial();
    let spatial_out = expected.spatial();

    // d(loss)/d(input): correlate upstream with the flipped kernel, blocked
    // over input channels with fixed-depth parallel slabs.
    let c_in = kernel.in_channels;
    let c_out = kernel.out_channels;
    let mut input_grad = vec![0.0f32; ishape.numel()];
    for n in 0..ishape.n {
        let up_batch = &upstream.data()[n * c_out * spatial_out..][..c_out * spatial_out];
        let slabs: Vec<Vec<f32>> = z_chunks(d)
            .par_iter()
            .map(|&(z0, z1)| {
                let mut slab = vec![0.0f32; c_in * (z1 - z0) * h * w];
                input_grad_slab(
                    kernel,
                    padding,
                    [d, h, w],
                    [od, oh, ow],
                    up_batch,
                    (z0, z1),
                    &mut slab,
                );
                slab
            })
            .collect();

        let grad_batch = &mut input_grad[n * c_in * spatial_in..][..c_in * spatial_in];
        for (&(z0, z1), slab) in z_chunks(d).iter().zip(slabs.iter()) {
            let rows = (z1 - z0) * h * w;
            for i in 0..c_in {
                let dst = (i * d + z0) * h * w;
                grad_batch[dst..dst + rows].copy_from_slice(&slab[i * rows..(i + 1) * rows]);
            }
        }
    }

    // d(loss)/d(weights) and d(loss)/d(bias): per-slab f64 partials reduced
    // in fixed chunk order, so the result is thread-schedule independent.
    let per_o = c_in * k * k * k;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = z_chunks(od)
        .par_iter()
        .map(|&(z0, z1)| {
            let mut wpart = vec![0.0f64; c_out * per_o];
            let mut bpart = vec![0.0f64; c_out];
            for n in 0..ishape.n {
                let up_batch =
                    &upstream.data()[n * c_out * spatial_out..][..c_out * spatial_out];
                let in_batch = &input.data()[n * c_in * spatial_in..][..c_in * spatial_in];
                weight_grad_slab(
                    kernel,
                    padding,
                    [d, h, w],
                    [od, oh, ow],
                    in_batch,
                    up_batch,
                    (z0, z1),
                    &mut wpart,
                    &mut bpart,
                );
            }
            (wpart, bpart)
        })
        .collect();

    let mut wtotal = vec![0.0f64; c_out * per_o];
    let mut btotal = vec![0.0f64; c_out];
    for (wpart, bpart) in &partials {
        for (t, &p) in wtotal.iter_mut().zip(wpart.iter()) {
            *t += p;
        }
        for (t, &p) in btotal.iter_mut().zip(bpart.iter()) {
            *t += p;
        }
    }

    Ok(ConvGrads {
        input_grad: Tensor5::new(ishape, input_grad)?,
        weight_grad: wtotal.into_iter().map(|v| v as f32).collect(),
        bias_grad: btotal.into_iter().map(|v| v as f32).collect(),
    })
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index (into the input) per output voxel; ties go to the first
/// position in (dz, dy, dx) scan order.
pub fn maxpool3d(input: &Tensor5) -> Result<(Tensor5, Vec<u32>)> {
    let s = input.shape();
    for (axis, size) in [("depth", s.d), ("height", s.h), ("width", s.w)] {
        if size % 2 != 0 {
            return Err(Error::NotDivisible {
                op: "maxpool3d",
                axis,
                size,
                divisor: 2,
                hint: " (resample the volume to even dims first)",
            });
        }
    }
    assert!(s.numel() <= u32::MAX as usize, "tensor too large for pooling index");
    let oshape = Shape5::new(s.n, s.c, s.d / 2, s.h / 2, s.w / 2);
    let spatial_in = s.spatial();
    let spatial_out = oshape.spatial();
    let (oh, ow) = (oshape.h, oshape.w);

    let mut out = vec![0.0f32; oshape.numel()];
    let mut argmax = vec![0u32; oshape.numel()];
    out.par_chunks_mut(spatial_out)
        .zip(argmax.par_chunks_mut(spatial_out))
        .enumerate()
        .for_each(|(slot, (ochunk, achunk))| {
            let base = slot * spatial_in;
            let islice = &input.data()[base..base + spatial_in];
            for zo in 0..oshape.d {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((2 * zo + dz) * s.h + (2 * yo + dy)) * s.w
                                        + (2 * xo + dx);
                                    let v = islice[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let oidx = (zo * oh + yo) * ow + xo;
                        ochunk[oidx] = best;
                        achunk[oidx] = (base + best_idx) as u32;
                    }
                }
            }
        });

    Ok((Tensor5::new(oshape, out)?, argmax))
}

/// Routes each upstream value to the voxel that won the forward max.
pub fn maxpool3d_backward(
    input_shape: Shape5,
    argmax: &[u32],
    upstream: &Tensor5,
) -> Result<Tensor5> {
    if argmax.len() != upstream.numel() {
        return Err(Error::DimMismatch {
            op: "maxpool3d_backward",
            axis: "flat",
            expected: argmax.len(),
            actual: upstream.numel(),
        });
    }
    let mut grad = vec![0.0f32; input_shape.numel()];
    for (&idx, &g) in argmax.iter().zip(upstream.data().iter()) {
        grad[idx as usize] += g;
    }
    Tensor5::new(input_shape, grad)
}

/// Nearest-neighbor upsampling by 2 in each spatial dimension.
pub fn upsample_nearest3d(input: &Tensor5) -> Tensor5 {
    let s = input.shape();
    let oshape = Shape5::new(s.n, s.c, s.d * 2, s.h * 2, s.w * 2);
    let spatial_in = s.spatial();
    let spatial_out = oshape.spatial();
    let (oh, ow) = (oshape.h, oshape.w);

    let mut out = vec![0.0f32; oshape.numel()];
    out.par_chunks_mut(spatial_out).enumerate().for_each(|(slot, chunk)| {
        let islice = &input.data()[slot * spatial_in..][..spatial_in];
        for z in 0..oshape.d {
            for y in 0..oh {
                let irow = ((z / 2) * s.h + y / 2) * s.w;
                let orow = (z * oh + y) * ow;
                for x in 0..ow {
                    chunk[orow + x] = islice[irow + x / 2];
                }
            }
        }
    });
    Tensor5::new(oshape, out).expect("shape consistent by construction")
}

/// Sums the 2x2x2 upstream block feeding each source voxel.
pub fn upsample_nearest3d_backward(upstream: &Tensor5) -> Result<Tensor5> {
    let s = upstream.shape();
    for (axis, size) in [("depth", s.d), ("height", s.h), ("width", s.w)] {
        if size % 2 != 0 {
            return Err(Error::NotDivisible {
                op: "upsample_nearest3d_backward",
                axis,
                size,
                divisor: 2,
                hint: "",
            });
        }
    }
    let ishape = Shape5::new(s.n, s.c, s.d / 2, s.h / 2, s.w / 2);
    let spatial_in = ishape.spatial();
    let spatial_out = s.spatial();

    let mut grad = vec![0.0f32; ishape.numel()];
    grad.par_chunks_mut(spatial_in).enumerate().for_each(|(slot, chunk)| {
        let uslice = &upstream.data()[slot * spatial_out..][..spatial_out];
        for z in 0..ishape.d {
            for y in 0..ishape.h {
                for x in 0..ishape.w {
                    let mut acc = 0.0f64;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += uslice
                                    [((2 * z + dz) * s.h + (2 * y + dy)) * s.w + (2 * x + dx)]
                                    as f64;
                            }
                        }
                    }
                    chunk[(z * ishape.h + y) * ishape.w + x] = acc as f32;
                }
            }
        }
    });
    Tensor5::new(ishape, grad)
}

/// Concatenates along the channel axis; `a`'s channels come first.
pub fn concat_channels(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    let (sa, sb) = (a.shape(), b.shape());
    for (axis, ea, eb) in [
        ("batch", sa.n, sb.n),
        ("depth", sa.d, sb.d),
        ("height", sa.h, sb.h),
        ("width", sa.w, sb.w),
    ] {
        if ea != eb {
            return Err(Error::DimMismatch {
                op: "concat_channels",
                axis,
                expected: ea,
                actual: eb,
            });
        }
    }
    let oshape = Shape5::new(sa.n, sa.c + sb.c, sa.d, sa.h, sa.w);
    let spatial = sa.spatial();
    let mut out = Vec::with_capacity(oshape.numel());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * sa.c * spatial..(n + 1) * sa.c * spatial]);
        out.extend_from_slice(&b.data()[n * sb.c * spatial..(n + 1) * sb.c * spatial]);
    }
    Tensor5::new(oshape, out)
}

/// Splits an upstream gradient back into the two concat inputs.
pub fn concat_channels_backward(
    upstream: &Tensor5,
    c_a: usize,
    c_b: usize,
) -> Result<(Tensor5, Tensor5)> {
    let s = upstream.shape();
    if s.c != c_a + c_b {
        return Err(Error::DimMismatch {
            op: "concat_channels_backward",
            axis: "channel",
            expected: c_a + c_b,
            actual: s.c,
        });
    }
    let spatial = s.spatial();
    let sa = Shape5::new(s.n, c_a, s.d, s.h, s.w);
    let sb = Shape5::new(s.n, c_b, s.d, s.h, s.w);
    let mut ga = Vec::with_capacity(sa.numel());
    let mut gb = Vec::with_capacity(sb.numel());
    for n in 0..s.n {
        let base = n * s.c * spatial;
        ga.extend_from_slice(&upstream.data()[base..base + c_a * spatial]);
        gb.extend_from_slice(&upstream.data()[base + c_a * spatial..base + s.c * spatial]);
    }
    Ok((Tensor5::new(sa, ga)?, Tensor5::new(sb, gb)?))
}

pub fn relu(input: &Tensor5) -> Tensor5 {
    let data = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor5::new(input.shape(), data).expect("same shape")
}

/// Subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor5, upstream: &Tensor5) -> Tensor5 {
    let data = input
        .data()
        .iter()
        .zip(upstream.data().iter())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor5::new(input.shape(), data).expect("same shape")
}

pub fn sigmoid(input: &Tensor5) -> Tensor5 {
    let data = input
        .data()
        .iter()
        .map(|&x| (1.0 / (1.0 + (-(x as f64)).exp())) as f32)
        .collect();
    Tensor5::new(input.shape(), data).expect("same shape")
}

/// Gradient from the forward output: s * (1 - s).
pub fn sigmoid_backward(output: &Tensor5, upstream: &Tensor5) -> Tensor5 {
    let data = output
        .data()
        .iter()
        .zip(upstream.data().iter())
        .map(|(&s, &g)| {
            let s = s as f64;
            (g as f64 * s * (1.0 - s)) as f32
        })
        .collect();
    Tensor5::new(output.shape(), data).expect("same shape")
}

/// Softmax over the channel axis, per voxel.
pub fn softmax_channels(input: &Tensor5) -> Tensor5 {
    let s = input.shape();
    let spatial = s.spatial();
    let mut out = vec![0.0f32; s.numel()];
    for n in 0..s.n {
        let base = n * s.c * spatial;
        for v in 0..spatial {
            let mut m = f64::NEG_INFINITY;
            for c in 0..s.c {
                m = m.max(input.data()[base + c * spatial + v] as f64);
            }
            let mut denom = 0.0f64;
            for c in 0..s.c {
                denom += ((input.data()[base + c * spatial + v] as f64) - m).exp();
            }
            for c in 0..s.c {
                let e = ((input.data()[base + c * spatial + v] as f64) - m).exp();
                out[base + c * spatial + v] = (e / denom) as f32;
            }
        }
    }
    Tensor5::new(s, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape5) -> Tensor5 {
        Tensor5::filled(shape, 1.0)
    }

    #[test]
    fn conv_all_ones_center_and_corner() {
        // All-ones 3x3x3 input against an all-ones 3^3 kernel, same padding:
        // the center voxel sees the full 27-tap support, a corner sees 8.
        let input = ones(Shape5::new(1, 1, 3, 3, 3));
        let kernel = ConvKernel3::new(1, 1, 3, vec![1.0; 27], vec![0.0]).unwrap();
        let out = conv3d(&input, &kernel, Padding::Same).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.at(0, 0, 1, 1, 1), 27.0);
        assert_eq!(out.at(0, 0, 0, 0, 0), 8.0);
        assert_eq!(out.at(0, 0, 2, 2, 2), 8.0);
        assert_eq!(out.at(0, 0, 1, 1, 0), 18.0);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let input = Tensor5::from_fn(Shape5::new(1, 1, 4, 4, 4), |i| (i as f32) * 0.1 - 2.0);
        let mut weights = vec![0.0; 27];
        weights[13] = 1.0; // center tap
        let kernel = ConvKernel3::new(1, 1, 3, weights, vec![0.0]).unwrap();
        let out = conv3d(&input, &kernel, Padding::Same).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let input = Tensor5::from_fn(Shape5::new(1, 2, 3, 3, 3), |i| i as f32);
        let kernel = ConvKernel3::new(3, 2, 3, vec![0.0; 3 * 2 * 27], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv3d(&input, &kernel, Padding::Same).unwrap();
        for o in 0..3 {
            for v in 0..27 {
                let z = v / 9;
                let y = (v / 3) % 3;
                let x = v % 3;
                assert_eq!(out.at(0, o, z, y, x), kernel.bias[o]);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let input = ones(Shape5::new(1, 2, 3, 3, 3));
        let kernel = ConvKernel3::zeros(1, 3, 3);
        let err = conv3d(&input, &kernel, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "{msg}");
    }

    #[test]
    fn conv_valid_padding_shrinks() {
        let input = ones(Shape5::new(1, 1, 5, 4, 3));
        let kernel = ConvKernel3::new(1, 1, 3, vec![1.0; 27], vec![0.0]).unwrap();
        let out = conv3d(&input, &kernel, Padding::Valid).unwrap();
        assert_eq!(out.shape(), Shape5::new(1, 1, 3, 2, 1));
        // interior of an all-ones volume: every tap in support
        assert!(out.data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn conv_valid_too_small_errors() {
        let input = ones(Shape5::new(1, 1, 2, 4, 4));
        let kernel = ConvKernel3::zeros(1, 1, 3);
        assert!(conv3d(&input, &kernel, Padding::Valid).is_err());
    }

    #[test]
    fn conv_bias_grad_is_upstream_sum() {
        let input = Tensor5::from_fn(Shape5::new(1, 2, 4, 4, 4), |i| ((i % 7) as f32) - 3.0);
        let kernel = ConvKernel3::new(
            2,
            2,
            3,
            (0..2 * 2 * 27).map(|i| ((i % 5) as f32) * 0.1 - 0.2).collect(),
            vec![0.1, -0.1],
        )
        .unwrap();
        let upstream = Tensor5::from_fn(Shape5::new(1, 2, 4, 4, 4), |i| ((i % 3) as f32) * 0.5);
        let grads = conv3d_backward(&input, &kernel, Padding::Same, &upstream).unwrap();
        for o in 0..2 {
            let want: f64 = upstream.data()[o * 64..(o + 1) * 64]
                .iter()
                .map(|&v| v as f64)
                .sum();
            assert!((grads.bias_grad[o] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_zero_upstream_zero_grads() {
        let input = Tensor5::from_fn(Shape5::new(1, 1, 4, 4, 4), |i| (i as f32) * 0.01);
        let kernel =
            ConvKernel3::new(1, 1, 3, (0..27).map(|i| i as f32 * 0.1).collect(), vec![0.3]).unwrap();
        let upstream = Tensor5::zeros(Shape5::new(1, 1, 4, 4, 4));
        let grads = conv3d_backward(&input, &kernel, Padding::Same, &upstream).unwrap();
        assert!(grads.input_grad.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight_grad.iter().all(|&v| v == 0.0));
        assert!(grads.bias_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_is_linear_in_input() {
        // conv(a*x + b*y, K0) == a*conv(x, K0) + b*conv(y, K0) for zero bias
        let shape = Shape5::new(1, 2, 4, 4, 4);
        let x = Tensor5::from_fn(shape, |i| ((i * 37 % 11) as f32) / 11.0 - 0.5);
        let y = Tensor5::from_fn(shape, |i| ((i * 17 % 13) as f32) / 13.0 - 0.4);
        let kernel = ConvKernel3::new(
            3,
            2,
            3,
            (0..3 * 2 * 27).map(|i| ((i * 29 % 19) as f32) / 19.0 - 0.5).collect(),
            vec![0.0; 3],
        )
        .unwrap();
        let (a, b) = (0.75f32, -1.25f32);
        let mixed = Tensor5::from_fn(shape, |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv3d(&mixed, &kernel, Padding::Same).unwrap();
        let cx = conv3d(&x, &kernel, Padding::Same).unwrap();
        let cy = conv3d(&y, &kernel, Padding::Same).unwrap();
        for i in 0..lhs.numel() {
            let want = a * cx.data()[i] + b * cy.data()[i];
            let got = lhs.data()[i];
            let denom = want.abs().max(got.abs()).max(1e-3);
            assert!(
                ((got - want) / denom).abs() < 1e-5,
                "voxel {i}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn maxpool_block_and_backward_routing() {
        // one 2x2x2 block holding 1..8: pooled value is 8 and the gradient
        // lands only on the argmax position.
        let mut input = Tensor5::zeros(Shape5::new(1, 1, 2, 2, 2));
        for i in 0..8 {
            input.data_mut()[i] = (i + 1) as f32;
        }
        let (out, argmax) = maxpool3d(&input).unwrap();
        assert_eq!(out.shape(), Shape5::new(1, 1, 1, 1, 1));
        assert_eq!(out.data()[0], 8.0);
        assert_eq!(argmax[0], 7);

        let upstream = Tensor5::filled(Shape5::new(1, 1, 1, 1, 1), 1.0);
        let grad = maxpool3d_backward(input.shape(), &argmax, &upstream).unwrap();
        let mut want = vec![0.0f32; 8];
        want[7] = 1.0;
        assert_eq!(grad.data(), &want[..]);
    }

    #[test]
    fn maxpool_constant_volume() {
        let input = Tensor5::filled(Shape5::new(1, 1, 4, 4, 4), 3.25);
        let (out, _) = maxpool3d(&input).unwrap();
        assert_eq!(out.shape(), Shape5::new(1, 1, 2, 2, 2));
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn maxpool_odd_dim_errors() {
        let input = Tensor5::zeros(Shape5::new(1, 1, 3, 4, 4));
        let err = maxpool3d(&input).unwrap_err();
        assert!(err.to_string().contains("depth"));
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let input = Tensor5::filled(Shape5::new(1, 1, 1, 1, 1), 4.5);
        let out = upsample_nearest3d(&input);
        assert_eq!(out.shape(), Shape5::new(1, 1, 2, 2, 2));
        assert!(out.data().iter().all(|&v| v == 4.5));

        let upstream = Tensor5::filled(Shape5::new(1, 1, 2, 2, 2), 1.0);
        let grad = upsample_nearest3d_backward(&upstream).unwrap();
        assert_eq!(grad.data(), &[8.0][..]);
    }

    #[test]
    fn pool_then_upsample_identity_on_blockwise_constant() {
        // constant volumes are blockwise-constant at scale 2
        let input = Tensor5::filled(Shape5::new(1, 2, 4, 4, 4), -0.75);
        let (pooled, _) = maxpool3d(&input).unwrap();
        let restored = upsample_nearest3d(&pooled);
        assert_eq!(restored.data(), input.data());
    }

    #[test]
    fn concat_shapes_and_backward_split() {
        let a = Tensor5::from_fn(Shape5::new(1, 2, 2, 2, 2), |i| i as f32);
        let b = Tensor5::from_fn(Shape5::new(1, 1, 2, 2, 2), |i| 100.0 + i as f32);
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), Shape5::new(1, 3, 2, 2, 2));
        assert_eq!(out.at(0, 0, 0, 0, 1), a.at(0, 0, 0, 0, 1));
        assert_eq!(out.at(0, 2, 1, 1, 1), b.at(0, 0, 1, 1, 1));

        let (ga, gb) = concat_channels_backward(&out, 2, 1).unwrap();
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }

    #[test]
    fn concat_zero_channel_is_identity() {
        let a = Tensor5::from_fn(Shape5::new(2, 3, 2, 2, 2), |i| i as f32 * 0.5);
        let b = Tensor5::zeros(Shape5::new(2, 0, 2, 2, 2));
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), a.shape());
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let a = Tensor5::zeros(Shape5::new(1, 1, 2, 2, 2));
        let b = Tensor5::zeros(Shape5::new(1, 1, 2, 2, 4));
        let err = concat_channels(&a, &b).unwrap_err();
        assert!(err.to_string().contains("width"));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let input = Tensor5::new(
            Shape5::new(1, 1, 1, 1, 3),
            vec![-1.0, 0.0, 2.0],
        )
        .unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 0.0, 2.0][..]);

        let zero = Tensor5::filled(Shape5::new(1, 1, 1, 1, 1), 0.0);
        assert_eq!(sigmoid(&zero).data()[0], 0.5);

        // sigma'(0) = sigma(0) * (1 - sigma(0)) = 0.25
        let out = sigmoid(&zero);
        let up = Tensor5::filled(zero.shape(), 1.0);
        assert_eq!(sigmoid_backward(&out, &up).data()[0], 0.25);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let input = Tensor5::new(Shape5::new(1, 1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let up = Tensor5::filled(input.shape(), 1.0);
        assert_eq!(relu_backward(&input, &up).data(), &[0.0, 0.0, 1.0][..]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let input = Tensor5::new(
            Shape5::new(1, 2, 1, 1, 2),
            vec![1.0, -2.0, 0.5, 3.0],
        )
        .unwrap();
        let out = softmax_channels(&input);
        for v in 0..2 {
            let s = out.at(0, 0, 0, 0, v) + out.at(0, 1, 0, 0, v);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
