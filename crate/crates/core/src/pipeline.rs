//! Pre- and post-processing around the network: intensity normalization,
//! trilinear resampling between acquisition and inference grids, rigid
//! augmentation, probability thresholding, and Hadamard defacing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Anatomical direction a voxel axis points toward (positive index side).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisLabel {
    Superior,
    Inferior,
    Anterior,
    Posterior,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation(pub [AxisLabel; 3]);

impl Default for Orientation {
    fn default() -> Self {
        Orientation([AxisLabel::Superior, AxisLabel::Anterior, AxisLabel::Left])
    }
}

impl Orientation {
    /// Axis index and sign pointing anterior.
    pub fn anterior(&self) -> (usize, f64) {
        for (i, label) in self.0.iter().enumerate() {
            match label {
                AxisLabel::Anterior => return (i, 1.0),
                AxisLabel::Posterior => return (i, -1.0),
                _ => {}
            }
        }
        (1, 1.0)
    }
}

/// A 3D scalar grid with voxel spacing (mm) and orientation metadata.
/// Data is row-major in (D, H, W) order, W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
    pub orientation: Orientation,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        validate_geometry(dims, spacing, data.len())?;
        Ok(Volume {
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
            orientation: Orientation::default(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Trilinear sample at a fractional voxel coordinate (f64 arithmetic).
    pub fn sample_trilinear(&self, z: f64, y: f64, x: f64) -> f64 {
        let [d, h, w] = self.dims;
        let zc = z.clamp(0.0, (d - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let xc = x.clamp(0.0, (w - 1) as f64);
        let z0 = zc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let z1 = (z0 + 1).min(d - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fz = zc - z0 as f64;
        let fy = yc - y0 as f64;
        let fx = xc - x0 as f64;

        let v = |zz: usize, yy: usize, xx: usize| self.at(zz, yy, xx) as f64;
        let c00 = v(z0, y0, x0) * (1.0 - fx) + v(z0, y0, x1) * fx;
        let c01 = v(z0, y1, x0) * (1.0 - fx) + v(z0, y1, x1) * fx;
        let c10 = v(z1, y0, x0) * (1.0 - fx) + v(z1, y0, x1) * fx;
        let c11 = v(z1, y1, x0) * (1.0 - fx) + v(z1, y1, x1) * fx;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Wraps the volume as a (1, 1, D, H, W) tensor.
    pub fn to_tensor(&self) -> Tensor5 {
        let [d, h, w] = self.dims;
        Tensor5::new(Shape5::new(1, 1, d, h, w), self.data.clone()).expect("consistent dims")
    }

    /// Rebuilds a volume from a single-channel tensor, reusing this volume's
    /// spacing and orientation.
    pub fn with_tensor_data(&self, tensor: &Tensor5) -> Result<Volume> {
        let s = tensor.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::DimMismatch {
                op: "Volume::with_tensor_data",
                axis: "channel",
                expected: 1,
                actual: s.c,
            });
        }
        if [s.d, s.h, s.w] != self.dims {
            return Err(Error::DimMismatch {
                op: "Volume::with_tensor_data",
                axis: "depth",
                expected: self.dims[0],
                actual: s.d,
            });
        }
        Ok(Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: tensor.data().to_vec(),
            orientation: self.orientation,
        })
    }
}

/// Binary mask over a volume grid: 0 = deface, 1 = keep.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
    pub orientation: Orientation,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        validate_geometry(dims, spacing, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(MaskVolume {
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: u8) -> Self {
        MaskVolume {
            dims,
            spacing,
            data: vec![value.min(1); dims[0] * dims[1] * dims[2]],
            orientation: Orientation::default(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Share of voxels marked for defacing (value 0).
    pub fn defaced_fraction(&self) -> f64 {
        let zeros = self.data.iter().filter(|&&v| v == 0).count();
        zeros as f64 / self.data.len() as f64
    }

    /// Mask as a {0.0, 1.0} training target tensor.
    pub fn to_target_tensor(&self) -> Tensor5 {
        let [d, h, w] = self.dims;
        let data = self.data.iter().map(|&v| v as f32).collect();
        Tensor5::new(Shape5::new(1, 1, d, h, w), data).expect("consistent dims")
    }
}

fn validate_geometry(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Validation(format!(
            "spacing must be > 0, got {spacing:?}"
        )));
    }
    let want = dims[0] * dims[1] * dims[2];
    if len != want {
        return Err(Error::DimMismatch {
            op: "volume",
            axis: "flat",
            expected: want,
            actual: len,
        });
    }
    Ok(())
}

/// Min/max rescale to [0, 1]; constant volumes map to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let mut out = v.clone();
    if hi > lo {
        let range = hi - lo;
        for x in out.data.iter_mut() {
            *x = (*x - lo) / range;
        }
    } else {
        out.data.fill(0.0);
    }
    out
}

fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst > 1 {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    } else {
        (src as f64 - 1.0) / 2.0
    }
}

fn rescaled_spacing(spacing: [f32; 3], src: [usize; 3], dst: [usize; 3]) -> [f32; 3] {
    // keep the physical field of view: spacing scales with the dim ratio
    let mut out = [0.0f32; 3];
    for a in 0..3 {
        out[a] = (spacing[a] as f64 * src[a] as f64 / dst[a] as f64) as f32;
    }
    out
}

/// Corner-aligned trilinear resampling to `target` dims. The identity target
/// returns bit-equal data; output values never overshoot the input range.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!(
            "target dims must be >= 1, got {target:?}"
        )));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let [td, th, tw] = target;
    let mut data = vec![0.0f32; td * th * tw];
    for z in 0..td {
        let sz = source_coord(z, v.dims[0], td);
        for y in 0..th {
            let sy = source_coord(y, v.dims[1], th);
            for x in 0..tw {
                let sx = source_coord(x, v.dims[2], tw);
                data[(z * th + y) * tw + x] = v.sample_trilinear(sz, sy, sx) as f32;
            }
        }
    }
    Ok(Volume {
        dims: target,
        spacing: rescaled_spacing(v.spacing, v.dims, target),
        data,
        orientation: v.orientation,
    })
}

/// Nearest-neighbor resampling for masks; output stays strictly binary.
pub fn resample_nearest_mask(m: &MaskVolume, target: [usize; 3]) -> Result<MaskVolume> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!(
            "target dims must be >= 1, got {target:?}"
        )));
    }
    if target == m.dims {
        return Ok(m.clone());
    }
    let [td, th, tw] = target;
    let mut data = vec![0u8; td * th * tw];
    for z in 0..td {
        let sz = source_coord(z, m.dims[0], td).round() as usize;
        for y in 0..th {
            let sy = source_coord(y, m.dims[1], th).round() as usize;
            for x in 0..tw {
                let sx = source_coord(x, m.dims[2], tw).round() as usize;
                data[(z * th + y) * tw + x] =
                    m.data[(sz.min(m.dims[0] - 1) * m.dims[1] + sy.min(m.dims[1] - 1))
                        * m.dims[2]
                        + sx.min(m.dims[2] - 1)];
            }
        }
    }
    Ok(MaskVolume {
        dims: target,
        spacing: rescaled_spacing(m.spacing, m.dims, target),
        data,
        orientation: m.orientation,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Per-axis shrink factor applied before rounding to the network grid.
    pub shrink: f64,
    /// Dims are never reduced below this (or the original, if smaller).
    pub floor: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            shrink: 0.5,
            floor: 64,
        }
    }
}

/// How to get from the inference grid back to the acquisition grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoreRecipe {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

fn round16(x: f64) -> usize {
    ((x / 16.0).round() as usize) * 16
}

fn ceil16(x: usize) -> usize {
    x.div_ceil(16) * 16
}

/// Target dims for one axis under the fit rule.
pub fn fit_dim(dim: usize, opts: &FitOptions) -> usize {
    let shrunk = round16(dim as f64 * opts.shrink);
    let lo = ceil16(dim.min(opts.floor));
    shrunk.max(lo)
}

/// Resamples to the network-legal inference grid (dims divisible by 16,
/// floored at `min(original, floor)`), returning the recipe that restores
/// the original grid.
pub fn fit_to_grid(v: &Volume, opts: &FitOptions) -> Result<(Volume, RestoreRecipe)> {
    let target = [
        fit_dim(v.dims[0], opts),
        fit_dim(v.dims[1], opts),
        fit_dim(v.dims[2], opts),
    ];
    let recipe = RestoreRecipe {
        dims: v.dims,
        spacing: v.spacing,
    };
    let fitted = resample_trilinear(v, target)?;
    Ok((fitted, recipe))
}

/// Nearest-neighbor companion for training targets on the fitted grid.
pub fn fit_mask_to(m: &MaskVolume, target: [usize; 3]) -> Result<MaskVolume> {
    resample_nearest_mask(m, target)
}

/// Resamples a probability map back to the acquisition grid. The spacing is
/// restored exactly from the recipe.
pub fn restore_to_original(prob: &Volume, recipe: &RestoreRecipe) -> Result<Volume> {
    let mut out = resample_trilinear(prob, recipe.dims)?;
    out.spacing = recipe.spacing;
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

/// A sampled rigid transform; the recorded parameters reproduce it exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidAugmentation {
    /// Rotation around each voxel axis, degrees.
    pub rotation_deg: [f64; 3],
    /// Isotropic scale.
    pub scale: f64,
}

impl RigidAugmentation {
    pub fn identity() -> Self {
        RigidAugmentation {
            rotation_deg: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, ranges: &AugmentRanges) -> Self {
        let r = ranges.max_rotation_deg;
        RigidAugmentation {
            rotation_deg: [
                rng.gen_range(-r..=r),
                rng.gen_range(-r..=r),
                rng.gen_range(-r..=r),
            ],
            scale: rng.gen_range(ranges.scale_min..=ranges.scale_max),
        }
    }

    /// Rotation matrix R2(w-axis) * R1(h-axis) * R0(d-axis) in voxel space.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a0, a1, a2] = self.rotation_deg.map(|d| d.to_radians());
        let r0 = axis_rotation(0, a0);
        let r1 = axis_rotation(1, a1);
        let r2 = axis_rotation(2, a2);
        mat_mul(&r2, &mat_mul(&r1, &r0))
    }
}

fn axis_rotation(axis: usize, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m[u][u] = c;
    m[u][v] = -s;
    m[v][u] = s;
    m[v][v] = c;
    m
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Applies the same rigid transform to an image and its mask, about the
/// volume center in voxel space. The image is resampled trilinearly, the
/// mask nearest-neighbor; out-of-field voxels fill with 0 (image) and
/// 1 (mask: background is not face).
pub fn augment(
    v: &Volume,
    m: &MaskVolume,
    aug: &RigidAugmentation,
) -> Result<(Volume, MaskVolume)> {
    if v.dims != m.dims {
        return Err(Error::DimMismatch {
            op: "augment",
            axis: "depth",
            expected: v.dims[0],
            actual: m.dims[0],
        });
    }
    let [d, h, w] = v.dims;
    let center = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    // inverse map: rotate back, unscale, recenter
    let rinv = transpose(&aug.rotation());
    let inv_scale = 1.0 / aug.scale;

    let mut image = vec![0.0f32; v.data.len()];
    let mut mask = vec![1u8; m.data.len()];
    let max = [
        (d as f64) - 1.0,
        (h as f64) - 1.0,
        (w as f64) - 1.0,
    ];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    z as f64 - center[0],
                    y as f64 - center[1],
                    x as f64 - center[2],
                ];
                let mut q = [0.0f64; 3];
                for i in 0..3 {
                    q[i] = center[i]
                        + inv_scale * (rinv[i][0] * p[0] + rinv[i][1] * p[1] + rinv[i][2] * p[2]);
                }
                let idx = (z * h + y) * w + x;
                let inside = (0..3).all(|i| q[i] >= 0.0 && q[i] <= max[i]);
                if inside {
                    image[idx] = v.sample_trilinear(q[0], q[1], q[2]) as f32;
                    let nz = q[0].round() as usize;
                    let ny = q[1].round() as usize;
                    let nx = q[2].round() as usize;
                    mask[idx] = m.data[(nz.min(d - 1) * h + ny.min(h - 1)) * w + nx.min(w - 1)];
                }
            }
        }
    }

    let out_v = Volume {
        dims: v.dims,
        spacing: v.spacing,
        data: image,
        orientation: v.orientation,
    };
    let out_m = MaskVolume {
        dims: m.dims,
        spacing: m.spacing,
        data: mask,
        orientation: m.orientation,
    };
    Ok((out_v, out_m))
}

/// Binarizes a probability map: voxel >= tau keeps (1), below defaces (0).
pub fn threshold_mask(probabilities: &Volume, tau: f64) -> Result<MaskVolume> {
    for (i, &p) in probabilities.data.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!(
                "probability {p} at voxel {i} is outside [0, 1]"
            )));
        }
    }
    let data = probabilities
        .data
        .iter()
        .map(|&p| if p as f64 >= tau { 1u8 } else { 0u8 })
        .collect();
    Ok(MaskVolume {
        dims: probabilities.dims,
        spacing: probabilities.spacing,
        data,
        orientation: probabilities.orientation,
    })
}

/// Hadamard product of image and binary mask: masked voxels become exactly
/// 0, kept voxels are bit-equal to the input.
pub fn deface(image: &Volume, mask: &MaskVolume) -> Result<Volume> {
    if image.dims != mask.dims {
        let axis = if image.dims[0] != mask.dims[0] {
            ("depth", image.dims[0], mask.dims[0])
        } else if image.dims[1] != mask.dims[1] {
            ("height", image.dims[1], mask.dims[1])
        } else {
            ("width", image.dims[2], mask.dims[2])
        };
        return Err(Error::DimMismatch {
            op: "deface",
            axis: axis.0,
            expected: axis.1,
            actual: axis.2,
        });
    }
    let data = image
        .data
        .iter()
        .zip(mask.data.iter())
        .map(|(&v, &m)| if m == 0 { 0.0 } else { v })
        .collect();
    Ok(Volume {
        dims: image.dims,
        spacing: image.spacing,
        data,
        orientation: image.orientation,
    })
}
