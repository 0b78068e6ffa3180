//! Bit-exact file I/O: single-file NIfTI-1 volumes/masks and the toolkit's
//! own checksummed binary weights format.
//!
//! NIfTI-1 stores x fastest; `Volume` is (D, H, W) row-major with W fastest,
//! so dim[1]/pixdim[1] map to the width axis. Writes are little-endian with
//! vox_offset 352; reads detect byte order from sizeof_hdr and handle both.

use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::pipeline::{MaskVolume, Volume};
use crate::unet::{Param, Variant, WeightStore};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: u64 = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Supported on-disk datatypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    UInt8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::UInt8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiDatatype::UInt8),
            4 => Some(NiftiDatatype::Int16),
            16 => Some(NiftiDatatype::Float32),
            _ => None,
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            NiftiDatatype::UInt8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NiftiDatatype::UInt8 => "uint8",
            NiftiDatatype::Int16 => "int16",
            NiftiDatatype::Float32 => "float32",
        }
    }
}

/// Parsed NIfTI-1 header fields the toolkit cares about.
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: NiftiDatatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub sform_code: i16,
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub little_endian: bool,
}

impl NiftiHeader {
    /// Volume dims in (D, H, W) order.
    pub fn volume_dims(&self) -> Result<[usize; 3]> {
        for axis in 1..=3 {
            if self.dim[axis] < 1 {
                return Err(Error::Parse {
                    offset: (offsets::DIM + 2 * axis) as u64,
                    message: format!("dim[{axis}] must be >= 1, got {}", self.dim[axis]),
                });
            }
        }
        Ok([
            self.dim[3] as usize,
            self.dim[2] as usize,
            self.dim[1] as usize,
        ])
    }

    /// Spacing in (D, H, W) order; non-positive entries default to 1 mm.
    pub fn volume_spacing(&self) -> Result<[f32; 3]> {
        let fix = |p: f32| if p > 0.0 && p.is_finite() { p } else { 1.0 };
        Ok([
            fix(self.pixdim[3]),
            fix(self.pixdim[2]),
            fix(self.pixdim[1]),
        ])
    }

    pub fn voxel_count(&self) -> usize {
        (1..=self.dim[0].min(7) as usize)
            .map(|a| self.dim[a].max(1) as usize)
            .product()
    }
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "file too short for a {HEADER_SIZE}-byte header ({} bytes)",
                bytes.len()
            ),
        });
    }
    let le = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..offsets::SIZEOF_HDR + 4]);
    let be = BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..offsets::SIZEOF_HDR + 4]);
    let little_endian = if le == HEADER_SIZE as i32 {
        true
    } else if be == HEADER_SIZE as i32 {
        false
    } else {
        return Err(Error::Parse {
            offset: offsets::SIZEOF_HDR as u64,
            message: format!("sizeof_hdr is not 348 in either byte order (le {le}, be {be})"),
        });
    };
    if little_endian {
        parse_header_endian::<LittleEndian>(bytes, true)
    } else {
        parse_header_endian::<BigEndian>(bytes, false)
    }
}

fn parse_header_endian<E: ByteOrder>(bytes: &[u8], little_endian: bool) -> Result<NiftiHeader> {
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4]
        .try_into()
        .expect("length checked");
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(Error::Parse {
            offset: offsets::MAGIC as u64,
            message: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut dim = [0i16; 8];
    for (i, slot) in dim.iter_mut().enumerate() {
        *slot = E::read_i16(&bytes[offsets::DIM + 2 * i..offsets::DIM + 2 * i + 2]);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(Error::Parse {
            offset: offsets::DIM as u64,
            message: format!("dim[0] must be in 1..=7, got {}", dim[0]),
        });
    }
    // only volumetric payloads: trailing dims may exist but must be size 1
    for axis in 4..=dim[0] as usize {
        if dim[axis] > 1 {
            return Err(Error::Parse {
                offset: (offsets::DIM + 2 * axis) as u64,
                message: format!("axis {axis} has size {}, only 3D supported", dim[axis]),
            });
        }
    }
    let datatype_code = E::read_i16(&bytes[offsets::DATATYPE..offsets::DATATYPE + 2]);
    let datatype = NiftiDatatype::from_code(datatype_code).ok_or_else(|| Error::Parse {
        offset: offsets::DATATYPE as u64,
        message: format!(
            "unsupported datatype code {datatype_code} (supported: uint8, int16, float32)"
        ),
    })?;
    let bitpix = E::read_i16(&bytes[offsets::BITPIX..offsets::BITPIX + 2]);
    if bitpix as usize != datatype.byte_size() * 8 {
        return Err(Error::Parse {
            offset: offsets::BITPIX as u64,
            message: format!(
                "bitpix {bitpix} does not match datatype {} ({} bits)",
                datatype.name(),
                datatype.byte_size() * 8
            ),
        });
    }
    let mut pixdim = [0.0f32; 8];
    for (i, slot) in pixdim.iter_mut().enumerate() {
        *slot = E::read_f32(&bytes[offsets::PIXDIM + 4 * i..offsets::PIXDIM + 4 * i + 4]);
    }
    let vox_offset = E::read_f32(&bytes[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4]);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::Parse {
            offset: offsets::VOX_OFFSET as u64,
            message: format!("vox_offset {vox_offset} is before the header end"),
        });
    }
    let mut srow = [[0.0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            let at = offsets::SROW_X + 16 * r + 4 * c;
            *slot = E::read_f32(&bytes[at..at + 4]);
        }
    }
    Ok(NiftiHeader {
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset,
        scl_slope: E::read_f32(&bytes[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4]),
        scl_inter: E::read_f32(&bytes[offsets::SCL_INTER..offsets::SCL_INTER + 4]),
        sform_code: E::read_i16(&bytes[offsets::SFORM_CODE..offsets::SFORM_CODE + 2]),
        srow,
        magic,
        little_endian,
    })
}

/// Parses just the header of a .nii file.
pub fn read_nifti_header(path: &Path) -> Result<NiftiHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

/// Reads a single-file NIfTI-1 volume. Intensities are scaled by
/// scl_slope/scl_inter when the slope is set and not the identity.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

/// Parses a single-file NIfTI-1 volume from raw bytes.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    let header = parse_header(bytes)?;
    decode_volume(&header, bytes)
}

fn decode_volume(header: &NiftiHeader, bytes: &[u8]) -> Result<Volume> {
    let dims = header.volume_dims()?;
    let spacing = header.volume_spacing()?;
    let n = dims[0] * dims[1] * dims[2];
    let elem = header.datatype.byte_size();
    let offset = header.vox_offset as u64 as usize;
    let need = offset + n * elem;
    if bytes.len() < need {
        return Err(Error::Parse {
            offset: offset as u64,
            message: format!(
                "truncated voxel payload: need {} bytes, file has {}",
                need,
                bytes.len()
            ),
        });
    }
    let payload = &bytes[offset..need];
    let mut data = Vec::with_capacity(n);
    match (header.datatype, header.little_endian) {
        (NiftiDatatype::UInt8, _) => data.extend(payload.iter().map(|&b| b as f32)),
        (NiftiDatatype::Int16, true) => {
            data.extend(payload.chunks_exact(2).map(LittleEndian::read_i16).map(f32::from))
        }
        (NiftiDatatype::Int16, false) => {
            data.extend(payload.chunks_exact(2).map(BigEndian::read_i16).map(f32::from))
        }
        (NiftiDatatype::Float32, true) => {
            data.extend(payload.chunks_exact(4).map(LittleEndian::read_f32))
        }
        (NiftiDatatype::Float32, false) => {
            data.extend(payload.chunks_exact(4).map(BigEndian::read_f32))
        }
    }
    let slope = header.scl_slope;
    let inter = header.scl_inter;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in data.iter_mut() {
            *v = *v * slope + inter;
        }
    }
    // NIfTI payload is x-fastest, ours is W-fastest on the same axis order
    Volume::new(dims, spacing, data)
}

/// Reads a mask written as uint8; values must be exactly 0 or 1.
pub fn read_nifti_mask(path: &Path) -> Result<MaskVolume> {
    let volume = read_nifti(path)?;
    let data = volume
        .data
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0u8)
            } else if v == 1.0 {
                Ok(1u8)
            } else {
                Err(Error::Validation(format!(
                    "mask voxel value {v} is not 0 or 1"
                )))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    MaskVolume::new(volume.dims, volume.spacing, data)
}

fn build_header(dims: [usize; 3], spacing: [f32; 3], datatype: NiftiDatatype) -> Result<Vec<u8>> {
    for (axis, &d) in dims.iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::Validation(format!(
                "axis {axis} size {d} exceeds the NIfTI-1 limit of 32767"
            )));
        }
    }
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..offsets::SIZEOF_HDR + 4], 348);
    let dim: [i16; 8] = [
        3,
        dims[2] as i16,
        dims[1] as i16,
        dims[0] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * i..offsets::DIM + 2 * i + 2], *d);
    }
    LittleEndian::write_i16(
        &mut h[offsets::DATATYPE..offsets::DATATYPE + 2],
        datatype.code(),
    );
    LittleEndian::write_i16(
        &mut h[offsets::BITPIX..offsets::BITPIX + 2],
        (datatype.byte_size() * 8) as i16,
    );
    let pixdim: [f32; 8] = [
        1.0, spacing[2], spacing[1], spacing[0], 0.0, 0.0, 0.0, 0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * i..offsets::PIXDIM + 4 * i + 4], *p);
    }
    LittleEndian::write_f32(
        &mut h[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4],
        VOX_OFFSET as f32,
    );
    LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4], 1.0);
    LittleEndian::write_f32(&mut h[offsets::SCL_INTER..offsets::SCL_INTER + 4], 0.0);
    h[offsets::XYZT_UNITS] = 2; // millimeters
    LittleEndian::write_i16(&mut h[offsets::SFORM_CODE..offsets::SFORM_CODE + 2], 1);
    // identity-oriented sform scaled by spacing
    for (r, &s) in [spacing[2], spacing[1], spacing[0]].iter().enumerate() {
        let at = offsets::SROW_X + 16 * r + 4 * r;
        LittleEndian::write_f32(&mut h[at..at + 4], s);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a float32 single-file .nii (little-endian, vox_offset 352).
/// The write is atomic: a temp file is renamed into place.
pub fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = build_header(v.dims, v.spacing, NiftiDatatype::Float32)?;
    bytes.resize(VOX_OFFSET as usize, 0);
    bytes.reserve(v.data.len() * 4);
    for &x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

/// Writes a mask as uint8.
pub fn write_nifti_mask(m: &MaskVolume, path: &Path) -> Result<()> {
    let mut bytes = build_header(m.dims, m.spacing, NiftiDatatype::UInt8)?;
    bytes.resize(VOX_OFFSET as usize, 0);
    bytes.extend_from_slice(&m.data);
    atomic_write(path, &bytes)
}

// ---- weights format --------------------------------------------------------

const WEIGHTS_MAGIC: &[u8; 4] = b"VDFW";
const WEIGHTS_VERSION: u32 = 1;

fn variant_tag(variant: Variant) -> u32 {
    match variant {
        Variant::DeepDefacer => 1,
        Variant::Baseline => 2,
    }
}

fn variant_from_tag(tag: u32) -> Result<Variant> {
    match tag {
        1 => Ok(Variant::DeepDefacer),
        2 => Ok(Variant::Baseline),
        other => Err(Error::Corrupt(format!("unknown variant tag {other}"))),
    }
}

/// Serializes a store: magic, version, variant tag, entry count, then per
/// entry name/rank/dims/payload, closed by a CRC32 of all preceding bytes.
/// Round-trips bit-exactly.
pub fn save_weights(store: &WeightStore, variant: Variant, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    bytes.extend_from_slice(&variant_tag(variant).to_le_bytes());
    bytes.extend_from_slice(&(store.params().len() as u32).to_le_bytes());
    for p in store.params() {
        bytes.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(p.name.as_bytes());
        bytes.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    atomic_write(path, &bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "truncated at byte {} (wanted {n} more, {} available)",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
}

/// Loads a weights file, verifying the trailing checksum first.
pub fn load_weights(path: &Path) -> Result<(WeightStore, Variant)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_weights(&bytes)
}

/// Parses a weights file from raw bytes.
pub fn parse_weights(bytes: &[u8]) -> Result<(WeightStore, Variant)> {
    if bytes.len() < 16 + 4 {
        return Err(Error::Corrupt(format!(
            "weights file too small ({} bytes)",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = LittleEndian::read_u32(tail);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Corrupt(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }

    let mut cur = Cursor { bytes: body, at: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Corrupt("bad magic, not a weights file".into()));
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version(version));
    }
    let variant = variant_from_tag(cur.u32()?)?;
    let count = cur.u32()? as usize;

    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Corrupt(format!("parameter name is not utf-8: {e}")))?;
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?;
        let data: Vec<f32> = payload.chunks_exact(4).map(LittleEndian::read_f32).collect();
        let trainable =
            !(name.ends_with(".running_mean") || name.ends_with(".running_var"));
        store.push(Param {
            name,
            shape,
            data,
            trainable,
        })?;
    }
    if cur.at != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last entry",
            body.len() - cur.at
        )));
    }
    Ok((store, variant))
}
