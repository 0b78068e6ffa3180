//! Synthetic head phantoms and the deterministic geometric oracle that
//! supplies ground-truth defacing masks at desk scale, plus dataset manifest
//! construction with protocol-disjoint splits.
//!
//! A phantom is an ellipsoidal "head" with smooth low-frequency interior
//! texture and a small "nose" bump at the anterior pole. The face is the
//! anterior spherical cap of the head; the oracle defaces a dilated region
//! around that cap (plus the nose) and nothing else.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{MaskVolume, Volume};

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Head semi-axes as a fraction of the margin-adjusted half extent.
    pub head_radius_frac: f64,
    /// Angular half extent of the facial cap, degrees.
    pub face_half_angle_deg: f64,
    /// Extra angular margin defaced around the cap, degrees.
    pub dilation_deg: f64,
    /// Defacing starts at this normalized radius (outer shell of the head).
    pub shell_rmin: f64,
    /// Nose semi-axes as a fraction of the head's.
    pub nose_radius_frac: f64,
    /// Amplitude of the low-frequency intensity texture.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn default_for(dims: [usize; 3], spacing: [f32; 3], seed: u64) -> Self {
        PhantomSpec {
            dims,
            spacing,
            head_radius_frac: 0.82,
            face_half_angle_deg: 35.0,
            dilation_deg: 10.0,
            shell_rmin: 0.52,
            nose_radius_frac: 0.22,
            texture_amplitude: 0.35,
            seed,
        }
    }
}

/// Ellipsoid head description in voxel coordinates.
#[derive(Debug, Clone)]
pub struct HeadGeometry {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Unit vector toward the face, in normalized (q) space.
    pub anterior: [f64; 3],
}

/// Cap parameters used by the oracle when only an image is available.
#[derive(Debug, Clone)]
pub struct CapParams {
    pub total_half_angle_deg: f64,
    pub shell_rmin: f64,
}

impl Default for CapParams {
    fn default() -> Self {
        CapParams {
            total_half_angle_deg: 45.0,
            shell_rmin: 0.52,
        }
    }
}

impl PhantomSpec {
    fn cap(&self) -> CapParams {
        CapParams {
            total_half_angle_deg: self.face_half_angle_deg + self.dilation_deg,
            shell_rmin: self.shell_rmin,
        }
    }

    fn geometry(&self) -> Result<HeadGeometry> {
        let mut radii = [0.0f64; 3];
        for a in 0..3 {
            let half = (self.dims[a] as f64 - 1.0) / 2.0;
            // keep a 2-voxel margin between head and field of view
            radii[a] = self.head_radius_frac * (half - 2.0);
            if radii[a] < 1.0 {
                return Err(Error::Config(format!(
                    "head does not fit: axis {a} with dim {} leaves radius {:.2}",
                    self.dims[a], radii[a]
                )));
            }
        }
        let center = [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ];
        // anterior axis from the default orientation: +height
        let anterior = [0.0, 1.0, 0.0];
        // the nose must also stay inside the margin
        let reach = radii[1] * (0.95 + self.nose_radius_frac);
        if center[1] + reach > (self.dims[1] as f64 - 1.0) - 2.0 {
            return Err(Error::Config(format!(
                "face protrusion exceeds the field of view (reach {reach:.1})"
            )));
        }
        Ok(HeadGeometry {
            center,
            radii,
            anterior,
        })
    }
}

struct NoseGeometry {
    center: [f64; 3],
    radii: [f64; 3],
}

fn nose_of(spec: &PhantomSpec, geom: &HeadGeometry) -> NoseGeometry {
    let mut center = geom.center;
    for a in 0..3 {
        center[a] += geom.anterior[a] * geom.radii[a] * 0.95;
    }
    NoseGeometry {
        center,
        radii: geom.radii.map(|r| r * spec.nose_radius_frac),
    }
}

fn inside_ellipsoid(p: [f64; 3], center: &[f64; 3], radii: &[f64; 3]) -> bool {
    let mut s = 0.0;
    for a in 0..3 {
        let q = (p[a] - center[a]) / radii[a];
        s += q * q;
    }
    s <= 1.0
}

/// Smooth low-frequency texture: a fixed small sum of random cosines.
struct Texture {
    waves: Vec<([f64; 3], f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let waves = (0..4)
            .map(|_| {
                let freq = [
                    rng.gen_range(0.5..2.0) * 2.0 * PI / dims[0] as f64,
                    rng.gen_range(0.5..2.0) * 2.0 * PI / dims[1] as f64,
                    rng.gen_range(0.5..2.0) * 2.0 * PI / dims[2] as f64,
                ];
                let phase = rng.gen_range(0.0..2.0 * PI);
                (freq, phase)
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(f, phase)| (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + phase).cos())
            .sum::<f64>()
            / self.waves.len() as f64
    }
}

fn defaced_by_cap(
    p: [f64; 3],
    geom: &HeadGeometry,
    cap: &CapParams,
) -> bool {
    let mut q = [0.0f64; 3];
    for a in 0..3 {
        q[a] = (p[a] - geom.center[a]) / geom.radii[a];
    }
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    if norm < cap.shell_rmin {
        return false;
    }
    let dot = q[0] * geom.anterior[0] + q[1] * geom.anterior[1] + q[2] * geom.anterior[2];
    dot / norm >= cap.total_half_angle_deg.to_radians().cos()
}

/// Generates a textured head phantom and its ground-truth defacing mask.
/// Fully deterministic per spec + seed.
///
/// The facial cap renders brighter than the rest of the head, the way real
/// facial anatomy stands out from brain tissue; the mask then extends a
/// small geometric dilation beyond that visible structure.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    let geom = spec.geometry()?;
    let nose = nose_of(spec, &geom);
    let cap = spec.cap();
    let face = CapParams {
        total_half_angle_deg: spec.face_half_angle_deg,
        shell_rmin: spec.shell_rmin,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = Texture::new(&mut rng, spec.dims);

    let [d, h, w] = spec.dims;
    let mut image = vec![0.0f32; d * h * w];
    let mut mask = vec![1u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let in_head = inside_ellipsoid(p, &geom.center, &geom.radii);
                let in_nose = inside_ellipsoid(p, &nose.center, &nose.radii);
                if !(in_head || in_nose) {
                    continue;
                }
                let idx = (z * h + y) * w + x;
                let in_face = in_nose || (in_head && defaced_by_cap(p, &geom, &face));
                let t = if in_face {
                    0.78 + 0.5 * spec.texture_amplitude * texture.at(p)
                } else {
                    0.50 + 0.6 * spec.texture_amplitude * texture.at(p)
                };
                image[idx] = t.clamp(0.2001, 1.0) as f32;
                if in_nose || (in_head && defaced_by_cap(p, &geom, &cap)) {
                    mask[idx] = 0;
                }
            }
        }
    }

    let volume = Volume::new(spec.dims, spec.spacing, image)?;
    let mask = MaskVolume::new(spec.dims, spec.spacing, mask)?;
    Ok((volume, mask))
}

/// Estimates head geometry from the intensity support: centroid plus
/// per-axis spread for the ellipsoid, and the protruding foreground (the
/// nose) for the anterior direction.
pub fn estimate_geometry(image: &Volume) -> Result<HeadGeometry> {
    let max = image.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        return Err(Error::EmptyInput("image has no foreground".into()));
    }
    let threshold = 0.05 * max;
    let [d, h, w] = image.dims;

    let mut count = 0f64;
    let mut sum = [0.0f64; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if image.at(z, y, x) > threshold {
                    count += 1.0;
                    sum[0] += z as f64;
                    sum[1] += y as f64;
                    sum[2] += x as f64;
                }
            }
        }
    }
    if count == 0.0 {
        return Err(Error::EmptyInput("image has no foreground".into()));
    }
    let center = [sum[0] / count, sum[1] / count, sum[2] / count];

    let mut var = [0.0f64; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if image.at(z, y, x) > threshold {
                    let p = [z as f64, y as f64, x as f64];
                    for a in 0..3 {
                        let dlt = p[a] - center[a];
                        var[a] += dlt * dlt;
                    }
                }
            }
        }
    }
    // uniform ellipsoid: per-axis variance is r^2 / 5
    let radii = var.map(|v| ((v / count) * 5.0).sqrt().max(1.0));

    // anterior direction from foreground sticking out of the fitted head
    let mut prot_sum = [0.0f64; 3];
    let mut prot_count = 0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if image.at(z, y, x) <= threshold {
                    continue;
                }
                let p = [z as f64, y as f64, x as f64];
                let mut s = 0.0;
                for a in 0..3 {
                    let q = (p[a] - center[a]) / radii[a];
                    s += q * q;
                }
                if s > 1.05f64.powi(2) {
                    for a in 0..3 {
                        prot_sum[a] += p[a] - center[a];
                    }
                    prot_count += 1.0;
                }
            }
        }
    }
    let anterior = if prot_count >= 10.0 {
        // direction in normalized space so anisotropic radii do not skew it
        let mut dir = [0.0f64; 3];
        for a in 0..3 {
            dir[a] = prot_sum[a] / prot_count / radii[a];
        }
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if norm > 0.0 {
            dir.map(|v| v / norm)
        } else {
            default_anterior(image)
        }
    } else {
        default_anterior(image)
    };

    Ok(HeadGeometry {
        center,
        radii,
        anterior,
    })
}

fn default_anterior(image: &Volume) -> [f64; 3] {
    let (axis, sign) = image.orientation.anterior();
    let mut dir = [0.0f64; 3];
    dir[axis] = sign;
    dir
}

/// Deterministic oracle defacer: mask from the known phantom geometry when
/// the spec is available, otherwise from geometry re-estimated off the
/// intensity support. Independent of any learned model.
pub fn oracle_deface(image: &Volume, spec: Option<&PhantomSpec>) -> Result<MaskVolume> {
    match spec {
        Some(spec) => {
            let (_, mask) = generate_phantom(spec)?;
            Ok(mask)
        }
        None => {
            let geom = estimate_geometry(image)?;
            let cap = CapParams::default();
            let max = image.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let threshold = 0.05 * max;
            let [d, h, w] = image.dims;
            let mut mask = vec![1u8; d * h * w];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if image.at(z, y, x) <= threshold {
                            continue;
                        }
                        let p = [z as f64, y as f64, x as f64];
                        if defaced_by_cap(p, &geom, &cap) {
                            mask[(z * h + y) * w + x] = 0;
                        }
                    }
                }
            }
            let mut out = MaskVolume::new(image.dims, image.spacing, mask)?;
            out.orientation = image.orientation;
            Ok(out)
        }
    }
}

// ---- dataset manifest ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split '{other}'"))),
        }
    }
}

/// Acquisition protocol: (field of view, voxel spacing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolId {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

impl ProtocolId {
    pub fn key(&self) -> String {
        format!(
            "{}x{}x{}@{:.3}x{:.3}x{:.3}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing[0],
            self.spacing[1],
            self.spacing[2]
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub protocol: ProtocolId,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn rows_for(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("manifest: {e}")))
    }
}

/// How protocols are divided across splits.
#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Approximate fractions; val/test get at least one protocol each and
    /// rounding favors train.
    Fractions { train: f64, val: f64, test: f64 },
    /// Explicit per-split protocol counts (must sum to the protocol count).
    Counts {
        train: usize,
        val: usize,
        test: usize,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Assigns whole protocols to splits; no protocol ever straddles splits.
pub fn assign_splits(
    protocols: &[ProtocolId],
    spec: &SplitSpec,
    seed: u64,
) -> Result<Vec<(ProtocolId, Split)>> {
    let k = protocols.len();
    if k < 3 {
        return Err(Error::Config(format!(
            "need at least 3 protocols for disjoint train/val/test, got {k}"
        )));
    }
    let (n_train, n_val, n_test) = match spec {
        SplitSpec::Fractions { train, val, test } => {
            let sum = train + val + test;
            if !(0.999..=1.001).contains(&sum) {
                return Err(Error::Config(format!("split fractions sum to {sum}")));
            }
            let n_val = ((k as f64 * val).floor() as usize).max(1);
            let n_test = ((k as f64 * test).floor() as usize).max(1);
            if n_val + n_test >= k {
                return Err(Error::Config("no protocols left for training".into()));
            }
            (k - n_val - n_test, n_val, n_test)
        }
        SplitSpec::Counts { train, val, test } => {
            if train + val + test != k {
                return Err(Error::Config(format!(
                    "split counts {}+{}+{} do not sum to {k} protocols",
                    train, val, test
                )));
            }
            if *train == 0 || *val == 0 || *test == 0 {
                return Err(Error::Config("every split needs >= 1 protocol".into()));
            }
            (*train, *val, *test)
        }
    };

    let mut ordered: Vec<ProtocolId> = protocols.to_vec();
    ordered.sort_by_key(|p| p.key());
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ordered.shuffle(&mut rng);

    let mut out = Vec::with_capacity(k);
    for (i, p) in ordered.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.push((p, split));
    }
    let _ = n_test;
    Ok(out)
}

/// Scans a corpus directory (`images/*.nii` + `masks/*.nii`) and builds a
/// protocol-disjoint manifest.
pub fn build_manifest(dir: &Path, spec: &SplitSpec, seed: u64) -> Result<DatasetManifest> {
    let images_dir = dir.join("images");
    let mut ids: Vec<String> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.strip_suffix(".nii").map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no .nii images under {}",
            images_dir.display()
        )));
    }

    let mut entries = Vec::with_capacity(ids.len());
    let mut protocols: Vec<ProtocolId> = Vec::new();
    for id in &ids {
        let image = PathBuf::from("images").join(format!("{id}.nii"));
        let mask = PathBuf::from("masks").join(format!("{id}.nii"));
        if !dir.join(&mask).exists() {
            return Err(Error::Usage(format!("missing mask for '{id}'")));
        }
        let header = crate::io::read_nifti_header(&dir.join(&image))?;
        let protocol = ProtocolId {
            dims: header.volume_dims()?,
            spacing: header.volume_spacing()?,
        };
        if !protocols.iter().any(|p| p.key() == protocol.key()) {
            protocols.push(protocol.clone());
        }
        entries.push((id.clone(), image, mask, protocol));
    }

    let assignment = assign_splits(&protocols, spec, seed)?;
    let split_of = |p: &ProtocolId| -> Split {
        assignment
            .iter()
            .find(|(q, _)| q.key() == p.key())
            .map(|(_, s)| *s)
            .expect("every protocol assigned")
    };

    let rows = entries
        .into_iter()
        .map(|(id, image, mask, protocol)| ManifestRow {
            split: split_of(&protocol),
            id,
            image,
            mask,
            protocol,
        })
        .collect();
    Ok(DatasetManifest { seed, rows })
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub count: usize,
    pub protocols: usize,
    pub seed: u64,
}

/// Fixed protocol menu spanning 32^3 .. 96x96x64 with varied spacings;
/// protocol indices past the table reuse dims with perturbed spacing.
fn protocol_menu(k: usize) -> Vec<ProtocolId> {
    const TABLE: [([usize; 3], [f32; 3]); 12] = [
        ([32, 32, 32], [2.0, 2.0, 2.0]),
        ([48, 48, 48], [1.5, 1.5, 1.5]),
        ([48, 48, 32], [1.25, 1.25, 1.5]),
        ([64, 64, 64], [1.0, 1.0, 1.0]),
        ([64, 64, 48], [1.0, 1.0, 1.25]),
        ([64, 48, 48], [0.9, 1.1, 1.1]),
        ([80, 80, 64], [1.0, 0.9, 0.9]),
        ([96, 96, 64], [0.8, 0.8, 1.0]),
        ([80, 64, 64], [1.1, 1.0, 1.0]),
        ([96, 64, 48], [0.7, 1.0, 1.2]),
        ([32, 48, 48], [2.0, 1.25, 1.25]),
        ([64, 80, 64], [1.0, 0.85, 1.0]),
    ];
    (0..k)
        .map(|i| {
            let (dims, base) = TABLE[i % TABLE.len()];
            let bump = 1.0 + 0.1 * (i / TABLE.len()) as f32;
            ProtocolId {
                dims,
                spacing: base.map(|s| s * bump),
            }
        })
        .collect()
}

fn phantom_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Generates `count` phantoms round-robin over `protocols` protocols, writes
/// the NIfTI pairs and the manifest. Bit-identical per seed.
pub fn generate_corpus(dir: &Path, opts: &CorpusOptions) -> Result<DatasetManifest> {
    if opts.protocols < 3 {
        return Err(Error::Config(format!(
            "need at least 3 protocols for disjoint splits, got {}",
            opts.protocols
        )));
    }
    if opts.count < opts.protocols {
        return Err(Error::Config(format!(
            "{} phantoms cannot cover {} protocols",
            opts.count, opts.protocols
        )));
    }
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let menu = protocol_menu(opts.protocols);
    for i in 0..opts.count {
        let protocol = &menu[i % opts.protocols];
        let spec = PhantomSpec::default_for(
            protocol.dims,
            protocol.spacing,
            phantom_seed(opts.seed, i),
        );
        let (image, mask) = generate_phantom(&spec)?;
        let id = format!("p{i:03}");
        crate::io::write_nifti(&image, &images_dir.join(format!("{id}.nii")))?;
        crate::io::write_nifti_mask(&mask, &masks_dir.join(format!("{id}.nii")))?;
    }

    let manifest = build_manifest(dir, &SplitSpec::default(), opts.seed)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A manifest row with its volumes loaded.
pub struct LoadedCase {
    pub id: String,
    pub protocol: ProtocolId,
    pub split: Split,
    pub image: Volume,
    pub mask: MaskVolume,
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedCase>> {
    manifest
        .rows_for(split)
        .into_iter()
        .map(|row| {
            let image = crate::io::read_nifti(&dir.join(&row.image))?;
            let mask = crate::io::read_nifti_mask(&dir.join(&row.mask))?;
            Ok(LoadedCase {
                id: row.id.clone(),
                protocol: row.protocol.clone(),
                split: row.split,
                image,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec::default_for([32, 32, 32], [1.0; 3], 11);
        let (v1, m1) = generate_phantom(&spec).unwrap();
        let (v2, m2) = generate_phantom(&spec).unwrap();
        assert_eq!(v1.data, v2.data);
        assert_eq!(m1.data, m2.data);
        let other = PhantomSpec {
            seed: 12,
            ..spec
        };
        let (v3, _) = generate_phantom(&other).unwrap();
        assert_ne!(v1.data, v3.data);
    }

    #[test]
    fn defaced_fraction_in_expected_band() {
        for (dims, seed) in [
            ([32, 32, 32], 0u64),
            ([48, 48, 48], 1),
            ([64, 64, 64], 2),
            ([96, 96, 64], 3),
        ] {
            let spec = PhantomSpec::default_for(dims, [1.0; 3], seed);
            let (_, mask) = generate_phantom(&spec).unwrap();
            let frac = mask.defaced_fraction();
            assert!(
                (0.02..=0.15).contains(&frac),
                "dims {dims:?}: defaced fraction {frac}"
            );
        }
    }

    #[test]
    fn background_is_never_defaced_and_no_posterior_voxel() {
        let spec = PhantomSpec::default_for([48, 48, 48], [1.0; 3], 5);
        let (image, mask) = generate_phantom(&spec).unwrap();
        let center_y = (48.0 - 1.0) / 2.0;
        for z in 0..48 {
            for y in 0..48 {
                for x in 0..48 {
                    let idx = mask.index(z, y, x);
                    if image.at(z, y, x) == 0.0 {
                        assert_eq!(mask.data[idx], 1, "background defaced at {z},{y},{x}");
                    }
                    if (y as f64) < center_y && mask.data[idx] == 0 {
                        panic!("posterior voxel defaced at {z},{y},{x}");
                    }
                }
            }
        }
    }

    #[test]
    fn intensities_in_unit_range_with_textured_interior() {
        let spec = PhantomSpec::default_for([32, 32, 32], [1.0; 3], 8);
        let (image, _) = generate_phantom(&spec).unwrap();
        assert!(image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let interior: Vec<f32> = image.data.iter().cloned().filter(|&v| v > 0.0).collect();
        assert!(interior.iter().all(|&v| v > 0.2));
        let lo = interior.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = interior.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(hi - lo > 0.1, "texture too flat: [{lo}, {hi}]");
    }

    #[test]
    fn oracle_with_spec_reproduces_generated_mask() {
        let spec = PhantomSpec::default_for([32, 48, 32], [1.0; 3], 21);
        let (image, mask) = generate_phantom(&spec).unwrap();
        let oracle = oracle_deface(&image, Some(&spec)).unwrap();
        assert_eq!(oracle.data, mask.data);
        assert_eq!(dice(&oracle, &mask).unwrap(), 1.0);
    }

    #[test]
    fn oracle_estimate_close_on_unrotated_phantom() {
        let spec = PhantomSpec::default_for([48, 48, 48], [1.0; 3], 33);
        let (image, mask) = generate_phantom(&spec).unwrap();
        let oracle = oracle_deface(&image, None).unwrap();
        let d = dice(&oracle, &mask).unwrap();
        assert!(d >= 0.9, "estimated-geometry dice {d}");
    }

    #[test]
    fn oracle_estimate_tracks_small_rotations() {
        use crate::pipeline::{augment, RigidAugmentation};
        let spec = PhantomSpec::default_for([48, 48, 48], [1.0; 3], 17);
        let (image, mask) = generate_phantom(&spec).unwrap();
        let aug = RigidAugmentation {
            rotation_deg: [8.0, 0.0, 6.0],
            scale: 1.0,
        };
        let (rimage, rmask) = augment(&image, &mask, &aug).unwrap();
        let oracle = oracle_deface(&rimage, None).unwrap();
        let d = dice(&oracle, &rmask).unwrap();
        assert!(d >= 0.9, "rotated estimated-geometry dice {d}");
    }

    #[test]
    fn oracle_empty_foreground_is_error() {
        let image = Volume::zeros([8, 8, 8], [1.0; 3]);
        assert!(oracle_deface(&image, None).is_err());
    }

    #[test]
    fn head_must_fit_field_of_view() {
        let mut spec = PhantomSpec::default_for([8, 8, 8], [1.0; 3], 0);
        spec.head_radius_frac = 2.0;
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn split_assignment_counts() {
        let protocols = protocol_menu(30);
        let assigned = assign_splits(&protocols, &SplitSpec::default(), 1).unwrap();
        let count = |s: Split| assigned.iter().filter(|(_, sp)| *sp == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (24, 3, 3)
        );

        let ten = protocol_menu(10);
        let assigned = assign_splits(&ten, &SplitSpec::default(), 1).unwrap();
        let count = |s: Split| assigned.iter().filter(|(_, sp)| *sp == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (8, 1, 1)
        );
    }

    #[test]
    fn split_counts_override_expresses_20_5_5() {
        let protocols = protocol_menu(30);
        let spec = SplitSpec::Counts {
            train: 20,
            val: 5,
            test: 5,
        };
        let assigned = assign_splits(&protocols, &spec, 9).unwrap();
        let count = |s: Split| assigned.iter().filter(|(_, sp)| *sp == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (20, 5, 5)
        );
    }

    #[test]
    fn too_few_protocols_rejected() {
        let protocols = protocol_menu(2);
        assert!(assign_splits(&protocols, &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn split_assignment_is_deterministic_and_disjoint() {
        let protocols = protocol_menu(7);
        let a = assign_splits(&protocols, &SplitSpec::default(), 4).unwrap();
        let b = assign_splits(&protocols, &SplitSpec::default(), 4).unwrap();
        for ((pa, sa), (pb, sb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.key(), pb.key());
            assert_eq!(sa, sb);
        }
        // a protocol appears exactly once
        let mut keys: Vec<String> = a.iter().map(|(p, _)| p.key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 7);
    }

    #[test]
    fn corpus_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CorpusOptions {
            count: 6,
            protocols: 3,
            seed: 12,
        };
        let manifest = generate_corpus(dir.path(), &opts).unwrap();
        assert_eq!(manifest.rows.len(), 6);
        let train = load_split(dir.path(), &manifest, Split::Train).unwrap();
        assert!(!train.is_empty());
        for case in &train {
            assert!(case.mask.is_binary());
            assert_eq!(case.image.dims, case.mask.dims);
        }
        // reloads identically
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.rows.len(), manifest.rows.len());
    }
}
