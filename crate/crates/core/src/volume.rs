//! Voxel grids and the canonicalisation pipeline: isotropic resampling,
//! intensity clipping and z-scoring, background stripping, and the on-disk
//! volume format.
//!
//! Geometry convention: axis 0 is the axial (depth) axis. Voxel `i` along an
//! axis with spacing `s` covers `[i*s, (i+1)*s)` mm and has its centre at
//! `(i + 0.5) * s`; input and output of a resample share the same frame,
//! anchored at the volume corner. Samples falling outside the input grid are
//! edge-clamped, so the outermost output voxels of an upsample hold clamped
//! values rather than extrapolations.

use std::io::{Read, Write as IoWrite};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_CLIP_MIN: f64 = -1000.0;
pub const HU_CLIP_MAX: f64 = 1900.0;

/// As-ingested volume in Hounsfield units with per-axis spacing.
#[derive(Clone, Debug)]
pub struct RawVolume {
    pub voxels: Array3<f64>,
    /// mm per voxel along each axis, axis order matching `voxels`.
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub source_id: String,
}

impl RawVolume {
    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::data(format!(
                "volume '{}': spacing must be positive and finite, got {:?}",
                self.source_id, self.spacing
            )));
        }
        if !self.voxels.iter().all(|v| v.is_finite()) {
            return Err(Error::data(format!(
                "volume '{}': non-finite voxel values",
                self.source_id
            )));
        }
        Ok(())
    }
}

/// Isotropic, clipped, z-scored, optionally background-stripped volume.
#[derive(Clone, Debug)]
pub struct CanonicalVolume {
    pub voxels: Array3<f64>,
    /// mm per voxel, all axes.
    pub iso_spacing: f64,
    pub origin: [f64; 3],
    /// Position of the retained region in the resampled frame, voxels.
    pub crop_offset: [usize; 3],
    pub norm_stats: NormSummary,
    pub source_id: String,
}

/// The (mu, sigma) actually applied during normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub mu_hu: f64,
    pub sigma_hu: f64,
}

/// Streaming mean/variance accumulator over clipped HU voxels (Welford form,
/// population variance). Merging partial accumulators is associative to
/// floating tolerance, so corpus statistics are chunking-order independent.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct NormStats {
    pub n: u64,
    mean: f64,
    m2: f64,
}

impl NormStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Accumulate a raw volume's voxels, clipped to the HU window first so
    /// the statistics match what normalisation will see.
    pub fn push_volume(&mut self, vol: &RawVolume) {
        for &v in vol.voxels.iter() {
            self.push(v.clamp(HU_CLIP_MIN, HU_CLIP_MAX));
        }
    }

    pub fn merge(&mut self, other: &NormStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let delta = other.mean - self.mean;
        let n = na + nb;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.n += other.n;
    }

    pub fn mu(&self) -> f64 {
        self.mean
    }

    pub fn sigma(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }

    /// Finalise into the applied (mu, sigma), rejecting degenerate spreads.
    pub fn summary(&self) -> Result<NormSummary> {
        if self.n == 0 {
            return Err(Error::data("normalisation stats: no voxels seen"));
        }
        let sigma = self.sigma();
        if !(sigma > 1e-12) {
            return Err(Error::data(format!(
                "normalisation stats degenerate: sigma = {sigma} over {} voxels",
                self.n
            )));
        }
        Ok(NormSummary {
            mu_hu: self.mean,
            sigma_hu: sigma,
        })
    }
}

// ---- resampling ----

/// Resolve the isotropic target: spacing `s* = max(min(spacing),
/// max_extent/max_side)` and per-axis output sides `round(n*s/s*)`.
pub fn plan_resample(shape: [usize; 3], spacing: [f64; 3], max_side: usize) -> ([usize; 3], f64) {
    let min_spacing = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_extent = (0..3).map(|a| shape[a] as f64 * spacing[a]).fold(0.0, f64::max);
    let s = min_spacing.max(max_extent / max_side as f64);
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = ((shape[a] as f64 * spacing[a] / s).round() as usize).max(1);
    }
    (out, s)
}

/// Trilinear resample onto an isotropic grid, capping the largest side at
/// `max_side` voxels. Physical extent is preserved to within one voxel per
/// axis. Exact (to rounding) on fields affine in the voxel-centre
/// coordinates wherever the sample point lies inside the input grid.
pub fn resample_isotropic(raw: &RawVolume, max_side: usize) -> Result<RawVolume> {
    raw.validate()?;
    if max_side < 1 {
        return Err(Error::config("max_side must be at least 1"));
    }
    let dims = raw.voxels.dim();
    let shape = [dims.0, dims.1, dims.2];
    if shape.iter().any(|&n| n < 2) {
        return Err(Error::data(format!(
            "volume '{}': degenerate shape {:?}, every side needs at least 2 voxels",
            raw.source_id, shape
        )));
    }
    let (out_shape, s) = plan_resample(shape, raw.spacing, max_side);
    let ratios = [
        s / raw.spacing[0],
        s / raw.spacing[1],
        s / raw.spacing[2],
    ];
    // per-axis source coordinate tables: u = (j + 0.5) * s_out/s_in - 0.5
    let mut tables: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(3);
    for a in 0..3 {
        let n_in = shape[a];
        let table = (0..out_shape[a])
            .map(|j| {
                let u = ((j as f64 + 0.5) * ratios[a] - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, u - i0 as f64)
            })
            .collect();
        tables.push(table);
    }
    let src = &raw.voxels;
    let mut out = Array3::zeros((out_shape[0], out_shape[1], out_shape[2]));
    for z in 0..out_shape[0] {
        let (z0, z1, tz) = tables[0][z];
        for y in 0..out_shape[1] {
            let (y0, y1, ty) = tables[1][y];
            for x in 0..out_shape[2] {
                let (x0, x1, tx) = tables[2][x];
                let c00 = src[[z0, y0, x0]] * (1.0 - tx) + src[[z0, y0, x1]] * tx;
                let c01 = src[[z0, y1, x0]] * (1.0 - tx) + src[[z0, y1, x1]] * tx;
                let c10 = src[[z1, y0, x0]] * (1.0 - tx) + src[[z1, y0, x1]] * tx;
                let c11 = src[[z1, y1, x0]] * (1.0 - tx) + src[[z1, y1, x1]] * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                out[[z, y, x]] = c0 * (1.0 - tz) + c1 * tz;
            }
        }
    }
    Ok(RawVolume {
        voxels: out,
        spacing: [s, s, s],
        origin: raw.origin,
        source_id: raw.source_id.clone(),
    })
}

/// Per-axis interpolation table for cell-centred trilinear resizing:
/// `u = (j + 0.5) * n_in/n_out - 0.5`, edge-clamped; entries are
/// `(lower index, upper index, fractional weight)`.
pub fn lin_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let u = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Trilinear resize to an explicit voxel shape (cell-centred convention,
/// same as [`resample_isotropic`]).
pub fn resize_trilinear(src: &Array3<f64>, out_shape: [usize; 3]) -> Array3<f64> {
    let dims = src.dim();
    let tables = [
        lin_table(dims.0, out_shape[0]),
        lin_table(dims.1, out_shape[1]),
        lin_table(dims.2, out_shape[2]),
    ];
    let mut out = Array3::zeros((out_shape[0], out_shape[1], out_shape[2]));
    for z in 0..out_shape[0] {
        let (z0, z1, tz) = tables[0][z];
        for y in 0..out_shape[1] {
            let (y0, y1, ty) = tables[1][y];
            for x in 0..out_shape[2] {
                let (x0, x1, tx) = tables[2][x];
                let c00 = src[[z0, y0, x0]] * (1.0 - tx) + src[[z0, y0, x1]] * tx;
                let c01 = src[[z0, y1, x0]] * (1.0 - tx) + src[[z0, y1, x1]] * tx;
                let c10 = src[[z1, y0, x0]] * (1.0 - tx) + src[[z1, y0, x1]] * tx;
                let c11 = src[[z1, y1, x0]] * (1.0 - tx) + src[[z1, y1, x1]] * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                out[[z, y, x]] = c0 * (1.0 - tz) + c1 * tz;
            }
        }
    }
    out
}

// ---- normalisation ----

/// Clamp to the HU window and z-score with corpus statistics.
pub fn clip_and_normalize(raw: &RawVolume, stats: NormSummary) -> Result<CanonicalVolume> {
    raw.validate()?;
    if !(stats.sigma_hu > 0.0) {
        return Err(Error::config(format!(
            "sigma must be positive, got {}",
            stats.sigma_hu
        )));
    }
    let spacing = raw.spacing;
    if !(spacing[0] == spacing[1] && spacing[1] == spacing[2]) {
        return Err(Error::data(format!(
            "volume '{}' must be isotropic before normalisation, spacing {:?}",
            raw.source_id, spacing
        )));
    }
    let voxels = raw
        .voxels
        .mapv(|v| (v.clamp(HU_CLIP_MIN, HU_CLIP_MAX) - stats.mu_hu) / stats.sigma_hu);
    Ok(CanonicalVolume {
        voxels,
        iso_spacing: spacing[0],
        origin: raw.origin,
        crop_offset: [0, 0, 0],
        norm_stats: stats,
        source_id: raw.source_id.clone(),
    })
}

// ---- background stripping ----

/// Bounding box of the largest 6-connected component of `mask`, with its
/// voxel count. Deterministic: among equal-sized components the first in
/// scan order wins.
pub fn largest_component_bbox(mask: &Array3<bool>) -> Option<([usize; 3], [usize; 3], usize)> {
    let (nz, ny, nx) = mask.dim();
    let flat = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut visited = vec![false; nz * ny * nx];
    let mut best: Option<([usize; 3], [usize; 3], usize)> = None;
    let mut stack = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] || visited[flat(z, y, x)] {
                    continue;
                }
                let mut lo = [z, y, x];
                let mut hi = [z, y, x];
                let mut size = 0usize;
                visited[flat(z, y, x)] = true;
                stack.push((z, y, x));
                while let Some((cz, cy, cx)) = stack.pop() {
                    size += 1;
                    lo = [lo[0].min(cz), lo[1].min(cy), lo[2].min(cx)];
                    hi = [hi[0].max(cz), hi[1].max(cy), hi[2].max(cx)];
                    let mut neighbours = [(0usize, 0usize, 0usize); 6];
                    let mut k = 0;
                    if cz > 0 { neighbours[k] = (cz - 1, cy, cx); k += 1; }
                    if cz + 1 < nz { neighbours[k] = (cz + 1, cy, cx); k += 1; }
                    if cy > 0 { neighbours[k] = (cz, cy - 1, cx); k += 1; }
                    if cy + 1 < ny { neighbours[k] = (cz, cy + 1, cx); k += 1; }
                    if cx > 0 { neighbours[k] = (cz, cy, cx - 1); k += 1; }
                    if cx + 1 < nx { neighbours[k] = (cz, cy, cx + 1); k += 1; }
                    for &(az, ay, ax) in &neighbours[..k] {
                        if mask[[az, ay, ax]] && !visited[flat(az, ay, ax)] {
                            visited[flat(az, ay, ax)] = true;
                            stack.push((az, ay, ax));
                        }
                    }
                }
                if best.map(|(_, _, s)| size > s).unwrap_or(true) {
                    best = Some((lo, hi, size));
                }
            }
        }
    }
    best
}

/// Outcome flag for [`strip_background`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripOutcome {
    Cropped,
    /// Nothing exceeded the threshold; volume returned unchanged.
    NothingAboveThreshold,
}

/// Crop to the bounding box of the largest 6-connected foreground component.
/// `air_hu_threshold` is given in HU and mapped through the volume's stored
/// normalisation before comparison. Never enlarges; idempotent.
pub fn strip_background(
    vol: &CanonicalVolume,
    air_hu_threshold: f64,
) -> Result<(CanonicalVolume, StripOutcome)> {
    if !(HU_CLIP_MIN..=HU_CLIP_MAX).contains(&air_hu_threshold) {
        return Err(Error::config(format!(
            "air threshold {air_hu_threshold} HU outside the clip window [{HU_CLIP_MIN}, {HU_CLIP_MAX}]"
        )));
    }
    let thr = (air_hu_threshold - vol.norm_stats.mu_hu) / vol.norm_stats.sigma_hu;
    let mask = vol.voxels.mapv(|v| v > thr);
    let Some((lo, hi, _size)) = largest_component_bbox(&mask) else {
        return Ok((vol.clone(), StripOutcome::NothingAboveThreshold));
    };
    let cropped = vol
        .voxels
        .slice(ndarray::s![
            lo[0]..hi[0] + 1,
            lo[1]..hi[1] + 1,
            lo[2]..hi[2] + 1
        ])
        .to_owned();
    Ok((
        CanonicalVolume {
            voxels: cropped,
            iso_spacing: vol.iso_spacing,
            origin: vol.origin,
            crop_offset: [
                vol.crop_offset[0] + lo[0],
                vol.crop_offset[1] + lo[1],
                vol.crop_offset[2] + lo[2],
            ],
            norm_stats: vol.norm_stats,
            source_id: vol.source_id.clone(),
        },
        StripOutcome::Cropped,
    ))
}

// ---- on-disk format ----
//
// Binary array file: magic "VVOL", version u32, dtype u32 (1 = f64, 2 = u8),
// rank u32, dims u64 each, then the payload little-endian in C order. A JSON
// sidecar at `<file>.json` carries geometry and provenance.

const VVOL_MAGIC: &[u8; 4] = b"VVOL";
const VVOL_VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;
const DTYPE_U8: u32 = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub kind: String,
    pub source_id: String,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    #[serde(default)]
    pub crop_offset: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormSummary>,
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn write_header(w: &mut impl IoWrite, dtype: u32, dims: &[usize]) -> Result<()> {
    w.write_all(VVOL_MAGIC)?;
    w.write_u32::<LittleEndian>(VVOL_VERSION)?;
    w.write_u32::<LittleEndian>(dtype)?;
    w.write_u32::<LittleEndian>(dims.len() as u32)?;
    for &d in dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<(u32, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::data(format!("{}: truncated header ({e})", path.display())))?;
    if &magic != VVOL_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {magic:?}, not a volume file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VVOL_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported volume file version {version}",
            path.display()
        )));
    }
    let dtype = r.read_u32::<LittleEndian>()?;
    let rank = r.read_u32::<LittleEndian>()?;
    if rank == 0 || rank > 8 {
        return Err(Error::data(format!("{}: absurd rank {rank}", path.display())));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    Ok((dtype, dims))
}

pub fn write_array_f64(path: &Path, data: &ArrayD<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, DTYPE_F64, data.shape())?;
    let standard = data.view().as_standard_layout().to_owned();
    for &v in standard.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array_f64(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, dims) = read_header(&mut r, path)?;
    if dtype != DTYPE_F64 {
        return Err(Error::data(format!(
            "{}: expected f64 payload, found dtype {dtype}",
            path.display()
        )));
    }
    let len: usize = dims.iter().product();
    let mut buf = vec![0.0f64; len];
    for v in buf.iter_mut() {
        *v = r
            .read_f64::<LittleEndian>()
            .map_err(|e| Error::data(format!("{}: truncated payload ({e})", path.display())))?;
    }
    ArrayD::from_shape_vec(IxDyn(&dims), buf)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_array_u8(path: &Path, data: &ArrayD<u8>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, DTYPE_U8, data.shape())?;
    let standard = data.view().as_standard_layout().to_owned();
    w.write_all(standard.as_slice().unwrap())?;
    w.flush()?;
    Ok(())
}

pub fn read_array_u8(path: &Path) -> Result<ArrayD<u8>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, dims) = read_header(&mut r, path)?;
    if dtype != DTYPE_U8 {
        return Err(Error::data(format!(
            "{}: expected u8 payload, found dtype {dtype}",
            path.display()
        )));
    }
    let len: usize = dims.iter().product();
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::data(format!("{}: truncated payload ({e})", path.display())))?;
    ArrayD::from_shape_vec(IxDyn(&dims), buf)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn write_sidecar(path: &Path, sidecar: &VolumeSidecar) -> Result<()> {
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::data(format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<VolumeSidecar> {
    let sp = sidecar_path(path);
    let json = std::fs::read_to_string(&sp)
        .map_err(|e| Error::data(format!("{}: missing sidecar ({e})", sp.display())))?;
    serde_json::from_str(&json).map_err(|e| Error::data(format!("{}: {e}", sp.display())))
}

impl RawVolume {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_array_f64(path, &self.voxels.clone().into_dyn())?;
        write_sidecar(
            path,
            &VolumeSidecar {
                kind: "raw".into(),
                source_id: self.source_id.clone(),
                spacing: self.spacing,
                origin: self.origin,
                crop_offset: [0, 0, 0],
                norm_stats: None,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = read_sidecar(path)?;
        if sidecar.kind != "raw" {
            return Err(Error::data(format!(
                "{}: expected a raw volume, found kind '{}'",
                path.display(),
                sidecar.kind
            )));
        }
        let data = read_array_f64(path)?;
        let voxels = data
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let vol = RawVolume {
            voxels,
            spacing: sidecar.spacing,
            origin: sidecar.origin,
            source_id: sidecar.source_id,
        };
        vol.validate()?;
        Ok(vol)
    }
}

impl CanonicalVolume {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_array_f64(path, &self.voxels.clone().into_dyn())?;
        write_sidecar(
            path,
            &VolumeSidecar {
                kind: "canonical".into(),
                source_id: self.source_id.clone(),
                spacing: [self.iso_spacing; 3],
                origin: self.origin,
                crop_offset: self.crop_offset,
                norm_stats: Some(self.norm_stats),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = read_sidecar(path)?;
        if sidecar.kind != "canonical" {
            return Err(Error::data(format!(
                "{}: expected a canonical volume, found kind '{}'",
                path.display(),
                sidecar.kind
            )));
        }
        let norm_stats = sidecar.norm_stats.ok_or_else(|| {
            Error::data(format!("{}: canonical sidecar lacks norm_stats", path.display()))
        })?;
        let data = read_array_f64(path)?;
        let voxels = data
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(CanonicalVolume {
            voxels,
            iso_spacing: sidecar.spacing[0],
            origin: sidecar.origin,
            crop_offset: sidecar.crop_offset,
            norm_stats,
            source_id: sidecar.source_id,
        })
    }
}

/// Ingestion boundary: anything that can produce a [`RawVolume`] from a
/// file. The native array format is the default; readers for standard
/// medical formats can be plugged in at the CLI layer.
pub trait VolumeReader {
    fn read_volume(&self, path: &Path) -> Result<RawVolume>;
}

/// Reader for the native `.vvol` + sidecar format.
pub struct NativeReader;

impl VolumeReader for NativeReader {
    fn read_volume(&self, path: &Path) -> Result<RawVolume> {
        RawVolume::load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ramp_z(shape: (usize, usize, usize), spacing: [f64; 3]) -> RawVolume {
        // f(voxel) = physical z-coordinate of the voxel centre, in mm
        let voxels = Array3::from_shape_fn(shape, |(z, _, _)| (z as f64 + 0.5) * spacing[0]);
        RawVolume {
            voxels,
            spacing,
            origin: [0.0; 3],
            source_id: "ramp".into(),
        }
    }

    /// Separable reference resampler: one axis at a time, same convention.
    fn resample_oracle(raw: &RawVolume, max_side: usize) -> RawVolume {
        let dims = raw.voxels.dim();
        let (out_shape, s) = plan_resample([dims.0, dims.1, dims.2], raw.spacing, max_side);
        let mut data = raw.voxels.clone();
        for axis in 0..3 {
            let cur = data.dim();
            let cur_arr = [cur.0, cur.1, cur.2];
            let n_in = cur_arr[axis];
            let n_out = out_shape[axis];
            let ratio = s / raw.spacing[axis];
            let mut new_shape = cur_arr;
            new_shape[axis] = n_out;
            let mut next = Array3::zeros((new_shape[0], new_shape[1], new_shape[2]));
            for z in 0..new_shape[0] {
                for y in 0..new_shape[1] {
                    for x in 0..new_shape[2] {
                        let j = [z, y, x][axis];
                        let u = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                        let i0 = u.floor() as usize;
                        let i1 = (i0 + 1).min(n_in - 1);
                        let t = u - i0 as f64;
                        let mut idx0 = [z, y, x];
                        idx0[axis] = i0;
                        let mut idx1 = [z, y, x];
                        idx1[axis] = i1;
                        next[[z, y, x]] =
                            data[[idx0[0], idx0[1], idx0[2]]] * (1.0 - t)
                                + data[[idx1[0], idx1[1], idx1[2]]] * t;
                    }
                }
            }
            data = next;
        }
        RawVolume {
            voxels: data,
            spacing: [s; 3],
            origin: raw.origin,
            source_id: raw.source_id.clone(),
        }
    }

    #[test]
    fn plan_matches_side_limit_arithmetic() {
        let (shape, s) = plan_resample([512, 512, 1024], [0.5, 0.5, 0.5], 768);
        assert!((s - 0.5 * 1024.0 / 768.0).abs() < 1e-12);
        assert_eq!(shape, [384, 384, 768]);
        // extent preserved within one voxel per axis
        for (a, &n_in) in [512usize, 512, 1024].iter().enumerate() {
            let extent_in = n_in as f64 * 0.5;
            let extent_out = shape[a] as f64 * s;
            assert!((extent_in - extent_out).abs() <= s);
        }
        let (shape2, s2) = plan_resample([100, 100, 50], [1.0, 1.0, 2.0], 768);
        assert_eq!(shape2, [100, 100, 100]);
        assert_eq!(s2, 1.0);
    }

    #[test]
    fn ramp_resample_is_exact_where_interior() {
        let raw = ramp_z((50, 100, 100), [2.0, 1.0, 1.0]);
        let out = resample_isotropic(&raw, 768).unwrap();
        assert_eq!(out.voxels.dim(), (100, 100, 100));
        assert_eq!(out.spacing, [1.0, 1.0, 1.0]);
        let n_in = 50_f64;
        for z in 0..100 {
            let u = (z as f64 + 0.5) * 0.5 - 0.5;
            let expected_interior = (z as f64 + 0.5) * 1.0;
            let got = out.voxels[[z, 50, 50]];
            if u >= 0.0 && u <= n_in - 1.0 {
                let rel = (got - expected_interior).abs() / expected_interior.abs().max(1.0);
                assert!(rel < 1e-6, "z={z} got {got} want {expected_interior}");
            } else {
                // edge-clamped: value of the nearest input voxel centre
                let clamped = u.clamp(0.0, n_in - 1.0);
                let expected_edge = (clamped + 0.5) * 2.0;
                assert!((got - expected_edge).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isotropic_within_limit_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let voxels = Array3::from_shape_fn((16, 16, 16), |_| rng.random_range(-1000.0..1900.0));
        let raw = RawVolume {
            voxels: voxels.clone(),
            spacing: [0.7; 3],
            origin: [0.0; 3],
            source_id: "iso".into(),
        };
        let out = resample_isotropic(&raw, 768).unwrap();
        assert_eq!(out.spacing, [0.7; 3]);
        assert!(out
            .voxels
            .iter()
            .zip(voxels.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resample_matches_separable_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let voxels = Array3::from_shape_fn((9, 7, 11), |_| rng.random_range(-500.0..500.0));
        let raw = RawVolume {
            voxels,
            spacing: [1.3, 0.8, 2.1],
            origin: [0.0; 3],
            source_id: "rand".into(),
        };
        let a = resample_isotropic(&raw, 64).unwrap();
        let b = resample_oracle(&raw, 64);
        assert_eq!(a.voxels.dim(), b.voxels.dim());
        for (x, y) in a.voxels.iter().zip(b.voxels.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn resample_rejects_degenerate_and_bad_spacing() {
        let thin = RawVolume {
            voxels: Array3::zeros((1, 8, 8)),
            spacing: [1.0; 3],
            origin: [0.0; 3],
            source_id: "thin".into(),
        };
        assert!(resample_isotropic(&thin, 768).is_err());
        let bad = RawVolume {
            voxels: Array3::zeros((4, 4, 4)),
            spacing: [0.0, 1.0, 1.0],
            origin: [0.0; 3],
            source_id: "bad".into(),
        };
        assert!(resample_isotropic(&bad, 768).is_err());
    }

    #[test]
    fn normalize_hand_values() {
        let stats = NormSummary {
            mu_hu: -300.0,
            sigma_hu: 500.0,
        };
        let raw = RawVolume {
            voxels: Array3::from_shape_fn((2, 2, 2), |(z, y, x)| {
                [2500.0, -300.0, -1500.0, 0.0][(z * 4 + y * 2 + x) % 4]
            }),
            spacing: [1.0; 3],
            origin: [0.0; 3],
            source_id: "hand".into(),
        };
        let canon = clip_and_normalize(&raw, stats).unwrap();
        assert!((canon.voxels[[0, 0, 0]] - 4.4).abs() < 1e-12);
        assert!((canon.voxels[[0, 0, 1]] - 0.0).abs() < 1e-12);
        assert!((canon.voxels[[0, 1, 0]] - (-1.4)).abs() < 1e-12);
        // bounded by the clipped extremes
        let lo = (HU_CLIP_MIN + 300.0) / 500.0;
        let hi = (HU_CLIP_MAX + 300.0) / 500.0;
        assert!(canon.voxels.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn normalize_is_monotone() {
        let stats = NormSummary {
            mu_hu: 100.0,
            sigma_hu: 250.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut values: Vec<f64> = (0..64).map(|_| rng.random_range(-2000.0..3000.0)).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let raw = RawVolume {
            voxels: Array3::from_shape_vec((4, 4, 4), values).unwrap(),
            spacing: [1.0; 3],
            origin: [0.0; 3],
            source_id: "mono".into(),
        };
        let canon = clip_and_normalize(&raw, stats).unwrap();
        let out: Vec<f64> = canon.voxels.iter().cloned().collect();
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn norm_stats_pooled_and_mergeable() {
        let mut a = NormStats::new();
        a.push(0.0);
        a.push(0.0);
        let mut b = NormStats::new();
        b.push(2.0);
        b.push(2.0);
        let mut merged = a;
        merged.merge(&b);
        assert!((merged.mu() - 1.0).abs() < 1e-15);
        assert!((merged.sigma() - 1.0).abs() < 1e-15);

        // merge associativity vs single pass on random chunks
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let chunks: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..512).map(|_| rng.random_range(-1200.0..2200.0)).collect())
            .collect();
        let mut single = NormStats::new();
        for c in &chunks {
            for &x in c {
                single.push(x.clamp(HU_CLIP_MIN, HU_CLIP_MAX));
            }
        }
        let mut left = NormStats::new();
        for c in &chunks {
            let mut part = NormStats::new();
            for &x in c {
                part.push(x.clamp(HU_CLIP_MIN, HU_CLIP_MAX));
            }
            left.merge(&part);
        }
        let mut right = NormStats::new();
        for c in chunks.iter().rev() {
            let mut part = NormStats::new();
            for &x in c {
                part.push(x.clamp(HU_CLIP_MIN, HU_CLIP_MAX));
            }
            right.merge(&part);
        }
        assert!((left.mu() - single.mu()).abs() < 1e-9);
        assert!((left.sigma() - single.sigma()).abs() < 1e-9);
        assert!((right.mu() - single.mu()).abs() < 1e-9);
        assert!((right.sigma() - single.sigma()).abs() < 1e-9);
    }

    #[test]
    fn norm_stats_degenerate_rejected() {
        let mut s = NormStats::new();
        for _ in 0..10 {
            s.push(42.0);
        }
        assert!(s.summary().is_err());
        assert!(NormStats::new().summary().is_err());
    }

    fn canon_from(voxels: Array3<f64>) -> CanonicalVolume {
        CanonicalVolume {
            voxels,
            iso_spacing: 1.0,
            origin: [0.0; 3],
            crop_offset: [0, 0, 0],
            norm_stats: NormSummary {
                mu_hu: 0.0,
                sigma_hu: 1000.0,
            },
            source_id: "phantom".into(),
        }
    }

    #[test]
    fn strip_finds_sphere_bbox() {
        let r = 12.0f64;
        let c = 31.5f64;
        // sphere of 0 HU in air; normalised with (0, 1000)
        let voxels = Array3::from_shape_fn((64, 64, 64), |(z, y, x)| {
            let d2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            if d2 <= r * r {
                0.0
            } else {
                -1.0 // -1000 HU
            }
        });
        let vol = canon_from(voxels);
        let (out, outcome) = strip_background(&vol, -500.0).unwrap();
        assert_eq!(outcome, StripOutcome::Cropped);
        let expect_lo = (c - r).floor() as usize;
        let expect_hi = (c + r).ceil() as usize;
        for a in 0..3 {
            assert!(out.crop_offset[a].abs_diff(expect_lo) <= 1);
            let hi = out.crop_offset[a] + out.voxels.dim().0 - 1;
            assert!(hi.abs_diff(expect_hi) <= 1, "axis {a}");
        }
        // idempotent
        let (out2, _) = strip_background(&out, -500.0).unwrap();
        assert_eq!(out2.voxels.dim(), out.voxels.dim());
        assert_eq!(out2.crop_offset, out.crop_offset);
    }

    /// Union-find component labelling, structurally unlike the BFS path.
    fn components_oracle(mask: &Array3<bool>) -> Vec<(Vec<[usize; 3]>, usize)> {
        let (nz, ny, nx) = mask.dim();
        let flat = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
        let mut parent: Vec<usize> = (0..nz * ny * nx).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !mask[[z, y, x]] {
                        continue;
                    }
                    for (dz, dy, dx) in [(1usize, 0usize, 0usize), (0, 1, 0), (0, 0, 1)] {
                        let (az, ay, ax) = (z + dz, y + dy, x + dx);
                        if az < nz && ay < ny && ax < nx && mask[[az, ay, ax]] {
                            let (ra, rb) =
                                (find(&mut parent, flat(z, y, x)), find(&mut parent, flat(az, ay, ax)));
                            parent[ra] = rb;
                        }
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<[usize; 3]>> = Default::default();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if mask[[z, y, x]] {
                        let root = find(&mut parent, flat(z, y, x));
                        groups.entry(root).or_default().push([z, y, x]);
                    }
                }
            }
        }
        groups.into_values().map(|v| { let n = v.len(); (v, n) }).collect()
    }

    #[test]
    fn strip_keeps_largest_component_only() {
        let mut voxels = Array3::from_elem((24, 24, 24), -1.0);
        // big blob 5x5x4 = 100 voxels
        for z in 2..7 {
            for y in 2..7 {
                for x in 2..6 {
                    voxels[[z, y, x]] = 0.5;
                }
            }
        }
        // small blob 10 voxels
        for x in 10..20 {
            voxels[[20, 20, x]] = 0.5;
        }
        let vol = canon_from(voxels.clone());
        let (out, _) = strip_background(&vol, -500.0).unwrap();
        assert_eq!(out.crop_offset, [2, 2, 2]);
        assert_eq!(out.voxels.dim(), (5, 5, 4));

        // cross-check the component choice against union-find
        let mask = voxels.mapv(|v| v > -0.5);
        let comps = components_oracle(&mask);
        let largest = comps.iter().max_by_key(|(_, n)| *n).unwrap();
        assert_eq!(largest.1, 100);
        let (lo, hi, size) = largest_component_bbox(&mask).unwrap();
        assert_eq!(size, 100);
        let zs: Vec<usize> = largest.0.iter().map(|p| p[0]).collect();
        assert_eq!(lo[0], *zs.iter().min().unwrap());
        assert_eq!(hi[0], *zs.iter().max().unwrap());
    }

    #[test]
    fn strip_random_masks_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let mask = Array3::from_shape_fn((8, 8, 8), |_| rng.random_bool(0.3));
            let comps = components_oracle(&mask);
            match largest_component_bbox(&mask) {
                None => assert!(comps.is_empty()),
                Some((_, _, size)) => {
                    let max = comps.iter().map(|(_, n)| *n).max().unwrap();
                    assert_eq!(size, max);
                }
            }
        }
    }

    #[test]
    fn strip_degenerate_cases() {
        // entirely above threshold -> identity crop
        let vol = canon_from(Array3::from_elem((6, 6, 6), 1.0));
        let (out, outcome) = strip_background(&vol, -500.0).unwrap();
        assert_eq!(outcome, StripOutcome::Cropped);
        assert_eq!(out.voxels.dim(), (6, 6, 6));
        assert_eq!(out.crop_offset, [0, 0, 0]);
        // nothing above threshold -> unchanged with flag
        let vol = canon_from(Array3::from_elem((6, 6, 6), -1.0));
        let (out, outcome) = strip_background(&vol, -500.0).unwrap();
        assert_eq!(outcome, StripOutcome::NothingAboveThreshold);
        assert_eq!(out.voxels.dim(), (6, 6, 6));
        // threshold outside window -> config error
        assert!(strip_background(&vol, -2000.0).is_err());
    }

    #[test]
    fn vvol_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.vvol");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = RawVolume {
            voxels: Array3::from_shape_fn((4, 5, 6), |_| rng.random_range(-1000.0..1900.0)),
            spacing: [0.5, 0.6, 0.7],
            origin: [1.0, 2.0, 3.0],
            source_id: "rt".into(),
        };
        raw.save(&path).unwrap();
        let back = RawVolume::load(&path).unwrap();
        assert_eq!(back.spacing, raw.spacing);
        assert_eq!(back.origin, raw.origin);
        assert_eq!(back.source_id, "rt");
        assert!(back
            .voxels
            .iter()
            .zip(raw.voxels.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // rank-4 array path (e.g. channel volumes)
        let arr4 = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |_| rng.random::<f64>());
        let p4 = dir.path().join("c.vvol");
        write_array_f64(&p4, &arr4).unwrap();
        assert_eq!(read_array_f64(&p4).unwrap(), arr4);

        // u8 masks
        let mask = ArrayD::from_shape_fn(IxDyn(&[4, 4, 4]), |_| rng.random_range(0u8..3));
        let pm = dir.path().join("m.vvol");
        write_array_u8(&pm, &mask).unwrap();
        assert_eq!(read_array_u8(&pm).unwrap(), mask);

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_array_f64(&path).is_err());
        // truncated payload
        let p_trunc = dir.path().join("t.vvol");
        write_array_f64(&p_trunc, &arr4).unwrap();
        let bytes = std::fs::read(&p_trunc).unwrap();
        std::fs::write(&p_trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_array_f64(&p_trunc).is_err());
    }

    #[test]
    fn canonical_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vvol");
        let vol = canon_from(Array3::from_elem((3, 3, 3), 0.25));
        let mut vol = vol;
        vol.crop_offset = [4, 5, 6];
        vol.save(&path).unwrap();
        let back = CanonicalVolume::load(&path).unwrap();
        assert_eq!(back.crop_offset, [4, 5, 6]);
        assert_eq!(back.norm_stats, vol.norm_stats);
        assert_eq!(back.iso_spacing, 1.0);
        // kind mismatch rejected
        assert!(RawVolume::load(&path).is_err());
    }
}
