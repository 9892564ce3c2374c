//! Frozen-backbone feature extraction and the on-disk embedding cache.
//!
//! Volumes are encoded either in one pass (`extract_full3d`) or in
//! non-overlapping axial chunks (`extract_chunked2p5d`, class token
//! averaged, patch grids depth-concatenated). Records carry the backbone
//! fingerprint; probes must present a matching fingerprint to read them.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::blobs;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::vit::{encode, BackboneConfig, TokenGrid};
use crate::volume::CanonicalVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedMode {
    Full3d,
    Chunked2p5d { chunk_depth: usize },
}

/// How per-chunk class tokens combine into one volume token.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkAggregation {
    #[default]
    Mean,
}

#[derive(Clone, Debug)]
pub struct ExtractOptions {
    /// Refuse single-pass encoding above this token count.
    pub max_tokens: usize,
    pub aggregation: ChunkAggregation,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            max_tokens: 65_536,
            aggregation: ChunkAggregation::Mean,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub mode: EmbedMode,
    pub class_token: Array1<f64>,
    pub patch_grid: TokenGrid,
    pub backbone_fingerprint: String,
    /// Edge-padding added to reach patch-divisible sides (depth padding for
    /// chunked mode covers the final partial chunk).
    pub pad: [usize; 3],
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patch_grid.tokens.nrows() != self.patch_grid.n_patches() {
            return Err(Error::data(format!(
                "record '{}': {} tokens vs grid {:?}",
                self.sample_id,
                self.patch_grid.tokens.nrows(),
                self.patch_grid.grid_shape
            )));
        }
        if self.class_token.len() != self.patch_grid.tokens.ncols() {
            return Err(Error::data(format!(
                "record '{}': class dim {} vs patch dim {}",
                self.sample_id,
                self.class_token.len(),
                self.patch_grid.tokens.ncols()
            )));
        }
        Ok(())
    }
}

/// Replicate edge voxels so every side is a multiple of `p`.
pub fn pad_to_multiple(vol: &Array3<f64>, p: usize) -> (Array3<f64>, [usize; 3]) {
    let (d, h, w) = vol.dim();
    let target = [d.div_ceil(p) * p, h.div_ceil(p) * p, w.div_ceil(p) * p];
    let pad = [target[0] - d, target[1] - h, target[2] - w];
    if pad == [0, 0, 0] {
        return (vol.clone(), pad);
    }
    let out = Array3::from_shape_fn((target[0], target[1], target[2]), |(z, y, x)| {
        vol[[z.min(d - 1), y.min(h - 1), x.min(w - 1)]]
    });
    (out, pad)
}

fn sanitize_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
    {
        return Err(Error::data(format!(
            "sample id '{id}' must be non-empty and use only [A-Za-z0-9._-]"
        )));
    }
    Ok(())
}

/// Single-pass encoding of the whole (padded) volume.
pub fn extract_full3d(
    vol: &CanonicalVolume,
    cfg: &BackboneConfig,
    params: &ParamStore,
    opts: &ExtractOptions,
) -> Result<EmbeddingRecord> {
    sanitize_id(&vol.source_id)?;
    let (padded, pad) = pad_to_multiple(&vol.voxels, cfg.patch_size);
    let n_tokens: usize = padded
        .shape()
        .iter()
        .map(|s| s / cfg.patch_size)
        .product();
    if n_tokens > opts.max_tokens {
        return Err(Error::config(format!(
            "volume yields {n_tokens} tokens, over the {}-token budget; \
             use chunked 2.5D extraction instead",
            opts.max_tokens
        )));
    }
    let out = encode(params, cfg, &padded, None)?;
    let record = EmbeddingRecord {
        sample_id: vol.source_id.clone(),
        mode: EmbedMode::Full3d,
        class_token: out.class_token,
        patch_grid: out.patches,
        backbone_fingerprint: params.fingerprint(),
        pad,
    };
    record.validate()?;
    Ok(record)
}

/// Encode non-overlapping axial chunks of `chunk_depth` slices
/// independently; the final partial chunk is edge-padded. Per-chunk class
/// tokens are averaged and per-chunk patch grids concatenate along depth
/// in scan order.
pub fn extract_chunked2p5d(
    vol: &CanonicalVolume,
    cfg: &BackboneConfig,
    params: &ParamStore,
    chunk_depth: usize,
    opts: &ExtractOptions,
) -> Result<EmbeddingRecord> {
    sanitize_id(&vol.source_id)?;
    if chunk_depth == 0 || chunk_depth % cfg.patch_size != 0 {
        return Err(Error::config(format!(
            "chunk depth {chunk_depth} must be a positive multiple of patch size {}",
            cfg.patch_size
        )));
    }
    let (d, h, w) = vol.voxels.dim();
    let n_chunks = d.div_ceil(chunk_depth);
    let chunk_tokens =
        (chunk_depth / cfg.patch_size) * (h.div_ceil(cfg.patch_size)) * (w.div_ceil(cfg.patch_size));
    if chunk_tokens > opts.max_tokens {
        return Err(Error::config(format!(
            "each chunk yields {chunk_tokens} tokens, over the {}-token budget; \
             reduce chunk depth",
            opts.max_tokens
        )));
    }

    let dim = cfg.embed_dim;
    let mut class_sum = Array1::<f64>::zeros(dim);
    let mut token_blocks: Vec<Array2<f64>> = Vec::with_capacity(n_chunks);
    let mut grid_hw = [0usize; 2];
    let mut grid_depth = 0usize;
    let mut pad = [0usize; 3];
    for c in 0..n_chunks {
        let z0 = c * chunk_depth;
        let z1 = (z0 + chunk_depth).min(d);
        let slab = vol.voxels.slice(ndarray::s![z0..z1, .., ..]).to_owned();
        // pad depth to the full chunk (covers the final partial chunk) and
        // height/width to patch multiples
        let (mut padded, mut cpad) = pad_to_multiple(&slab, cfg.patch_size);
        if padded.dim().0 < chunk_depth {
            let extra = chunk_depth - padded.dim().0;
            let (dd, hh, ww) = padded.dim();
            padded = Array3::from_shape_fn((chunk_depth, hh, ww), |(z, y, x)| {
                padded[[z.min(dd - 1), y, x]]
            });
            cpad[0] += extra;
        }
        let out = encode(params, cfg, &padded, None)?;
        class_sum += &out.class_token;
        grid_hw = [out.patches.grid_shape[1], out.patches.grid_shape[2]];
        grid_depth += out.patches.grid_shape[0];
        pad = [pad[0] + cpad[0], cpad[1], cpad[2]];
        token_blocks.push(out.patches.tokens);
    }
    let class_token = match opts.aggregation {
        ChunkAggregation::Mean => class_sum / n_chunks as f64,
    };
    let total_rows: usize = token_blocks.iter().map(|b| b.nrows()).sum();
    let mut tokens = Array2::zeros((total_rows, dim));
    let mut row = 0;
    for block in token_blocks {
        tokens
            .slice_mut(ndarray::s![row..row + block.nrows(), ..])
            .assign(&block);
        row += block.nrows();
    }
    let record = EmbeddingRecord {
        sample_id: vol.source_id.clone(),
        mode: EmbedMode::Chunked2p5d { chunk_depth },
        class_token,
        patch_grid: TokenGrid {
            tokens,
            grid_shape: [grid_depth, grid_hw[0], grid_hw[1]],
        },
        backbone_fingerprint: params.fingerprint(),
        pad,
    };
    record.validate()?;
    Ok(record)
}

// ---- cache layout ----

const RECORD_MAGIC: &[u8; 4] = b"VEMB";

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    sample_id: String,
    mode: EmbedMode,
    grid_shape: [usize; 3],
    backbone_fingerprint: String,
    pad: [usize; 3],
    embed_dim: usize,
}

pub fn record_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(format!("{sample_id}.emb"))
}

/// Write one record (atomic: temp file + rename).
pub fn save_record(dir: &Path, record: &EmbeddingRecord) -> Result<PathBuf> {
    record.validate()?;
    sanitize_id(&record.sample_id)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::data(format!("{}: {e}", dir.display())))?;
    let header = RecordHeader {
        sample_id: record.sample_id.clone(),
        mode: record.mode.clone(),
        grid_shape: record.patch_grid.grid_shape,
        backbone_fingerprint: record.backbone_fingerprint.clone(),
        pad: record.pad,
        embed_dim: record.class_token.len(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::data(format!("record header encode: {e}")))?;
    let path = record_path(dir, &record.sample_id);
    blobs::write_container(
        &path,
        RECORD_MAGIC,
        &header_json,
        &[
            ("class_token".into(), record.class_token.clone().into_dyn()),
            ("patch_tokens".into(), record.patch_grid.tokens.clone().into_dyn()),
        ],
    )?;
    Ok(path)
}

pub fn load_record(path: &Path) -> Result<EmbeddingRecord> {
    let (header_json, blob_list) = blobs::read_container(path, RECORD_MAGIC)?;
    let header: RecordHeader = serde_json::from_str(&header_json)
        .map_err(|e| Error::data(format!("{}: bad record header: {e}", path.display())))?;
    let mut by_name: BTreeMap<String, crate::graph::Tensor> = blob_list.into_iter().collect();
    let class_token = by_name
        .remove("class_token")
        .ok_or_else(|| Error::data(format!("{}: missing class token", path.display())))?
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::data("class token has wrong rank"))?;
    let tokens = by_name
        .remove("patch_tokens")
        .ok_or_else(|| Error::data(format!("{}: missing patch tokens", path.display())))?
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::data("patch tokens have wrong rank"))?;
    let record = EmbeddingRecord {
        sample_id: header.sample_id,
        mode: header.mode,
        class_token,
        patch_grid: TokenGrid {
            tokens,
            grid_shape: header.grid_shape,
        },
        backbone_fingerprint: header.backbone_fingerprint,
        pad: header.pad,
    };
    record.validate()?;
    if record.class_token.len() != header.embed_dim {
        return Err(Error::data("record embed_dim disagrees with payload"));
    }
    Ok(record)
}

/// Load a record for a consumer that requires a specific backbone.
pub fn load_record_for(
    dir: &Path,
    sample_id: &str,
    expected_fingerprint: &str,
) -> Result<EmbeddingRecord> {
    let record = load_record(&record_path(dir, sample_id))?;
    if record.backbone_fingerprint != expected_fingerprint {
        return Err(Error::data(format!(
            "embedding '{sample_id}' was extracted with backbone {} but {} was requested",
            &record.backbone_fingerprint[..12.min(record.backbone_fingerprint.len())],
            &expected_fingerprint[..12.min(expected_fingerprint.len())],
        )));
    }
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub mode: EmbedMode,
    pub fingerprint: String,
    pub grid_shape: [usize; 3],
    pub embed_dim: usize,
}

/// Maps sample_id to its record file; one per cache directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub records: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: bad manifest: {e}", path.display())))
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::data(format!("{}: {e}", dir.display())))?;
        let path = Self::path(dir);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest encode: {e}")))?;
        std::fs::write(&tmp, text).map_err(|e| Error::data(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn upsert(&mut self, record: &EmbeddingRecord) {
        self.records.insert(
            record.sample_id.clone(),
            ManifestEntry {
                file: format!("{}.emb", record.sample_id),
                mode: record.mode.clone(),
                fingerprint: record.backbone_fingerprint.clone(),
                grid_shape: record.patch_grid.grid_shape,
                embed_dim: record.class_token.len(),
            },
        );
    }
}

// ---- PCA-RGB visualisation ----

pub struct PcaResult {
    /// Top-k eigenvalues of the token covariance (population, /n).
    pub variances: Vec<f64>,
    /// `[n, k]` token scores along the components.
    pub scores: Array2<f64>,
    /// Numerical rank found (components with non-vanishing variance).
    pub rank: usize,
}

/// Top-`k` principal components of centred rows via power iteration with
/// deflation on the `[d, d]` covariance.
pub fn pca_components(tokens: &Array2<f64>, k: usize) -> Result<PcaResult> {
    let n = tokens.nrows();
    let d = tokens.ncols();
    if n < 2 || d == 0 {
        return Err(Error::data(format!(
            "need at least 2 tokens for a principal-component basis, got {n}"
        )));
    }
    let mean = tokens.mean_axis(Axis(0)).unwrap();
    let centered = tokens - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / n as f64;
    let total_var: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    let tol = total_var.max(1e-300) * 1e-12;

    let mut variances = Vec::with_capacity(k);
    let mut components: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut rank = 0;
    for comp in 0..k.min(d) {
        // deterministic start: basis vector of the largest diagonal entry
        let start = (0..d)
            .max_by(|&a, &b| cov[[a, a]].partial_cmp(&cov[[b, b]]).unwrap())
            .unwrap();
        let mut v = Array1::<f64>::zeros(d);
        v[start] = 1.0;
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let w = cov.dot(&v);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < tol {
                lambda = 0.0;
                break;
            }
            let next = &w / norm;
            let delta: f64 = next
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            lambda = v.dot(&cov.dot(&v));
            if delta < 1e-14 {
                break;
            }
        }
        if lambda > tol {
            rank = comp + 1;
        } else {
            lambda = lambda.max(0.0);
        }
        variances.push(lambda);
        // deflate
        let vv = v
            .view()
            .insert_axis(Axis(1))
            .dot(&v.view().insert_axis(Axis(0)));
        cov = &cov - &(vv * lambda);
        components.push(v);
    }
    while variances.len() < k {
        variances.push(0.0);
        components.push(Array1::zeros(d));
    }
    let mut scores = Array2::zeros((n, k));
    for (ci, v) in components.iter().enumerate() {
        let s = centered.dot(v);
        scores.column_mut(ci).assign(&s);
    }
    Ok(PcaResult {
        variances,
        scores,
        rank,
    })
}

pub struct PcaRgb {
    /// `[gz, gy, gx, 3]`, all values in [0, 1].
    pub volume: Array4<f64>,
    /// True when fewer than 3 informative components existed; the missing
    /// channels are flat 0.5.
    pub degenerate: bool,
}

/// Project patch tokens on their top-3 principal components and min-max
/// scale each component to a colour channel.
pub fn pca_rgb(grid: &TokenGrid) -> Result<PcaRgb> {
    let n = grid.tokens.nrows();
    if n < 3 {
        return Err(Error::data(format!("PCA-RGB needs at least 3 tokens, got {n}")));
    }
    if n != grid.n_patches() {
        return Err(Error::data("token count does not match grid shape"));
    }
    let pca = pca_components(&grid.tokens, 3)?;
    let [gz, gy, gx] = grid.grid_shape;
    let mut volume = Array4::zeros((gz, gy, gx, 3));
    for c in 0..3 {
        let col = pca.scores.column(c);
        let scaled: Vec<f64> = if c >= pca.rank {
            vec![0.5; n]
        } else {
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-300 {
                vec![0.5; n]
            } else {
                col.iter().map(|v| (v - lo) / (hi - lo)).collect()
            }
        };
        for (t, val) in scaled.iter().enumerate() {
            let pz = t / (gy * gx);
            let py = (t / gx) % gy;
            let px = t % gx;
            volume[[pz, py, px, c]] = *val;
        }
    }
    Ok(PcaRgb {
        volume,
        degenerate: pca.rank < 3,
    })
}
