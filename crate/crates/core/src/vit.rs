//! 3D vision transformer encoder: patch embedding, rotary position
//! encoding over three axes, pre-norm attention blocks, and class/register
//! tokens.
//!
//! Conventions fixed here and relied on everywhere downstream:
//! - token order is `[class, registers.., patches..]`;
//! - patch tokens are depth-major: index `t = (pz*Gh + py)*Gw + px`;
//! - class and register tokens carry no rotary rotation;
//! - the block stack has no terminal normalisation layer, so zeroing the
//!   attention and MLP output projections makes the encoder the identity
//!   on its embedded input sequence.

use ndarray::{Array1, Array2, Array3, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::MaskPattern;
use crate::blobs;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{trunc_normal, Binding, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_registers: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 14,
            embed_dim: 864,
            n_blocks: 12,
            n_heads: 12,
            mlp_ratio: 4,
            n_registers: 4,
            rope_base: 100.0,
            norm_eps: 1e-6,
        }
    }
}

impl BackboneConfig {
    /// Reduced configuration for tests and desk-scale runs.
    pub fn toy() -> Self {
        BackboneConfig {
            embed_dim: 96,
            n_blocks: 4,
            n_heads: 4,
            ..BackboneConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.n_blocks == 0 || self.n_heads == 0 {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.head_dim() % 6 != 0 {
            return Err(Error::config(format!(
                "per-head dim {} must be divisible by 6 (three axes of rotary pairs)",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be positive"));
        }
        Ok(())
    }
}

/// Patch tokens with their grid geometry.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    /// `[n_patches, dim]`, depth-major token order.
    pub tokens: Array2<f64>,
    pub grid_shape: [usize; 3],
}

impl TokenGrid {
    pub fn n_patches(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Normalised patch-centre coordinates in `[0,1]^3`, one row per token,
    /// axis order (z, y, x) matching the grid.
    pub fn patch_centers(&self) -> Array2<f64> {
        patch_centers(self.grid_shape)
    }
}

pub fn patch_centers(grid_shape: [usize; 3]) -> Array2<f64> {
    let n: usize = grid_shape.iter().product();
    let mut out = Array2::zeros((n, 3));
    for (t, pos) in grid_positions(grid_shape).into_iter().enumerate() {
        for a in 0..3 {
            out[[t, a]] = (pos[a] as f64 + 0.5) / grid_shape[a] as f64;
        }
    }
    out
}

/// Depth-major grid coordinates for each patch token.
pub fn grid_positions(grid_shape: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(grid_shape.iter().product());
    for pz in 0..grid_shape[0] {
        for py in 0..grid_shape[1] {
            for px in 0..grid_shape[2] {
                out.push([pz, py, px]);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub class_token: Array1<f64>,
    pub registers: Array2<f64>,
    pub patches: TokenGrid,
}

// ---- patchify ----

/// Cut a view into non-overlapping cubic patches and flatten each one
/// (voxels depth-major within the patch). Rows follow the canonical
/// depth-major token order.
pub fn patchify(view: &Array3<f64>, patch_size: usize) -> Result<(Array2<f64>, [usize; 3])> {
    let (d, h, w) = view.dim();
    let p = patch_size;
    for (name, n) in [("depth", d), ("height", h), ("width", w)] {
        if n == 0 || n % p != 0 {
            let lower = (n / p) * p;
            let upper = lower + p;
            return Err(Error::data(format!(
                "view {name} {n} not divisible by patch size {p}; nearest valid sizes are {lower} and {upper}"
            )));
        }
    }
    let grid = [d / p, h / p, w / p];
    let n_patches: usize = grid.iter().product();
    let mut out = Array2::zeros((n_patches, p * p * p));
    for (t, pos) in grid_positions(grid).into_iter().enumerate() {
        let mut col = 0;
        for dz in 0..p {
            for dy in 0..p {
                for dx in 0..p {
                    out[[t, col]] =
                        view[[pos[0] * p + dz, pos[1] * p + dy, pos[2] * p + dx]];
                    col += 1;
                }
            }
        }
    }
    Ok((out, grid))
}

// ---- rotary position encoding ----

/// Per-pair rotation angles for a token sequence. Channel pairs split
/// equally across the three axes (m = head_dim/6 pairs per axis) with
/// frequencies `base^(-j/m)`; rows with no position (class, registers)
/// get zero angles.
pub fn rope_angles(
    positions: &[Option<[usize; 3]>],
    head_dim: usize,
    base: f64,
) -> Array2<f64> {
    assert_eq!(head_dim % 6, 0);
    let m = head_dim / 6;
    let mut angles = Array2::zeros((positions.len(), head_dim / 2));
    for (row, pos) in positions.iter().enumerate() {
        let Some(p) = pos else { continue };
        for axis in 0..3 {
            for j in 0..m {
                let theta = base.powf(-(j as f64) / m as f64);
                angles[[row, axis * m + j]] = theta * p[axis] as f64;
            }
        }
    }
    angles
}

/// Rotate per-head query/key vectors by their positions (non-graph path,
/// used by tests and direct callers).
pub fn rope_rotate(x: &Array2<f64>, positions: &[Option<[usize; 3]>], base: f64) -> Array2<f64> {
    let head_dim = x.ncols();
    let angles = rope_angles(positions, head_dim, base);
    let mut out = x.clone();
    for r in 0..x.nrows() {
        for j in 0..head_dim / 2 {
            let (sin, cos) = angles[[r, j]].sin_cos();
            let a = x[[r, 2 * j]];
            let b = x[[r, 2 * j + 1]];
            out[[r, 2 * j]] = a * cos - b * sin;
            out[[r, 2 * j + 1]] = a * sin + b * cos;
        }
    }
    out
}

// ---- parameters ----

/// Deterministic initialisation: truncated normal (std 0.02) for weights
/// and learned tokens, zeros for biases, ones/zeros for norm gains/shifts.
pub fn init_backbone(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let p3 = cfg.patch_size.pow(3);
    let mut s = ParamStore::new();
    let std = 0.02;
    s.insert("patch_embed.weight", trunc_normal(&[p3, d], std, rng))?;
    s.insert("patch_embed.bias", crate::nn::zeros(&[d]))?;
    s.insert("cls_token", trunc_normal(&[1, d], std, rng))?;
    s.insert("registers", trunc_normal(&[cfg.n_registers, d], std, rng))?;
    s.insert("mask_token", trunc_normal(&[1, d], std, rng))?;
    for b in 0..cfg.n_blocks {
        let pre = format!("blocks.{b}");
        s.insert(format!("{pre}.norm1.gamma"), crate::nn::ones(&[d]))?;
        s.insert(format!("{pre}.norm1.beta"), crate::nn::zeros(&[d]))?;
        s.insert(format!("{pre}.attn.qkv.weight"), trunc_normal(&[d, 3 * d], std, rng))?;
        s.insert(format!("{pre}.attn.qkv.bias"), crate::nn::zeros(&[3 * d]))?;
        s.insert(format!("{pre}.attn.proj.weight"), trunc_normal(&[d, d], std, rng))?;
        s.insert(format!("{pre}.attn.proj.bias"), crate::nn::zeros(&[d]))?;
        s.insert(format!("{pre}.norm2.gamma"), crate::nn::ones(&[d]))?;
        s.insert(format!("{pre}.norm2.beta"), crate::nn::zeros(&[d]))?;
        s.insert(format!("{pre}.mlp.fc1.weight"), trunc_normal(&[d, cfg.mlp_ratio * d], std, rng))?;
        s.insert(format!("{pre}.mlp.fc1.bias"), crate::nn::zeros(&[cfg.mlp_ratio * d]))?;
        s.insert(format!("{pre}.mlp.fc2.weight"), trunc_normal(&[cfg.mlp_ratio * d, d], std, rng))?;
        s.insert(format!("{pre}.mlp.fc2.bias"), crate::nn::zeros(&[d]))?;
    }
    Ok(s)
}

// ---- encoding ----

/// Encoder output inside a live graph.
pub struct GraphEncoderOutput {
    /// Full token sequence `[1 + n_registers + n_patches, dim]`.
    pub seq: Var,
    pub grid_shape: [usize; 3],
    pub n_registers: usize,
}

impl GraphEncoderOutput {
    pub fn n_patches(&self) -> usize {
        self.grid_shape.iter().product()
    }

    pub fn class_var(&self, g: &mut Graph) -> Var {
        g.narrow(self.seq, 0, 0, 1)
    }

    pub fn registers_var(&self, g: &mut Graph) -> Var {
        g.narrow(self.seq, 0, 1, self.n_registers)
    }

    pub fn patches_var(&self, g: &mut Graph) -> Var {
        g.narrow(self.seq, 0, 1 + self.n_registers, self.n_patches())
    }
}

/// Build the encoder forward pass in `g`. With `mask` given, masked patch
/// embeddings are replaced by the learned mask token before the blocks
/// (the masked-input path of the patch-distillation objective).
pub fn encode_graph(
    g: &mut Graph,
    bind: &Binding,
    cfg: &BackboneConfig,
    view: &Array3<f64>,
    mask: Option<&MaskPattern>,
) -> Result<GraphEncoderOutput> {
    cfg.validate()?;
    let (patches, grid) = patchify(view, cfg.patch_size)?;
    let n_patches: usize = grid.iter().product();
    if let Some(m) = mask {
        if m.masked.len() != n_patches {
            return Err(Error::data(format!(
                "mask length {} does not match patch grid {:?} = {} tokens",
                m.masked.len(),
                grid,
                n_patches
            )));
        }
    }
    let d = cfg.embed_dim;

    let patches_const = g.var(patches.into_dyn());
    let w_embed = bind.var("patch_embed.weight");
    let b_embed = bind.var("patch_embed.bias");
    let embedded = g.matmul(patches_const, w_embed);
    let mut tokens = g.add_bias(embedded, b_embed);

    if let Some(m) = mask {
        // replaced = tokens * (1 - M) + mask_rows * M, with M constant 0/1 rows
        let mut keep = Array2::<f64>::zeros((n_patches, d));
        let mut replace = Array2::<f64>::zeros((n_patches, d));
        for (i, &masked) in m.masked.iter().enumerate() {
            let v = if masked { 1.0 } else { 0.0 };
            replace.row_mut(i).fill(v);
            keep.row_mut(i).fill(1.0 - v);
        }
        let keep = g.var(keep.into_dyn());
        let replace = g.var(replace.into_dyn());
        let mask_rows = g.select_rows(bind.var("mask_token"), vec![0; n_patches]);
        let kept = g.mul(tokens, keep);
        let injected = g.mul(mask_rows, replace);
        tokens = g.add(kept, injected);
    }

    let cls = bind.var("cls_token");
    let registers = bind.var("registers");
    let mut x = g.concat(&[cls, registers, tokens], 0);
    let n_seq = 1 + cfg.n_registers + n_patches;

    // rotation angles shared by every block and head
    let mut positions: Vec<Option<[usize; 3]>> = vec![None; 1 + cfg.n_registers];
    positions.extend(grid_positions(grid).into_iter().map(Some));
    let angles = rope_angles(&positions, cfg.head_dim(), cfg.rope_base);
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    for b in 0..cfg.n_blocks {
        let pre = format!("blocks.{b}");
        let h = g.layer_norm(
            x,
            bind.var(&format!("{pre}.norm1.gamma")),
            bind.var(&format!("{pre}.norm1.beta")),
            cfg.norm_eps,
        );
        let qkv_w = bind.var(&format!("{pre}.attn.qkv.weight"));
        let qkv_b = bind.var(&format!("{pre}.attn.qkv.bias"));
        let qkv = g.matmul(h, qkv_w);
        let qkv = g.add_bias(qkv, qkv_b);
        let hd = cfg.head_dim();
        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let q = g.narrow(qkv, 1, head * hd, hd);
            let k = g.narrow(qkv, 1, d + head * hd, hd);
            let v = g.narrow(qkv, 1, 2 * d + head * hd, hd);
            let q = g.rotate_pairs(q, angles.clone());
            let k = g.rotate_pairs(k, angles.clone());
            let kt = g.transpose2(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            head_outputs.push(g.matmul(attn, v));
        }
        let merged = g.concat(&head_outputs, 1);
        let proj_w = bind.var(&format!("{pre}.attn.proj.weight"));
        let proj_b = bind.var(&format!("{pre}.attn.proj.bias"));
        let attn_out = g.matmul(merged, proj_w);
        let attn_out = g.add_bias(attn_out, proj_b);
        x = g.add(x, attn_out);

        let h2 = g.layer_norm(
            x,
            bind.var(&format!("{pre}.norm2.gamma")),
            bind.var(&format!("{pre}.norm2.beta")),
            cfg.norm_eps,
        );
        let fc1 = g.matmul(h2, bind.var(&format!("{pre}.mlp.fc1.weight")));
        let fc1 = g.add_bias(fc1, bind.var(&format!("{pre}.mlp.fc1.bias")));
        let act = g.gelu(fc1);
        let fc2 = g.matmul(act, bind.var(&format!("{pre}.mlp.fc2.weight")));
        let fc2 = g.add_bias(fc2, bind.var(&format!("{pre}.mlp.fc2.bias")));
        x = g.add(x, fc2);
    }
    debug_assert_eq!(g.value(x).shape(), [n_seq, d]);
    Ok(GraphEncoderOutput {
        seq: x,
        grid_shape: grid,
        n_registers: cfg.n_registers,
    })
}

/// Inference-only encode: runs the graph forward and extracts plain arrays.
pub fn encode(
    params: &ParamStore,
    cfg: &BackboneConfig,
    view: &Array3<f64>,
    mask: Option<&MaskPattern>,
) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let bind = Binding::bind_all(&mut g, params);
    let out = encode_graph(&mut g, &bind, cfg, view, mask)?;
    let seq = g
        .value(out.seq)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let class_token = seq.row(0).to_owned();
    let registers = seq
        .slice(ndarray::s![1..1 + cfg.n_registers, ..])
        .to_owned();
    let tokens = seq
        .slice(ndarray::s![1 + cfg.n_registers.., ..])
        .to_owned();
    Ok(EncoderOutput {
        class_token,
        registers,
        patches: TokenGrid {
            tokens,
            grid_shape: out.grid_shape,
        },
    })
}

// ---- checkpoint ----

const BACKBONE_MAGIC: &[u8; 4] = b"VBCK";

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    config: BackboneConfig,
    param_order: Vec<String>,
}

pub fn save_backbone(path: &std::path::Path, cfg: &BackboneConfig, params: &ParamStore) -> Result<()> {
    let header = BackboneHeader {
        config: cfg.clone(),
        param_order: params.names().map(str::to_string).collect(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::data(format!("backbone header encode: {e}")))?;
    let blobs: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    blobs::write_container(path, BACKBONE_MAGIC, &header_json, &blobs)
}

pub fn load_backbone(path: &std::path::Path) -> Result<(BackboneConfig, ParamStore)> {
    let (header_json, blob_list) = blobs::read_container(path, BACKBONE_MAGIC)?;
    let header: BackboneHeader = serde_json::from_str(&header_json)
        .map_err(|e| Error::data(format!("{}: bad backbone header: {e}", path.display())))?;
    header.config.validate()?;
    let map: std::collections::BTreeMap<String, Tensor> = blob_list.into_iter().collect();
    let params = ParamStore::from_map(&header.param_order, map)?;
    // shape sanity against the declared config
    let expect = init_shapes(&header.config);
    for (name, tensor) in params.iter() {
        match expect.get(name) {
            Some(shape) if shape.as_slice() == tensor.shape() => {}
            Some(shape) => {
                return Err(Error::data(format!(
                    "{}: parameter '{name}' has shape {:?}, config implies {:?}",
                    path.display(),
                    tensor.shape(),
                    shape
                )))
            }
            None => {
                return Err(Error::data(format!(
                    "{}: parameter '{name}' not part of the declared architecture",
                    path.display()
                )))
            }
        }
    }
    if params.len() != expect.len() {
        return Err(Error::data(format!(
            "{}: expected {} parameters, found {}",
            path.display(),
            expect.len(),
            params.len()
        )));
    }
    Ok((header.config, params))
}

fn init_shapes(cfg: &BackboneConfig) -> std::collections::BTreeMap<String, Vec<usize>> {
    let d = cfg.embed_dim;
    let p3 = cfg.patch_size.pow(3);
    let mut m = std::collections::BTreeMap::new();
    m.insert("patch_embed.weight".into(), vec![p3, d]);
    m.insert("patch_embed.bias".into(), vec![d]);
    m.insert("cls_token".into(), vec![1, d]);
    m.insert("registers".into(), vec![cfg.n_registers, d]);
    m.insert("mask_token".into(), vec![1, d]);
    for b in 0..cfg.n_blocks {
        let pre = format!("blocks.{b}");
        m.insert(format!("{pre}.norm1.gamma"), vec![d]);
        m.insert(format!("{pre}.norm1.beta"), vec![d]);
        m.insert(format!("{pre}.attn.qkv.weight"), vec![d, 3 * d]);
        m.insert(format!("{pre}.attn.qkv.bias"), vec![3 * d]);
        m.insert(format!("{pre}.attn.proj.weight"), vec![d, d]);
        m.insert(format!("{pre}.attn.proj.bias"), vec![d]);
        m.insert(format!("{pre}.norm2.gamma"), vec![d]);
        m.insert(format!("{pre}.norm2.beta"), vec![d]);
        m.insert(format!("{pre}.mlp.fc1.weight"), vec![d, cfg.mlp_ratio * d]);
        m.insert(format!("{pre}.mlp.fc1.bias"), vec![cfg.mlp_ratio * d]);
        m.insert(format!("{pre}.mlp.fc2.weight"), vec![cfg.mlp_ratio * d, d]);
        m.insert(format!("{pre}.mlp.fc2.bias"), vec![d]);
    }
    m
}
