//! Frozen-feature downstream heads and their training loops.
//!
//! Probes consume cached embedding records only; backbone parameters are
//! never present during probe training, so backbone immutability holds by
//! construction (and is asserted via fingerprints at the boundaries).
//! Heads: two-layer MLP and single-layer query-former on class/patch
//! tokens, attention-pooled localisation, convolutional segmentation
//! decoder, and a linear Cox risk head.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::embed::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::metrics;
use crate::nn::{trunc_normal, zeros, AdamW, Binding, GradMap, ParamStore};
use crate::vit::TokenGrid;

// ---- head architectures ----

/// Two affine layers with one nonlinearity, applied to class tokens.
pub fn init_mlp_probe(
    in_dim: usize,
    hidden: usize,
    n_targets: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    if in_dim == 0 || hidden == 0 || n_targets == 0 {
        return Err(Error::config("mlp probe dims must be positive".to_string()));
    }
    let mut s = ParamStore::new();
    s.insert("fc1.weight", trunc_normal(&[in_dim, hidden], 0.02, rng))?;
    s.insert("fc1.bias", zeros(&[hidden]))?;
    s.insert("fc2.weight", trunc_normal(&[hidden, n_targets], 0.02, rng))?;
    s.insert("fc2.bias", zeros(&[n_targets]))?;
    Ok(s)
}

/// `x [B, in_dim]` -> logits `[B, n_targets]`.
pub fn mlp_forward(g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
    let in_dim = g.value(bind.var("fc1.weight")).shape()[0];
    let got = g.value(x).shape().to_vec();
    if got.len() != 2 || got[1] != in_dim {
        return Err(Error::data(format!(
            "mlp probe expects [batch, {in_dim}] tokens, got {got:?}"
        )));
    }
    let h = g.matmul(x, bind.var("fc1.weight"));
    let h = g.add_bias(h, bind.var("fc1.bias"));
    let h = g.gelu(h);
    let out = g.matmul(h, bind.var("fc2.weight"));
    Ok(g.add_bias(out, bind.var("fc2.bias")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub n_queries: usize,
    pub n_heads: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            n_queries: 8,
            n_heads: 4,
        }
    }
}

/// Learned queries cross-attending over patch tokens, one layer; pooled
/// query outputs map linearly to targets. No positional term is added to
/// the tokens, so the output is patch-permutation invariant.
pub fn init_qformer(
    in_dim: usize,
    cfg: &QFormerConfig,
    n_targets: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    if cfg.n_queries == 0 || cfg.n_heads == 0 || n_targets == 0 {
        return Err(Error::config("qformer dims must be positive".to_string()));
    }
    if in_dim % cfg.n_heads != 0 {
        return Err(Error::config(format!(
            "embed dim {in_dim} not divisible by {} heads",
            cfg.n_heads
        )));
    }
    let mut s = ParamStore::new();
    s.insert("queries", trunc_normal(&[cfg.n_queries, in_dim], 0.02, rng))?;
    for part in ["q", "k", "v", "out"] {
        s.insert(
            format!("attn.{part}.weight"),
            trunc_normal(&[in_dim, in_dim], 0.02, rng),
        )?;
        s.insert(format!("attn.{part}.bias"), zeros(&[in_dim]))?;
    }
    s.insert("head.weight", trunc_normal(&[in_dim, n_targets], 0.02, rng))?;
    s.insert("head.bias", zeros(&[n_targets]))?;
    Ok(s)
}

/// One sample's patch tokens `[n, d]` -> logits `[1, n_targets]`.
pub fn qformer_forward(
    g: &mut Graph,
    bind: &Binding,
    tokens: Var,
    cfg: &QFormerConfig,
) -> Result<Var> {
    let shape = g.value(tokens).shape().to_vec();
    let d = g.value(bind.var("queries")).shape()[1];
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::data(format!(
            "qformer expects [n, {d}] tokens, got {shape:?}"
        )));
    }
    if shape[0] == 0 {
        return Err(Error::data("qformer on an empty token grid".to_string()));
    }
    let dh = d / cfg.n_heads;
    let queries = bind.var("queries");
    let q = g.matmul(queries, bind.var("attn.q.weight"));
    let q = g.add_bias(q, bind.var("attn.q.bias"));
    let k = g.matmul(tokens, bind.var("attn.k.weight"));
    let k = g.add_bias(k, bind.var("attn.k.bias"));
    let v = g.matmul(tokens, bind.var("attn.v.weight"));
    let v = g.add_bias(v, bind.var("attn.v.bias"));
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.narrow(q, 1, h * dh, dh);
        let kh = g.narrow(k, 1, h * dh, dh);
        let vh = g.narrow(v, 1, h * dh, dh);
        let kt = g.transpose2(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh));
    }
    let o = g.concat(&heads, 1);
    let o = g.matmul(o, bind.var("attn.out.weight"));
    let o = g.add_bias(o, bind.var("attn.out.bias"));
    let y = g.add(queries, o);
    let pooled = g.mean_axis0(y);
    let pooled = g.reshape(pooled, &[1, d]);
    let out = g.matmul(pooled, bind.var("head.weight"));
    Ok(g.add_bias(out, bind.var("head.bias")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocHeadConfig {
    pub n_heads: usize,
}

impl Default for LocHeadConfig {
    fn default() -> Self {
        LocHeadConfig { n_heads: 4 }
    }
}

/// Self-attention over patch tokens, a per-token score, and a
/// softmax-weighted sum of patch centres. The output is a convex
/// combination of centres, hence always inside `[0,1]^3`.
pub fn init_loc_head(
    in_dim: usize,
    cfg: &LocHeadConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    if cfg.n_heads == 0 || in_dim % cfg.n_heads != 0 {
        return Err(Error::config(format!(
            "embed dim {in_dim} not divisible by {} heads",
            cfg.n_heads
        )));
    }
    let mut s = ParamStore::new();
    s.insert("attn.qkv.weight", trunc_normal(&[in_dim, 3 * in_dim], 0.02, rng))?;
    s.insert("attn.qkv.bias", zeros(&[3 * in_dim]))?;
    s.insert("attn.out.weight", trunc_normal(&[in_dim, in_dim], 0.02, rng))?;
    s.insert("attn.out.bias", zeros(&[in_dim]))?;
    s.insert("score.weight", trunc_normal(&[in_dim, 1], 0.02, rng))?;
    s.insert("score.bias", zeros(&[1]))?;
    Ok(s)
}

/// One sample's grid -> predicted position `[3]` in `[0,1]^3`.
pub fn localise(
    g: &mut Graph,
    bind: &Binding,
    grid: &TokenGrid,
    cfg: &LocHeadConfig,
) -> Result<Var> {
    let n = grid.tokens.nrows();
    if n == 0 {
        return Err(Error::data("localisation on an empty token grid".to_string()));
    }
    if n != grid.n_patches() {
        return Err(Error::data("token count does not match grid shape".to_string()));
    }
    let d = g.value(bind.var("attn.out.weight")).shape()[0];
    if grid.tokens.ncols() != d {
        return Err(Error::data(format!(
            "localisation head expects dim {d}, got {}",
            grid.tokens.ncols()
        )));
    }
    let dh = d / cfg.n_heads;
    let x = g.var(grid.tokens.clone().into_dyn());
    let qkv = g.matmul(x, bind.var("attn.qkv.weight"));
    let qkv = g.add_bias(qkv, bind.var("attn.qkv.bias"));
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.narrow(qkv, 1, h * dh, dh);
        let kh = g.narrow(qkv, 1, d + h * dh, dh);
        let vh = g.narrow(qkv, 1, 2 * d + h * dh, dh);
        let kt = g.transpose2(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh));
    }
    let o = g.concat(&heads, 1);
    let o = g.matmul(o, bind.var("attn.out.weight"));
    let o = g.add_bias(o, bind.var("attn.out.bias"));
    let y = g.add(x, o);
    let scores = g.matmul(y, bind.var("score.weight"));
    let scores = g.add_bias(scores, bind.var("score.bias"));
    let row = g.transpose2(scores);
    let w = g.softmax_rows(row);
    let centers = g.var(grid.patch_centers().into_dyn());
    let out = g.matmul(w, centers);
    Ok(g.reshape(out, &[3]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegDecoderConfig {
    pub n_classes: usize,
    /// Channel widths of the two intermediate stages.
    pub mid_channels: [usize; 2],
}

impl SegDecoderConfig {
    pub fn new(n_classes: usize) -> Self {
        SegDecoderConfig {
            n_classes,
            mid_channels: [64, 32],
        }
    }
}

/// Three (conv3d + nearest x2 upsample) stages from the reshaped token
/// grid, then one trilinear resize to the exact target shape.
pub fn init_seg_decoder(
    in_dim: usize,
    cfg: &SegDecoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    if cfg.n_classes < 2 || cfg.mid_channels.iter().any(|&c| c == 0) {
        return Err(Error::config(
            "segmentation decoder needs >=2 classes and nonzero channels".to_string(),
        ));
    }
    let chans = [in_dim, cfg.mid_channels[0], cfg.mid_channels[1], cfg.n_classes];
    let mut s = ParamStore::new();
    for stage in 0..3 {
        let (cin, cout) = (chans[stage], chans[stage + 1]);
        // fan-in-scaled init keeps activations usable through three stages
        let std = (2.0 / (cin as f64 * 27.0)).sqrt();
        s.insert(
            format!("conv{}.kernel", stage + 1),
            trunc_normal(&[cout, cin, 3, 3, 3], std, rng),
        )?;
        s.insert(format!("conv{}.bias", stage + 1), zeros(&[cout]))?;
    }
    Ok(s)
}

/// One sample's grid -> per-voxel class logits `[n_classes, target]`.
pub fn segment(
    g: &mut Graph,
    bind: &Binding,
    grid: &TokenGrid,
    target: [usize; 3],
) -> Result<Var> {
    let [gz, gy, gx] = grid.grid_shape;
    if grid.tokens.nrows() != grid.n_patches() || grid.n_patches() == 0 {
        return Err(Error::data("segmentation grid is empty or inconsistent".to_string()));
    }
    if target[0] < gz || target[1] < gy || target[2] < gx {
        return Err(Error::data(format!(
            "target shape {target:?} is smaller than the token grid {:?}",
            grid.grid_shape
        )));
    }
    let d = grid.tokens.ncols();
    let x = g.var(grid.tokens.clone().into_dyn());
    let xt = g.transpose2(x);
    let vol = g.reshape(xt, &[d, gz, gy, gx]);
    let h = g.conv3d(vol, bind.var("conv1.kernel"), bind.var("conv1.bias"));
    let h = g.gelu(h);
    let h = g.upsample_nearest(h, 2);
    let h = g.conv3d(h, bind.var("conv2.kernel"), bind.var("conv2.bias"));
    let h = g.gelu(h);
    let h = g.upsample_nearest(h, 2);
    let h = g.conv3d(h, bind.var("conv3.kernel"), bind.var("conv3.bias"));
    let h = g.upsample_nearest(h, 2);
    Ok(g.resize_trilinear(h, target))
}

/// Mean per-voxel cross-entropy of `[C, D, H, W]` logits against a label
/// volume.
pub fn seg_ce_loss(g: &mut Graph, logits: Var, mask: &Array3<u8>, n_classes: usize) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 4 || shape[0] != n_classes {
        return Err(Error::data(format!(
            "expected [{n_classes}, D, H, W] logits, got {shape:?}"
        )));
    }
    if [shape[1], shape[2], shape[3]] != [mask.dim().0, mask.dim().1, mask.dim().2] {
        return Err(Error::data("mask shape does not match logits".to_string()));
    }
    let n = mask.len();
    let flat = g.reshape(logits, &[n_classes, n]);
    let rows = g.transpose2(flat);
    let logp = g.log_softmax_rows(rows);
    let mut onehot = Array2::<f64>::zeros((n, n_classes));
    for (i, &c) in mask.iter().enumerate() {
        if c as usize >= n_classes {
            return Err(Error::data(format!(
                "mask label {c} out of range for {n_classes} classes"
            )));
        }
        onehot[[i, c as usize]] = 1.0;
    }
    let oh = g.var(onehot.into_dyn());
    let picked = g.mul(logp, oh);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Argmax labels of a `[C, D, H, W]` logit tensor.
pub fn seg_labels(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let flat = logits
        .view()
        .into_shape_with_order((c, n))
        .unwrap()
        .to_owned();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            for ci in 1..c {
                if flat[[ci, i]] > flat[[best, i]] {
                    best = ci;
                }
            }
            best as u8
        })
        .collect()
}

/// Linear risk head on class tokens.
pub fn init_survival_head(in_dim: usize, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.insert("w", trunc_normal(&[in_dim, 1], 0.02, rng))?;
    s.insert("b", zeros(&[1]))?;
    Ok(s)
}

/// `x [n, d]` -> risk scores `[n]`.
pub fn survival_forward(g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
    let in_dim = g.value(bind.var("w")).shape()[0];
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != in_dim {
        return Err(Error::data(format!(
            "survival head expects [n, {in_dim}], got {shape:?}"
        )));
    }
    let r = g.matmul(x, bind.var("w"));
    let r = g.add_bias(r, bind.var("b"));
    Ok(g.reshape(r, &[shape[0]]))
}

// ---- Cox partial likelihood ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// Follow-up time in days, strictly positive.
    pub time: f64,
    /// True when death was observed, false when censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(Error::data(format!(
                "survival time must be positive and finite, got {}",
                self.time
            )));
        }
        Ok(())
    }
}

fn cox_validate(risks: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if risks.len() != records.len() {
        return Err(Error::data(format!(
            "{} risks vs {} survival records",
            risks.len(),
            records.len()
        )));
    }
    if risks.len() < 2 {
        return Err(Error::data("cox likelihood needs at least 2 subjects".to_string()));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::data("non-finite risk score".to_string()));
    }
    for r in records {
        r.validate()?;
    }
    if !records.iter().any(|r| r.event) {
        return Err(Error::data(
            "cox likelihood undefined with zero observed events".to_string(),
        ));
    }
    Ok(())
}

/// Negative log partial likelihood, Breslow ties: each event's risk set is
/// every subject still under observation at that time (`t_j >= t_i`), so
/// tied events share one risk set.
pub fn cox_partial_nll(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    cox_validate(risks, records)?;
    let mut nll = 0.0;
    for (i, rec) in records.iter().enumerate() {
        if !rec.event {
            continue;
        }
        let set: Vec<usize> = (0..risks.len())
            .filter(|&j| records[j].time >= rec.time)
            .collect();
        let m = set.iter().map(|&j| risks[j]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = set.iter().map(|&j| (risks[j] - m).exp()).sum();
        nll -= risks[i] - (m + s.ln());
    }
    Ok(nll)
}

struct CoxNllOp {
    records: Vec<SurvivalRecord>,
}

impl crate::graph::OpBackward for CoxNllOp {
    fn backward(&self, i: &[&Tensor], _o: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let risks: Vec<f64> = i[0].iter().copied().collect();
        let up = *g.iter().next().unwrap();
        let n = risks.len();
        let mut grad = vec![0.0; n];
        for (ei, rec) in self.records.iter().enumerate() {
            if !rec.event {
                continue;
            }
            grad[ei] -= 1.0;
            let set: Vec<usize> = (0..n)
                .filter(|&j| self.records[j].time >= rec.time)
                .collect();
            let m = set.iter().map(|&j| risks[j]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = set.iter().map(|&j| (risks[j] - m).exp()).sum();
            for &j in &set {
                grad[j] += (risks[j] - m).exp() / s;
            }
        }
        let mut out = Array1::from(grad);
        out *= up;
        vec![out.into_dyn()]
    }
}

/// Differentiable Cox NLL over a 1-D risk vector.
pub fn cox_nll(g: &mut Graph, risks: Var, records: &[SurvivalRecord]) -> Result<Var> {
    let r: Vec<f64> = g.value(risks).iter().copied().collect();
    if g.value(risks).ndim() != 1 {
        return Err(Error::data("cox_nll expects a 1-D risk vector".to_string()));
    }
    let value = cox_partial_nll(&r, records)?;
    Ok(g.custom(
        ndarray::arr0(value).into_dyn(),
        vec![risks],
        Box::new(CoxNllOp {
            records: records.to_vec(),
        }),
    ))
}

// ---- retrieval ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalOutcome {
    /// 0-based position of the positive in the descending ranking.
    pub rank: usize,
    pub hit: bool,
}

/// Candidate indices sorted by cosine similarity to the query, descending;
/// ties keep candidate order (stable sort).
pub fn cosine_ranking(query: ArrayView1<f64>, candidates: &Array2<f64>) -> Result<Vec<usize>> {
    if candidates.ncols() != query.len() {
        return Err(Error::data(format!(
            "query dim {} vs candidate dim {}",
            query.len(),
            candidates.ncols()
        )));
    }
    let qn = query.dot(&query).sqrt();
    if qn == 0.0 {
        return Err(Error::data("zero-norm query embedding".to_string()));
    }
    let mut sims = Vec::with_capacity(candidates.nrows());
    for row in candidates.rows() {
        let cn = row.dot(&row).sqrt();
        if cn == 0.0 {
            return Err(Error::data("zero-norm candidate embedding".to_string()));
        }
        sims.push(query.dot(&row) / (qn * cn));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap());
    Ok(order)
}

/// Rank the positive among the candidates; hit iff it lands in the top `k`.
pub fn rank_retrieval(
    query: ArrayView1<f64>,
    candidates: &Array2<f64>,
    positive: usize,
    k: usize,
) -> Result<RetrievalOutcome> {
    if positive >= candidates.nrows() {
        return Err(Error::data(format!(
            "positive index {positive} out of {} candidates",
            candidates.nrows()
        )));
    }
    if k == 0 {
        return Err(Error::config("retrieval k must be positive".to_string()));
    }
    let order = cosine_ranking(query, candidates)?;
    let rank = order.iter().position(|&i| i == positive).unwrap();
    Ok(RetrievalOutcome {
        rank,
        hit: rank < k,
    })
}

// ---- labels and splits ----

/// Delimited label rows: sample_id, then one or more numeric targets.
/// A first line starting with `sample_id` is treated as a header.
#[derive(Clone, Debug, Default)]
pub struct LabelTable {
    pub targets: BTreeMap<String, Vec<f64>>,
    pub n_cols: usize,
}

pub fn read_label_table(path: &Path) -> Result<LabelTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut table = LabelTable::default();
    for (lineno, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if rec.is_empty() || (rec.len() == 1 && rec[0].trim().is_empty()) {
            continue;
        }
        if lineno == 0 && rec[0].trim() == "sample_id" {
            continue;
        }
        let id = rec[0].trim().to_string();
        if rec.len() < 2 {
            return Err(Error::data(format!(
                "{} line {}: no targets for '{id}'",
                path.display(),
                lineno + 1
            )));
        }
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "{} line {}: bad number '{f}'",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if table.n_cols == 0 {
            table.n_cols = vals.len();
        } else if vals.len() != table.n_cols {
            return Err(Error::data(format!(
                "{} line {}: {} targets, expected {}",
                path.display(),
                lineno + 1,
                vals.len(),
                table.n_cols
            )));
        }
        if table.targets.insert(id.clone(), vals).is_some() {
            return Err(Error::data(format!("duplicate sample id '{id}'")));
        }
    }
    if table.targets.is_empty() {
        return Err(Error::data(format!("{}: no label rows", path.display())));
    }
    Ok(table)
}

/// Survival label rows: sample_id, time_days, event(0/1).
pub fn read_survival_table(path: &Path) -> Result<BTreeMap<String, SurvivalRecord>> {
    let table = read_label_table(path)?;
    if table.n_cols != 2 {
        return Err(Error::data(
            "survival labels need exactly (time_days, event) columns".to_string(),
        ));
    }
    let mut out = BTreeMap::new();
    for (id, vals) in table.targets {
        let event = match vals[1] {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => {
                return Err(Error::data(format!(
                    "event flag for '{id}' must be 0 or 1, got {v}"
                )))
            }
        };
        let rec = SurvivalRecord {
            time: vals[0],
            event,
        };
        rec.validate()?;
        out.insert(id, rec);
    }
    Ok(out)
}

/// Patient key convention: the sample id up to the first '_'.
pub fn default_patient_key(id: &str) -> String {
    id.split('_').next().unwrap_or(id).to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    /// Build a split, rejecting any patient appearing on both sides.
    pub fn disjoint(
        train: Vec<String>,
        val: Vec<String>,
        patient_key: impl Fn(&str) -> String,
    ) -> Result<Split> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::data("split sides must be non-empty".to_string()));
        }
        let train_patients: std::collections::BTreeSet<String> =
            train.iter().map(|id| patient_key(id)).collect();
        for id in &val {
            let p = patient_key(id);
            if train_patients.contains(&p) {
                return Err(Error::data(format!(
                    "patient '{p}' appears in both train and validation splits"
                )));
            }
        }
        Ok(Split { train, val })
    }

    /// Deterministic patient-stratified split by hashing seed-shuffled
    /// patient order.
    pub fn by_patient(
        ids: &[String],
        val_frac: f64,
        seed: u64,
        patient_key: impl Fn(&str) -> String,
    ) -> Result<Split> {
        if !(0.0 < val_frac && val_frac < 1.0) {
            return Err(Error::config(format!(
                "validation fraction must be in (0,1), got {val_frac}"
            )));
        }
        let mut patients: Vec<String> = ids
            .iter()
            .map(|id| patient_key(id))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if patients.len() < 2 {
            return Err(Error::data(
                "need at least 2 patients for a disjoint split".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        patients.shuffle(&mut rng);
        let n_val = ((patients.len() as f64 * val_frac).ceil() as usize)
            .clamp(1, patients.len() - 1);
        let val_set: std::collections::BTreeSet<&String> =
            patients[..n_val].iter().collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for id in ids {
            if val_set.contains(&patient_key(id)) {
                val.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
        Split::disjoint(train, val, patient_key)
    }
}

/// First `ceil(fraction * n)` ids of a seed-shuffled copy.
pub fn select_fraction(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::config(format!(
            "fraction must be in (0,1], got {fraction}"
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let keep = (fraction * ids.len() as f64).ceil() as usize;
    shuffled.truncate(keep.max(1));
    Ok(shuffled)
}

// ---- training ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeTrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub final_lr_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Fraction of the training split actually used.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            max_epochs: 100,
            lr: 1e-3,
            final_lr_factor: 0.01,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            batch_size: 16,
            fraction: 1.0,
            seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config(
                "epochs, batch size and patience must be positive".to_string(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0 < self.fraction && self.fraction <= 1.0) {
            return Err(Error::config(format!(
                "fraction must be in (0,1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let floor = self.lr * self.final_lr_factor;
        if self.max_epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f64 / (self.max_epochs - 1) as f64;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FitTrace {
    pub train_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric_name: String,
    pub higher_better: bool,
    /// Training ids after fraction selection, in selection order.
    pub train_ids: Vec<String>,
    pub backbone_fingerprint: String,
    pub skipped_batches: usize,
}

pub struct FittedProbe {
    pub params: ParamStore,
    pub trace: FitTrace,
}

/// Shared epoch loop: cosine-decayed AdamW over shuffled mini-batches,
/// best-validation-epoch checkpointing, early stop after `patience`
/// non-improving epochs. `batch_fn` returns the batch-mean loss with
/// already-mean-scaled gradients.
fn fit(
    mut params: ParamStore,
    train_ids: Vec<String>,
    cfg: &ProbeTrainConfig,
    full_batch: bool,
    metric_name: &str,
    higher_better: bool,
    fingerprint: String,
    mut rng: ChaCha8Rng,
    mut batch_fn: impl FnMut(&ParamStore, &[String]) -> Result<(f64, GradMap)>,
    mut validate: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<FittedProbe> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::data("no training samples".to_string()));
    }
    let batch = if full_batch {
        train_ids.len()
    } else {
        cfg.batch_size
    };
    let decay_mask =
        |name: &str| name.ends_with(".weight") || name.ends_with(".kernel");
    let mut opt = AdamW::new(
        &params,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.weight_decay,
        decay_mask,
    );
    let mut trace = FitTrace {
        train_loss: Vec::new(),
        val_metric: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NAN,
        metric_name: metric_name.to_string(),
        higher_better,
        train_ids: train_ids.clone(),
        backbone_fingerprint: fingerprint,
        skipped_batches: 0,
    };
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order = train_ids;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let (loss, grads) = batch_fn(&params, chunk)?;
            if grads.max_abs_checked().is_none() {
                trace.skipped_batches += 1;
                continue;
            }
            opt.step(&mut params, &grads, lr);
            loss_sum += loss;
            n_batches += 1;
        }
        trace
            .train_loss
            .push(if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN });
        let metric = validate(&params)?;
        trace.val_metric.push(metric);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => {
                if higher_better {
                    metric > *b
                } else {
                    metric < *b
                }
            }
        };
        if improved {
            best = Some((metric, epoch, params.clone()));
        } else if epoch - best.as_ref().unwrap().1 >= cfg.patience {
            break;
        }
    }
    let (metric, epoch, best_params) = best.unwrap();
    trace.best_epoch = epoch;
    trace.best_metric = metric;
    Ok(FittedProbe {
        params: best_params,
        trace,
    })
}

fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Var {
    let t = g.var(target.clone());
    let d = g.sub(pred, t);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// All records must carry one backbone fingerprint.
pub fn uniform_fingerprint<'a>(
    records: impl IntoIterator<Item = &'a EmbeddingRecord>,
) -> Result<String> {
    let mut fp: Option<&str> = None;
    for r in records {
        match fp {
            None => fp = Some(&r.backbone_fingerprint),
            Some(f) if f == r.backbone_fingerprint => {}
            Some(f) => {
                return Err(Error::data(format!(
                    "mixed backbone fingerprints in cache: {} vs {}",
                    &f[..12.min(f.len())],
                    &r.backbone_fingerprint[..12.min(r.backbone_fingerprint.len())]
                )))
            }
        }
    }
    fp.map(str::to_string)
        .ok_or_else(|| Error::data("no embedding records".to_string()))
}

fn require<'a, T>(map: &'a BTreeMap<String, T>, id: &str, what: &str) -> Result<&'a T> {
    map.get(id)
        .ok_or_else(|| Error::data(format!("missing {what} for sample '{id}'")))
}

fn embed_dim(records: &BTreeMap<String, EmbeddingRecord>) -> Result<usize> {
    records
        .values()
        .next()
        .map(|r| r.class_token.len())
        .ok_or_else(|| Error::data("no embedding records".to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadArch {
    Mlp { hidden: usize },
    QFormer(QFormerConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarTask {
    Classification,
    Regression,
}

/// Classification or regression probe on cached embeddings. Classification
/// expects a single 0/1 target column (one probe per label); regression
/// accepts any column count.
pub fn train_scalar_probe(
    arch: &HeadArch,
    task: ScalarTask,
    records: &BTreeMap<String, EmbeddingRecord>,
    labels: &LabelTable,
    split: &Split,
    cfg: &ProbeTrainConfig,
) -> Result<FittedProbe> {
    cfg.validate()?;
    let fingerprint = uniform_fingerprint(records.values())?;
    let d = embed_dim(records)?;
    let n_targets = labels.n_cols;
    if task == ScalarTask::Classification {
        if n_targets != 1 {
            return Err(Error::config(
                "classification probes take one label column; train one probe per label"
                    .to_string(),
            ));
        }
        for (id, v) in &labels.targets {
            if v[0] != 0.0 && v[0] != 1.0 {
                return Err(Error::data(format!(
                    "class label for '{id}' must be 0 or 1, got {}",
                    v[0]
                )));
            }
        }
    }
    for id in split.train.iter().chain(split.val.iter()) {
        require(records, id, "embedding record")?;
        require(&labels.targets, id, "label")?;
    }
    let train_ids = select_fraction(&split.train, cfg.fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = match arch {
        HeadArch::Mlp { hidden } => init_mlp_probe(d, *hidden, n_targets, &mut rng)?,
        HeadArch::QFormer(qc) => init_qformer(d, qc, n_targets, &mut rng)?,
    };
    let arch = arch.clone();
    let target_matrix = |ids: &[String]| -> Array2<f64> {
        let mut t = Array2::zeros((ids.len(), n_targets));
        for (i, id) in ids.iter().enumerate() {
            for (j, &v) in labels.targets[id].iter().enumerate() {
                t[[i, j]] = v;
            }
        }
        t
    };
    let forward = move |g: &mut Graph,
                        bind: &Binding,
                        ids: &[String]|
          -> Result<Var> {
        match &arch {
            HeadArch::Mlp { .. } => {
                let mut x = Array2::zeros((ids.len(), d));
                for (i, id) in ids.iter().enumerate() {
                    x.row_mut(i).assign(&records[id].class_token);
                }
                let xv = g.var(x.into_dyn());
                mlp_forward(g, bind, xv)
            }
            HeadArch::QFormer(qc) => {
                let mut rows = Vec::with_capacity(ids.len());
                for id in ids {
                    let tokens = g.var(records[id].patch_grid.tokens.clone().into_dyn());
                    rows.push(qformer_forward(g, bind, tokens, qc)?);
                }
                Ok(g.concat(&rows, 0))
            }
        }
    };
    let batch_fn = {
        let forward = &forward;
        move |params: &ParamStore, ids: &[String]| -> Result<(f64, GradMap)> {
            let mut g = Graph::new();
            let bind = Binding::bind_all(&mut g, params);
            let logits = forward(&mut g, &bind, ids)?;
            let t = target_matrix(ids).into_dyn();
            let loss = match task {
                ScalarTask::Classification => g.bce_with_logits(logits, &t),
                ScalarTask::Regression => mse_loss(&mut g, logits, &t),
            };
            let mut grads = g.backward(loss);
            let mut gm = GradMap::new();
            bind.collect_grads(&mut grads, &mut gm);
            Ok((g.scalar_value(loss), gm))
        }
    };
    let val_ids = split.val.clone();
    let validate = {
        let forward = &forward;
        let val_targets = target_matrix(&split.val);
        move |params: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let bind = Binding::bind_all(&mut g, params);
            let out = forward(&mut g, &bind, &val_ids)?;
            let pred = g.value(out);
            match task {
                ScalarTask::Classification => {
                    let scores: Vec<f64> = pred.iter().copied().collect();
                    let labels: Vec<bool> =
                        val_ids.iter().map(|id| labels.targets[id][0] > 0.5).collect();
                    metrics::auroc_value(&scores, &labels)
                }
                ScalarTask::Regression => {
                    let p: Vec<f64> = pred.iter().copied().collect();
                    let t: Vec<f64> = val_targets.iter().copied().collect();
                    metrics::mae_value(&p, &t)
                }
            }
        }
    };
    let (metric_name, higher) = match task {
        ScalarTask::Classification => ("auroc", true),
        ScalarTask::Regression => ("mae", false),
    };
    fit(
        params, train_ids, cfg, false, metric_name, higher, fingerprint, rng, batch_fn,
        validate,
    )
}

/// Localisation probe: targets are positions in `[0,1]^3`.
pub fn train_loc_probe(
    head_cfg: &LocHeadConfig,
    records: &BTreeMap<String, EmbeddingRecord>,
    targets: &BTreeMap<String, [f64; 3]>,
    split: &Split,
    cfg: &ProbeTrainConfig,
) -> Result<FittedProbe> {
    cfg.validate()?;
    let fingerprint = uniform_fingerprint(records.values())?;
    let d = embed_dim(records)?;
    for id in split.train.iter().chain(split.val.iter()) {
        require(records, id, "embedding record")?;
        let t = require(targets, id, "localisation target")?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite target for '{id}'")));
        }
    }
    let train_ids = select_fraction(&split.train, cfg.fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_loc_head(d, head_cfg, &mut rng)?;
    let head_cfg = *head_cfg;
    let predict = move |g: &mut Graph, bind: &Binding, ids: &[String]| -> Result<Var> {
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            let p = localise(g, bind, &records[id].patch_grid, &head_cfg)?;
            rows.push(g.reshape(p, &[1, 3]));
        }
        Ok(g.concat(&rows, 0))
    };
    let target_matrix = |ids: &[String]| -> Tensor {
        let mut t = Array2::zeros((ids.len(), 3));
        for (i, id) in ids.iter().enumerate() {
            for a in 0..3 {
                t[[i, a]] = targets[id][a];
            }
        }
        t.into_dyn()
    };
    let batch_fn = {
        let predict = &predict;
        move |params: &ParamStore, ids: &[String]| -> Result<(f64, GradMap)> {
            let mut g = Graph::new();
            let bind = Binding::bind_all(&mut g, params);
            let pred = predict(&mut g, &bind, ids)?;
            let loss = mse_loss(&mut g, pred, &target_matrix(ids));
            let mut grads = g.backward(loss);
            let mut gm = GradMap::new();
            bind.collect_grads(&mut grads, &mut gm);
            Ok((g.scalar_value(loss), gm))
        }
    };
    let val_ids = split.val.clone();
    let validate = {
        let predict = &predict;
        let vt = target_matrix(&split.val);
        move |params: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let bind = Binding::bind_all(&mut g, params);
            let pred = predict(&mut g, &bind, &val_ids)?;
            let p: Vec<f64> = g.value(pred).iter().copied().collect();
            let t: Vec<f64> = vt.iter().copied().collect();
            metrics::mae_value(&p, &t)
        }
    };
    fit(
        params, train_ids, cfg, false, "mae", false, fingerprint, rng, batch_fn, validate,
    )
}

/// Cox survival probe; training is full-batch because the partial
/// likelihood couples the whole risk set.
pub fn train_survival_probe(
    records: &BTreeMap<String, EmbeddingRecord>,
    survival: &BTreeMap<String, SurvivalRecord>,
    split: &Split,
    cfg: &ProbeTrainConfig,
) -> Result<FittedProbe> {
    cfg.validate()?;
    let fingerprint = uniform_fingerprint(records.values())?;
    let d = embed_dim(records)?;
    for id in split.train.iter().chain(split.val.iter()) {
        require(records, id, "embedding record")?;
        require(survival, id, "survival record")?;
    }
    let train_ids = select_fraction(&split.train, cfg.fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_survival_head(d, &mut rng)?;
    let class_matrix = |ids: &[String]| -> Tensor {
        let mut x = Array2::zeros((ids.len(), d));
        for (i, id) in ids.iter().enumerate() {
            x.row_mut(i).assign(&records[id].class_token);
        }
        x.into_dyn()
    };
    let batch_fn = move |params: &ParamStore, ids: &[String]| -> Result<(f64, GradMap)> {
        let recs: Vec<SurvivalRecord> = ids.iter().map(|id| survival[id]).collect();
        let mut g = Graph::new();
        let bind = Binding::bind_all(&mut g, params);
        let x = g.var(class_matrix(ids));
        let risks = survival_forward(&mut g, &bind, x)?;
        let nll = cox_nll(&mut g, risks, &recs)?;
        // normalise by events so loss scale is batch-size free
        let n_events = recs.iter().filter(|r| r.event).count() as f64;
        let loss = g.scale(nll, 1.0 / n_events);
        let mut grads = g.backward(loss);
        let mut gm = GradMap::new();
        bind.collect_grads(&mut grads, &mut gm);
        Ok((g.scalar_value(loss), gm))
    };
    let val_ids = split.val.clone();
    let validate = move |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bind = Binding::bind_all(&mut g, params);
        let x = g.var(class_matrix(&val_ids));
        let risks = survival_forward(&mut g, &bind, x)?;
        let r: Vec<f64> = g.value(risks).iter().copied().collect();
        let times: Vec<f64> = val_ids.iter().map(|id| survival[id].time).collect();
        let events: Vec<bool> = val_ids.iter().map(|id| survival[id].event).collect();
        metrics::c_index(&r, &times, &events)
    };
    fit(
        params, train_ids, cfg, true, "c_index", true, fingerprint, rng, batch_fn,
        validate,
    )
}

/// Segmentation probe against per-sample label volumes.
pub fn train_seg_probe(
    dec_cfg: &SegDecoderConfig,
    records: &BTreeMap<String, EmbeddingRecord>,
    masks: &BTreeMap<String, Array3<u8>>,
    split: &Split,
    cfg: &ProbeTrainConfig,
) -> Result<FittedProbe> {
    cfg.validate()?;
    let fingerprint = uniform_fingerprint(records.values())?;
    let d = embed_dim(records)?;
    for id in split.train.iter().chain(split.val.iter()) {
        require(records, id, "embedding record")?;
        require(masks, id, "label volume")?;
    }
    let train_ids = select_fraction(&split.train, cfg.fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_seg_decoder(d, dec_cfg, &mut rng)?;
    let n_classes = dec_cfg.n_classes;
    let batch_fn = move |params: &ParamStore, ids: &[String]| -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let bind = Binding::bind_all(&mut g, params);
        let mut terms = Vec::with_capacity(ids.len());
        for id in ids {
            let mask = &masks[id];
            let dims = mask.dim();
            let logits = segment(
                &mut g,
                &bind,
                &records[id].patch_grid,
                [dims.0, dims.1, dims.2],
            )?;
            let ce = seg_ce_loss(&mut g, logits, mask, n_classes)?;
            terms.push(g.scale(ce, 1.0 / ids.len() as f64));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t);
        }
        let mut grads = g.backward(loss);
        let mut gm = GradMap::new();
        bind.collect_grads(&mut grads, &mut gm);
        Ok((g.scalar_value(loss), gm))
    };
    let val_ids = split.val.clone();
    let validate = move |params: &ParamStore| -> Result<f64> {
        let mut sum = 0.0;
        for id in &val_ids {
            let mask = &masks[id];
            let dims = mask.dim();
            let mut g = Graph::new();
            let bind = Binding::bind_all(&mut g, params);
            let logits = segment(
                &mut g,
                &bind,
                &records[id].patch_grid,
                [dims.0, dims.1, dims.2],
            )?;
            let pred = seg_labels(g.value(logits));
            let truth: Vec<u8> = mask.iter().copied().collect();
            sum += metrics::dice(&pred, &truth, n_classes)?.macro_;
        }
        Ok(sum / val_ids.len() as f64)
    };
    fit(
        params, train_ids, cfg, false, "macro_dice", true, fingerprint, rng, batch_fn,
        validate,
    )
}

// ---- probe checkpoints ----

const PROBE_MAGIC: &[u8; 4] = b"VPRB";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub task: String,
    /// Architecture description, e.g. serialised [`HeadArch`].
    pub arch: serde_json::Value,
    pub backbone_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ProbeHeader {
    meta: ProbeMeta,
    param_order: Vec<String>,
}

pub fn save_probe(path: &Path, meta: &ProbeMeta, params: &ParamStore) -> Result<()> {
    let header = ProbeHeader {
        meta: meta.clone(),
        param_order: params.names().map(str::to_string).collect(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::data(format!("probe header encode: {e}")))?;
    let blobs: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    crate::blobs::write_container(path, PROBE_MAGIC, &header_json, &blobs)
}

pub fn load_probe(path: &Path) -> Result<(ProbeMeta, ParamStore)> {
    let (header_json, blobs) = crate::blobs::read_container(path, PROBE_MAGIC)?;
    let header: ProbeHeader = serde_json::from_str(&header_json)
        .map_err(|e| Error::data(format!("{}: bad probe header: {e}", path.display())))?;
    let map: BTreeMap<String, Tensor> = blobs.into_iter().collect();
    let params = ParamStore::from_map(&header.param_order, map)?;
    Ok((header.meta, params))
}
