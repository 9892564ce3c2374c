//! Staged end-to-end run: prep -> pretrain -> embed -> probe -> eval -> plot.
//!
//! Each stage directory carries a `_provenance.json` with a chained input
//! hash. Rerunning with unchanged inputs is a no-op; changing a stage's
//! inputs (or deleting its outputs) reruns that stage and everything after
//! it, never anything before it. An interrupted pretrain stage resumes from
//! its checkpoint as long as the inputs still match.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::sample_views;
use crate::config::{ClsArch, RunConfig};
use crate::embed::{self, EmbedMode, EmbeddingRecord, ExtractOptions, Manifest};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{self, MetricReport};
use crate::nn::{Binding, ParamStore};
use crate::phantom::CorpusManifest;
use crate::probes::{
    self, default_patient_key, HeadArch, LocHeadConfig, ProbeMeta, ScalarTask, SegDecoderConfig,
    Split,
};
use crate::report::{self, FractionCurve};
use crate::trainer::{SslState, StepOutcome};
use crate::vit;
use crate::volume::{self, CanonicalVolume, NormStats, RawVolume};

// ---- provenance ----

const PROVENANCE_FILE: &str = "_provenance.json";
const CHECKPOINT_EVERY: u64 = 25;
const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageProvenance {
    pub stage: String,
    /// Chained hash of everything this stage's outputs depend on.
    pub input_hash: String,
    /// False while the stage is running; a matching incomplete record
    /// resumes in place instead of wiping the directory.
    pub complete: bool,
    /// Output files relative to the stage directory.
    pub outputs: Vec<String>,
}

fn load_provenance(dir: &Path) -> Option<StageProvenance> {
    let text = fs::read_to_string(dir.join(PROVENANCE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn save_provenance(dir: &Path, prov: &StageProvenance) -> Result<()> {
    let json = serde_json::to_string_pretty(prov)
        .map_err(|e| Error::data(format!("provenance encode: {e}")))?;
    fs::write(dir.join(PROVENANCE_FILE), json)?;
    Ok(())
}

fn outputs_exist(dir: &Path, outputs: &[String]) -> bool {
    outputs.iter().all(|o| dir.join(o).exists())
}

/// Run `work` unless the stage is already complete for `input_hash`.
/// Returns whether the stage actually ran.
pub fn run_stage(
    dir: &Path,
    stage: &str,
    input_hash: &str,
    work: impl FnOnce(&Path) -> Result<Vec<String>>,
) -> Result<bool> {
    match load_provenance(dir) {
        Some(p)
            if p.input_hash == input_hash && p.complete && outputs_exist(dir, &p.outputs) =>
        {
            return Ok(false);
        }
        // same inputs but unfinished or missing outputs: rebuild in place,
        // keeping any checkpoint the stage can resume from
        Some(p) if p.input_hash == input_hash => {}
        // stale or unrecognised content
        _ => {
            if dir.exists() {
                fs::remove_dir_all(dir)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    save_provenance(
        dir,
        &StageProvenance {
            stage: stage.to_string(),
            input_hash: input_hash.to_string(),
            complete: false,
            outputs: Vec::new(),
        },
    )?;
    let outputs = work(dir)?;
    save_provenance(
        dir,
        &StageProvenance {
            stage: stage.to_string(),
            input_hash: input_hash.to_string(),
            complete: true,
            outputs,
        },
    )?;
    Ok(true)
}

/// Length-framed SHA-256 over the given parts.
fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    crate::nn::hex(&h.finalize())
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::data(format!("hash input encode: {e}")))
}

// ---- prep ----

fn sorted_vvol_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries =
        fs::read_dir(dir).map_err(|e| Error::data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("vvol") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::data(format!(
            "{}: no .vvol volumes found",
            dir.display()
        )));
    }
    Ok(ids)
}

/// Nearest-neighbour label resampling on the voxel-centre grid.
fn resample_mask_nearest(mask: &Array3<u8>, out_dims: (usize, usize, usize)) -> Array3<u8> {
    let in_dims = mask.dim();
    let src = |i: usize, n_out: usize, n_in: usize| -> usize {
        if n_out == 1 {
            return 0;
        }
        let c = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        (c.round().max(0.0) as usize).min(n_in - 1)
    };
    Array3::from_shape_fn(out_dims, |(z, y, x)| {
        mask[[
            src(z, out_dims.0, in_dims.0),
            src(y, out_dims.1, in_dims.1),
            src(x, out_dims.2, in_dims.2),
        ]]
    })
}

/// Resample raw volumes to the isotropic working grid, normalise with
/// corpus-level statistics, optionally strip background, and carry label
/// volumes through the same geometry.
pub fn stage_prep(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<String>> {
    let corpus = CorpusManifest::load(&data_dir.join("corpus.json"))?;
    let mut ids: Vec<String> = corpus.samples.iter().map(|s| s.sample_id.clone()).collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::data("corpus has no samples".to_string()));
    }

    let mut stats = NormStats::new();
    let mut resampled = Vec::with_capacity(ids.len());
    for id in &ids {
        let raw = RawVolume::load(&data_dir.join("volumes").join(format!("{id}.vvol")))?;
        let res = volume::resample_isotropic(&raw, cfg.prep.max_side)?;
        stats.push_volume(&res);
        resampled.push(res);
    }
    let summary = stats.summary()?;

    let mut outputs = vec!["norm_stats.json".to_string()];
    let stats_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::data(format!("norm stats encode: {e}")))?;
    fs::write(out.join("norm_stats.json"), stats_json)?;

    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir)?;
    let mask_src = data_dir.join("masks");
    let have_masks = mask_src.is_dir();
    let mask_dir = out.join("masks");
    if have_masks {
        fs::create_dir_all(&mask_dir)?;
    }

    for (id, res) in ids.iter().zip(&resampled) {
        let mut canon = volume::clip_and_normalize(res, summary)?;
        if cfg.prep.strip_background {
            canon = volume::strip_background(&canon, cfg.prep.air_hu_threshold)?.0;
        }
        let rel = format!("volumes/{id}.vvol");
        canon.save(&out.join(&rel))?;
        outputs.push(format!("{rel}.json"));
        outputs.push(rel);

        if have_masks {
            let mask = volume::read_array_u8(&mask_src.join(format!("{id}.vvol")))?
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::data(format!("mask for '{id}': {e}")))?;
            let res_dims = res.voxels.dim();
            let resampled_mask = resample_mask_nearest(&mask, res_dims);
            let o = canon.crop_offset;
            let d = canon.voxels.dim();
            let cropped = resampled_mask
                .slice(s![o[0]..o[0] + d.0, o[1]..o[1] + d.1, o[2]..o[2] + d.2])
                .to_owned();
            let rel = format!("masks/{id}.vvol");
            volume::write_array_u8(&out.join(&rel), &cropped.into_dyn())?;
            outputs.push(rel);
        }
    }
    Ok(outputs)
}

// ---- pretrain ----

/// Self-distillation training over the prepared volumes; resumes from
/// `checkpoint.vssl` when present and exports the teacher backbone.
pub fn stage_pretrain(cfg: &RunConfig, prep_dir: &Path, out: &Path) -> Result<Vec<String>> {
    let ids = sorted_vvol_ids(&prep_dir.join("volumes"))?;
    let mut volumes = Vec::with_capacity(ids.len());
    for id in &ids {
        volumes.push(CanonicalVolume::load(
            &prep_dir.join("volumes").join(format!("{id}.vvol")),
        )?);
    }

    let setup = cfg.train_setup();
    let ckpt = out.join("checkpoint.vssl");
    let mut state = if ckpt.exists() {
        SslState::load_expecting(&ckpt, &setup)?
    } else {
        SslState::new(setup, cfg.seed)?
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.jsonl"))?;
    let total = cfg.trainer.total_steps as u64;
    let accum = cfg.trainer.accumulation_steps;
    let per = cfg.trainer.per_step_samples;
    let mut consecutive_skips = 0usize;
    while state.step < total {
        let mut cursor = state.step as usize * accum * per;
        let mut micro_batches = Vec::with_capacity(accum);
        for _ in 0..accum {
            let mut batch = Vec::with_capacity(per);
            for _ in 0..per {
                let vol = &volumes[cursor % volumes.len()];
                cursor += 1;
                let seed = state.draw_seed();
                batch.push(sample_views(vol, &cfg.augment, seed)?);
            }
            micro_batches.push(batch);
        }
        match state.train_step(&micro_batches)? {
            StepOutcome::Updated(m) => {
                consecutive_skips = 0;
                writeln!(log, "{}", m.to_json_line())?;
            }
            StepOutcome::SkippedNonFinite { detail } => {
                consecutive_skips += 1;
                let line = serde_json::json!({ "step": state.step, "skipped": detail });
                writeln!(log, "{line}")?;
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::numerical(format!(
                        "{MAX_CONSECUTIVE_SKIPS} consecutive non-finite steps at step {}",
                        state.step
                    )));
                }
            }
        }
        if state.step % CHECKPOINT_EVERY == 0 {
            state.save(&ckpt)?;
        }
    }
    state.save(&ckpt)?;
    state.export_backbone(&out.join("backbone.vbb"))?;
    Ok(vec![
        "checkpoint.vssl".to_string(),
        "backbone.vbb".to_string(),
        "metrics.jsonl".to_string(),
    ])
}

// ---- embed ----

/// Encode every prepared volume with the frozen exported backbone and cache
/// the records under a manifest.
pub fn stage_embed(
    cfg: &RunConfig,
    prep_dir: &Path,
    pretrain_dir: &Path,
    out: &Path,
) -> Result<Vec<String>> {
    let (bb_cfg, params) = vit::load_backbone(&pretrain_dir.join("backbone.vbb"))?;
    if bb_cfg != cfg.backbone {
        return Err(Error::config(
            "exported backbone does not match the configured architecture".to_string(),
        ));
    }
    let opts = ExtractOptions {
        max_tokens: cfg.embed.max_tokens,
        ..ExtractOptions::default()
    };
    let mut manifest = Manifest::default();
    let mut outputs = vec!["manifest.json".to_string()];
    for id in sorted_vvol_ids(&prep_dir.join("volumes"))? {
        let vol = CanonicalVolume::load(&prep_dir.join("volumes").join(format!("{id}.vvol")))?;
        let record = match cfg.embed.mode {
            EmbedMode::Full3d => embed::extract_full3d(&vol, &cfg.backbone, &params, &opts)?,
            EmbedMode::Chunked2p5d { chunk_depth } => {
                embed::extract_chunked2p5d(&vol, &cfg.backbone, &params, chunk_depth, &opts)?
            }
        };
        embed::save_record(out, &record)?;
        manifest.upsert(&record);
        outputs.push(format!("{id}.emb"));
    }
    manifest.save(out)?;
    Ok(outputs)
}

// ---- probe ----

/// Regression targets are trained and reported in kilovoxels to keep the
/// squared-error scale sane.
const REG_TARGET_SCALE: f64 = 1e-3;

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        match (cols.next(), cols.next()) {
            (Some(a), Some(b)) => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::data(format!(
                    "{}: malformed pair line {}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::data(format!("{}: no pairs", path.display())));
    }
    Ok(pairs)
}

/// Pad a label volume to patch-multiple sides by edge replication, matching
/// the encoder's volume padding so token grids and labels stay aligned.
pub fn pad_mask_to_multiple(mask: &Array3<u8>, multiple: usize) -> Array3<u8> {
    let d = mask.dim();
    let up = |n: usize| n.div_ceil(multiple) * multiple;
    let out_dims = (up(d.0), up(d.1), up(d.2));
    Array3::from_shape_fn(out_dims, |(z, y, x)| {
        mask[[z.min(d.0 - 1), y.min(d.1 - 1), x.min(d.2 - 1)]]
    })
}

pub fn scalar_outputs(
    arch: &HeadArch,
    params: &ParamStore,
    record: &EmbeddingRecord,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bind = Binding::bind_all(&mut g, params);
    let out = match arch {
        HeadArch::Mlp { .. } => {
            let x = g.var(record.class_token.clone().insert_axis(Axis(0)).into_dyn());
            probes::mlp_forward(&mut g, &bind, x)?
        }
        HeadArch::QFormer(qc) => {
            let tokens = g.var(record.patch_grid.tokens.clone().into_dyn());
            probes::qformer_forward(&mut g, &bind, tokens, qc)?
        }
    };
    Ok(g.value(out).iter().copied().collect())
}

pub fn loc_point(
    head_cfg: &LocHeadConfig,
    params: &ParamStore,
    record: &EmbeddingRecord,
) -> Result<[f64; 3]> {
    let mut g = Graph::new();
    let bind = Binding::bind_all(&mut g, params);
    let p = probes::localise(&mut g, &bind, &record.patch_grid, head_cfg)?;
    let v = g.value(p);
    Ok([v[[0]], v[[1]], v[[2]]])
}

pub fn survival_risk(params: &ParamStore, record: &EmbeddingRecord) -> Result<f64> {
    let mut g = Graph::new();
    let bind = Binding::bind_all(&mut g, params);
    let x = g.var(record.class_token.clone().insert_axis(Axis(0)).into_dyn());
    let r = probes::survival_forward(&mut g, &bind, x)?;
    Ok(g.value(r)[[0]])
}

pub fn seg_macro_dice(
    n_classes: usize,
    params: &ParamStore,
    record: &EmbeddingRecord,
    mask: &Array3<u8>,
) -> Result<f64> {
    let dims = mask.dim();
    let mut g = Graph::new();
    let bind = Binding::bind_all(&mut g, params);
    let logits = probes::segment(&mut g, &bind, &record.patch_grid, [dims.0, dims.1, dims.2])?;
    let pred = probes::seg_labels(g.value(logits));
    let truth: Vec<u8> = mask.iter().copied().collect();
    Ok(metrics::dice(&pred, &truth, n_classes)?.macro_)
}

fn write_probe_outputs(
    task_dir: &Path,
    task: &str,
    arch: serde_json::Value,
    fitted: &probes::FittedProbe,
    predictions: &str,
) -> Result<()> {
    fs::create_dir_all(task_dir)?;
    let meta = ProbeMeta {
        task: task.to_string(),
        arch,
        backbone_fingerprint: fitted.trace.backbone_fingerprint.clone(),
    };
    probes::save_probe(&task_dir.join("probe.vprb"), &meta, &fitted.params)?;
    let trace = serde_json::to_string_pretty(&fitted.trace)
        .map_err(|e| Error::data(format!("trace encode: {e}")))?;
    fs::write(task_dir.join("trace.json"), trace)?;
    fs::write(task_dir.join("predictions.csv"), predictions)?;
    Ok(())
}

fn fraction_dir_name(fraction: f64) -> String {
    format!("f_{fraction:.2}")
}

const TASK_FILES: [&str; 3] = ["probe.vprb", "trace.json", "predictions.csv"];

/// Train the five probe heads per training fraction on the cached
/// embeddings, plus one untrained retrieval pass, writing per-task
/// checkpoints, traces, and validation predictions.
pub fn stage_probe(
    cfg: &RunConfig,
    data_dir: &Path,
    prep_dir: &Path,
    embed_dir: &Path,
    out: &Path,
) -> Result<Vec<String>> {
    let manifest = Manifest::load(embed_dir)?;
    if manifest.records.is_empty() {
        return Err(Error::data("embedding cache is empty".to_string()));
    }
    let fingerprint = manifest
        .records
        .values()
        .next()
        .map(|e| e.fingerprint.clone())
        .unwrap();
    let mut records: BTreeMap<String, EmbeddingRecord> = BTreeMap::new();
    for id in manifest.records.keys() {
        records.insert(
            id.clone(),
            embed::load_record_for(embed_dir, id, &fingerprint)?,
        );
    }
    let ids: Vec<String> = records.keys().cloned().collect();
    let split = Split::by_patient(&ids, cfg.probe.val_frac, cfg.seed, default_patient_key)?;

    let cls_labels = probes::read_label_table(&data_dir.join("labels_cls.csv"))?;
    let mut reg_labels = probes::read_label_table(&data_dir.join("labels_reg.csv"))?;
    for v in reg_labels.targets.values_mut() {
        for x in v.iter_mut() {
            *x *= REG_TARGET_SCALE;
        }
    }
    let loc_table = probes::read_label_table(&data_dir.join("labels_loc.csv"))?;
    if loc_table.n_cols != 3 {
        return Err(Error::data(format!(
            "localisation labels need 3 columns, found {}",
            loc_table.n_cols
        )));
    }
    let loc_targets: BTreeMap<String, [f64; 3]> = loc_table
        .targets
        .iter()
        .map(|(id, v)| (id.clone(), [v[0], v[1], v[2]]))
        .collect();
    let survival = probes::read_survival_table(&data_dir.join("labels_surv.csv"))?;

    let patch = cfg.backbone.patch_size;
    let mut masks: BTreeMap<String, Array3<u8>> = BTreeMap::new();
    for id in &ids {
        let mask = volume::read_array_u8(&prep_dir.join("masks").join(format!("{id}.vvol")))?
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::data(format!("mask for '{id}': {e}")))?;
        masks.insert(id.clone(), pad_mask_to_multiple(&mask, patch));
    }
    let n_classes = masks
        .values()
        .flat_map(|m| m.iter())
        .copied()
        .max()
        .unwrap_or(0) as usize
        + 1;
    if n_classes < 2 {
        return Err(Error::data(
            "label volumes contain no foreground class".to_string(),
        ));
    }

    let pairs = read_pairs(&data_dir.join("pairs.csv"))?;
    let arch = match cfg.probe.arch {
        ClsArch::Mlp => HeadArch::Mlp {
            hidden: cfg.probe.mlp_hidden,
        },
        ClsArch::QFormer => HeadArch::QFormer(cfg.probe.qformer),
    };
    let arch_json = serde_json::to_value(&arch)
        .map_err(|e| Error::data(format!("arch encode: {e}")))?;

    let mut outputs = Vec::new();
    for &fraction in &cfg.probe.fractions {
        let mut train_cfg = cfg.probe.train.clone();
        train_cfg.fraction = fraction;
        let fdir = fraction_dir_name(fraction);

        // classification
        let fitted = probes::train_scalar_probe(
            &arch,
            ScalarTask::Classification,
            &records,
            &cls_labels,
            &split,
            &train_cfg,
        )?;
        let mut csv = String::from("sample_id,score,label\n");
        for id in &split.val {
            let score = scalar_outputs(&arch, &fitted.params, &records[id])?[0];
            csv.push_str(&format!("{id},{score},{}\n", cls_labels.targets[id][0]));
        }
        write_probe_outputs(
            &out.join(&fdir).join("cls"),
            "classification",
            arch_json.clone(),
            &fitted,
            &csv,
        )?;

        // regression
        let fitted = probes::train_scalar_probe(
            &arch,
            ScalarTask::Regression,
            &records,
            &reg_labels,
            &split,
            &train_cfg,
        )?;
        let mut csv = String::from("sample_id,pred,target\n");
        for id in &split.val {
            let pred = scalar_outputs(&arch, &fitted.params, &records[id])?[0];
            csv.push_str(&format!("{id},{pred},{}\n", reg_labels.targets[id][0]));
        }
        write_probe_outputs(
            &out.join(&fdir).join("reg"),
            "regression",
            arch_json.clone(),
            &fitted,
            &csv,
        )?;

        // localisation
        let fitted =
            probes::train_loc_probe(&cfg.probe.loc, &records, &loc_targets, &split, &train_cfg)?;
        let mut csv = String::from("sample_id,pz,py,px,tz,ty,tx\n");
        for id in &split.val {
            let p = loc_point(&cfg.probe.loc, &fitted.params, &records[id])?;
            let t = loc_targets[id];
            csv.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                p[0], p[1], p[2], t[0], t[1], t[2]
            ));
        }
        write_probe_outputs(
            &out.join(&fdir).join("loc"),
            "localisation",
            serde_json::to_value(cfg.probe.loc)
                .map_err(|e| Error::data(format!("arch encode: {e}")))?,
            &fitted,
            &csv,
        )?;

        // survival
        let fitted = probes::train_survival_probe(&records, &survival, &split, &train_cfg)?;
        let mut csv = String::from("sample_id,risk,time_days,event\n");
        for id in &split.val {
            let risk = survival_risk(&fitted.params, &records[id])?;
            let rec = survival[id];
            csv.push_str(&format!(
                "{id},{risk},{},{}\n",
                rec.time,
                if rec.event { 1 } else { 0 }
            ));
        }
        write_probe_outputs(
            &out.join(&fdir).join("surv"),
            "survival",
            serde_json::json!({ "kind": "linear_cox" }),
            &fitted,
            &csv,
        )?;

        // segmentation
        let dec_cfg = SegDecoderConfig {
            n_classes,
            mid_channels: cfg.probe.seg_mid_channels,
        };
        let fitted = probes::train_seg_probe(&dec_cfg, &records, &masks, &split, &train_cfg)?;
        let mut csv = String::from("sample_id,macro_dice\n");
        for id in &split.val {
            let d = seg_macro_dice(n_classes, &fitted.params, &records[id], &masks[id])?;
            csv.push_str(&format!("{id},{d}\n"));
        }
        write_probe_outputs(
            &out.join(&fdir).join("seg"),
            "segmentation",
            serde_json::to_value(&dec_cfg)
                .map_err(|e| Error::data(format!("arch encode: {e}")))?,
            &fitted,
            &csv,
        )?;

        for task in ["cls", "reg", "loc", "surv", "seg"] {
            for f in TASK_FILES {
                outputs.push(format!("{fdir}/{task}/{f}"));
            }
        }
    }

    // retrieval needs no training; ranked once over the whole corpus
    let embed_dim = records.values().next().unwrap().class_token.len();
    let mut csv = String::from("sample_id,positive_id,rank,hit\n");
    for (query, positive) in &pairs {
        let q = records
            .get(query)
            .ok_or_else(|| Error::data(format!("pair query '{query}' has no embedding")))?;
        if !records.contains_key(positive) {
            return Err(Error::data(format!(
                "pair positive '{positive}' has no embedding"
            )));
        }
        let cand_ids: Vec<&String> = ids.iter().filter(|i| *i != query).collect();
        let mut cands = Array2::zeros((cand_ids.len(), embed_dim));
        for (i, id) in cand_ids.iter().enumerate() {
            cands.row_mut(i).assign(&records[*id].class_token);
        }
        let pos_idx = cand_ids.iter().position(|i| *i == positive).unwrap();
        let k = cfg.eval.recall_k.min(cand_ids.len());
        let outcome = probes::rank_retrieval(q.class_token.view(), &cands, pos_idx, k)?;
        csv.push_str(&format!(
            "{query},{positive},{},{}\n",
            outcome.rank,
            if outcome.hit { 1 } else { 0 }
        ));
    }
    let retr_dir = out.join("retr");
    fs::create_dir_all(&retr_dir)?;
    fs::write(retr_dir.join("predictions.csv"), csv)?;
    outputs.push("retr/predictions.csv".to_string());

    Ok(outputs)
}

// ---- eval ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub metric: String,
    pub fraction: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Full-training-set reports, one per task metric.
    pub reports: Vec<MetricReport>,
    /// Per-fraction reports when sweeping training-set size.
    pub sweeps: Vec<SweepPoint>,
}

/// Numeric prediction table: id column followed by `n_cols` numeric columns.
fn read_pred_csv(path: &Path, n_cols: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != n_cols + 1 {
            return Err(Error::data(format!(
                "{}: line {} has {} columns, expected {}",
                path.display(),
                i + 1,
                cols.len(),
                n_cols + 1
            )));
        }
        ids.push(cols[0].to_string());
        let mut row = Vec::with_capacity(n_cols);
        for c in &cols[1..] {
            row.push(c.parse::<f64>().map_err(|e| {
                Error::data(format!("{}: line {}: {e}", path.display(), i + 1))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no predictions", path.display())));
    }
    Ok((ids, rows))
}

/// Turn validation predictions into uncertainty-quantified metric reports:
/// rank-based metrics get Hanley-McNeil errors, everything else a seeded
/// bootstrap.
pub fn stage_eval(cfg: &RunConfig, probe_dir: &Path, out: &Path) -> Result<Vec<String>> {
    let resamples = cfg.eval.bootstrap_resamples;
    let sweeping = cfg.probe.fractions.len() > 1;
    let mut reports = Vec::new();
    let mut sweeps = Vec::new();
    let mut boot_seed = cfg.eval.bootstrap_seed;
    let mut next_seed = || {
        let s = boot_seed;
        boot_seed = boot_seed.wrapping_add(1);
        s
    };

    for &fraction in &cfg.probe.fractions {
        let fdir = probe_dir.join(fraction_dir_name(fraction));
        let is_full = (fraction - 1.0).abs() < 1e-12;
        let push = |r: MetricReport, reports: &mut Vec<MetricReport>,
                    sweeps: &mut Vec<SweepPoint>| {
            if is_full {
                reports.push(r.clone());
            }
            if sweeping {
                sweeps.push(SweepPoint {
                    metric: r.name.clone(),
                    fraction,
                    report: r,
                });
            }
        };

        // classification AUROC
        let (_, rows) = read_pred_csv(&fdir.join("cls/predictions.csv"), 2)?;
        let scores: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[1] > 0.5).collect();
        let mut r = metrics::auroc(&scores, &labels)?;
        r.name = "cls/auroc".to_string();
        push(r, &mut reports, &mut sweeps);

        // regression MAE (kilovoxels)
        let (_, rows) = read_pred_csv(&fdir.join("reg/predictions.csv"), 2)?;
        let abs_err: Vec<f64> = rows.iter().map(|r| (r[0] - r[1]).abs()).collect();
        let r = metrics::bootstrap_ci(
            "reg/mae_kvox",
            abs_err.len(),
            |idx| Some(idx.iter().map(|&i| abs_err[i]).sum::<f64>() / idx.len() as f64),
            resamples,
            next_seed(),
        )?;
        push(r, &mut reports, &mut sweeps);

        // localisation MAE over all coordinates
        let (_, rows) = read_pred_csv(&fdir.join("loc/predictions.csv"), 6)?;
        let mae_per_sample: Vec<f64> = rows
            .iter()
            .map(|r| ((r[0] - r[3]).abs() + (r[1] - r[4]).abs() + (r[2] - r[5]).abs()) / 3.0)
            .collect();
        let r = metrics::bootstrap_ci(
            "loc/mae",
            mae_per_sample.len(),
            |idx| {
                Some(idx.iter().map(|&i| mae_per_sample[i]).sum::<f64>() / idx.len() as f64)
            },
            resamples,
            next_seed(),
        )?;
        push(r, &mut reports, &mut sweeps);

        // survival: concordance plus fixed-horizon discrimination
        let (_, rows) = read_pred_csv(&fdir.join("surv/predictions.csv"), 3)?;
        let risks: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let times: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let events: Vec<bool> = rows.iter().map(|r| r[2] > 0.5).collect();
        let r = metrics::bootstrap_ci(
            "surv/c_index",
            risks.len(),
            |idx| {
                let rr: Vec<f64> = idx.iter().map(|&i| risks[i]).collect();
                let tt: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
                let ee: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
                metrics::c_index(&rr, &tt, &ee).ok()
            },
            resamples,
            next_seed(),
        )?;
        push(r, &mut reports, &mut sweeps);

        let horizon = cfg.eval.survival_horizon_days;
        let (kept, horizon_pos) = metrics::horizon_labels(&times, &events, horizon)?;
        let kept_risks: Vec<f64> = kept.iter().map(|&i| risks[i]).collect();
        let mut r = metrics::auroc(&kept_risks, &horizon_pos)?;
        r.name = format!("surv/auroc@{horizon}d");
        push(r, &mut reports, &mut sweeps);

        // segmentation DICE over per-sample macro scores
        let (_, rows) = read_pred_csv(&fdir.join("seg/predictions.csv"), 1)?;
        let dices: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let r = metrics::bootstrap_ci(
            "seg/dice",
            dices.len(),
            |idx| Some(idx.iter().map(|&i| dices[i]).sum::<f64>() / idx.len() as f64),
            resamples,
            next_seed(),
        )?;
        push(r, &mut reports, &mut sweeps);
    }

    // retrieval is training-free, so it sits outside the fraction sweep
    let retr_path = probe_dir.join("retr/predictions.csv");
    let text = fs::read_to_string(&retr_path)
        .map_err(|e| Error::data(format!("{}: {e}", retr_path.display())))?;
    let mut hits: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let hit = line.rsplit(',').next().and_then(|c| c.parse::<f64>().ok());
        match hit {
            Some(h) => hits.push(h),
            None => {
                return Err(Error::data(format!(
                    "{}: malformed line {}",
                    retr_path.display(),
                    i + 1
                )))
            }
        }
    }
    if hits.is_empty() {
        return Err(Error::data(format!("{}: no pairs", retr_path.display())));
    }
    let r = metrics::bootstrap_ci(
        &format!("retr/recall@{}", cfg.eval.recall_k),
        hits.len(),
        |idx| Some(idx.iter().map(|&i| hits[i]).sum::<f64>() / idx.len() as f64),
        resamples,
        next_seed(),
    )?;
    reports.push(r);

    let summary = EvalSummary { reports, sweeps };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::data(format!("report encode: {e}")))?;
    fs::write(out.join("reports.json"), json)?;
    Ok(vec!["reports.json".to_string()])
}

// ---- plot ----

pub fn load_eval_summary(eval_dir: &Path) -> Result<EvalSummary> {
    let path = eval_dir.join("reports.json");
    let text =
        fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Bar chart, summary table, and (when sweeping) fraction curves.
pub fn stage_plot(eval_dir: &Path, out: &Path) -> Result<Vec<String>> {
    let summary = load_eval_summary(eval_dir)?;
    report::render_bar_chart(
        &summary.reports,
        "frozen-backbone probes",
        &out.join("metrics.svg"),
    )?;
    report::write_summary_csv(&summary.reports, &out.join("summary.csv"))?;
    let mut outputs = vec!["metrics.svg".to_string(), "summary.csv".to_string()];
    if !summary.sweeps.is_empty() {
        let mut by_metric: BTreeMap<String, Vec<(f64, MetricReport)>> = BTreeMap::new();
        for sp in &summary.sweeps {
            by_metric
                .entry(sp.metric.clone())
                .or_default()
                .push((sp.fraction, sp.report.clone()));
        }
        let curves: Vec<FractionCurve> = by_metric
            .into_iter()
            .map(|(label, points)| FractionCurve { label, points })
            .collect();
        report::render_fraction_curves(
            &curves,
            "training-fraction sweep",
            &out.join("fractions.svg"),
        )?;
        outputs.push("fractions.svg".to_string());
    }
    Ok(outputs)
}

// ---- orchestration ----

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// (stage name, whether it ran rather than being skipped).
    pub ran: Vec<(String, bool)>,
    pub summary: EvalSummary,
}

impl PipelineOutcome {
    pub fn stage_ran(&self, stage: &str) -> Option<bool> {
        self.ran.iter().find(|(s, _)| s == stage).map(|(_, r)| *r)
    }
}

/// Run every stage against `data_dir`, reusing completed work under
/// `out_dir`. The resolved configuration is written next to the outputs.
pub fn run_pipeline(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("config.toml"))?;

    let corpus_path = data_dir.join("corpus.json");
    let corpus_bytes = fs::read(&corpus_path)
        .map_err(|e| Error::data(format!("{}: {e}", corpus_path.display())))?;
    let seed_bytes = cfg.seed.to_le_bytes();
    let mut ran = Vec::new();

    let prep_hash = sha_hex(&[b"prep", &corpus_bytes, &json_bytes(&cfg.prep)?, &seed_bytes]);
    let prep_dir = out_dir.join("prep");
    ran.push((
        "prep".to_string(),
        run_stage(&prep_dir, "prep", &prep_hash, |d| {
            stage_prep(cfg, data_dir, d)
        })?,
    ));

    let train_inputs = json_bytes(&(&cfg.augment, &cfg.backbone, &cfg.ssl, &cfg.trainer))?;
    let pretrain_hash = sha_hex(&[
        b"pretrain",
        prep_hash.as_bytes(),
        &train_inputs,
        &seed_bytes,
    ]);
    let pretrain_dir = out_dir.join("pretrain");
    ran.push((
        "pretrain".to_string(),
        run_stage(&pretrain_dir, "pretrain", &pretrain_hash, |d| {
            stage_pretrain(cfg, &prep_dir, d)
        })?,
    ));

    let embed_hash = sha_hex(&[
        b"embed",
        pretrain_hash.as_bytes(),
        &json_bytes(&cfg.embed)?,
    ]);
    let embed_dir = out_dir.join("embed");
    ran.push((
        "embed".to_string(),
        run_stage(&embed_dir, "embed", &embed_hash, |d| {
            stage_embed(cfg, &prep_dir, &pretrain_dir, d)
        })?,
    ));

    // labels are independent inputs to the probe stage
    let mut probe_parts: Vec<Vec<u8>> = vec![
        b"probe".to_vec(),
        embed_hash.as_bytes().to_vec(),
        json_bytes(&cfg.probe)?,
        cfg.eval.recall_k.to_le_bytes().to_vec(),
    ];
    for f in [
        "labels_cls.csv",
        "labels_reg.csv",
        "labels_loc.csv",
        "labels_surv.csv",
        "pairs.csv",
    ] {
        probe_parts.push(fs::read(data_dir.join(f)).unwrap_or_default());
    }
    let probe_refs: Vec<&[u8]> = probe_parts.iter().map(|p| p.as_slice()).collect();
    let probe_hash = sha_hex(&probe_refs);
    let probe_dir = out_dir.join("probe");
    ran.push((
        "probe".to_string(),
        run_stage(&probe_dir, "probe", &probe_hash, |d| {
            stage_probe(cfg, data_dir, &prep_dir, &embed_dir, d)
        })?,
    ));

    let eval_hash = sha_hex(&[b"eval", probe_hash.as_bytes(), &json_bytes(&cfg.eval)?]);
    let eval_dir = out_dir.join("eval");
    ran.push((
        "eval".to_string(),
        run_stage(&eval_dir, "eval", &eval_hash, |d| {
            stage_eval(cfg, &probe_dir, d)
        })?,
    ));

    let plot_hash = sha_hex(&[b"plot", eval_hash.as_bytes()]);
    let plots_dir = out_dir.join("plots");
    ran.push((
        "plot".to_string(),
        run_stage(&plots_dir, "plot", &plot_hash, |d| stage_plot(&eval_dir, d))?,
    ));

    let summary = load_eval_summary(&eval_dir)?;
    Ok(PipelineOutcome { ran, summary })
}

pub fn stage_dir(out_dir: &Path, stage: &str) -> PathBuf {
    match stage {
        "plot" => out_dir.join("plots"),
        s => out_dir.join(s),
    }
}
