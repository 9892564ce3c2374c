//! Declarative run configuration: one TOML file drives every stage.
//! Unknown keys are rejected, every field has a documented default, and
//! each run writes its fully resolved config next to the outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::augment::AugmentConfig;
use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::probes::{LocHeadConfig, ProbeTrainConfig, QFormerConfig};
use crate::ssl::HeadConfig;
use crate::trainer::{TrainConfig, TrainSetup};
use crate::vit::BackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Longest side after isotropic resampling, voxels.
    pub max_side: usize,
    /// Crop to the largest above-air connected component.
    pub strip_background: bool,
    /// Foreground threshold for background stripping, HU.
    pub air_hu_threshold: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            max_side: 160,
            strip_background: true,
            air_hu_threshold: -500.0,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_side < 8 {
            return Err(Error::config(format!(
                "prep.max_side must be >= 8, got {}",
                self.max_side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub mode: EmbedMode,
    /// Token budget guarding full-3D extraction.
    pub max_tokens: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            mode: EmbedMode::Full3d,
            max_tokens: 65_536,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsArch {
    Mlp,
    QFormer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train: ProbeTrainConfig,
    /// Head used for classification/regression probes.
    pub arch: ClsArch,
    pub mlp_hidden: usize,
    pub qformer: QFormerConfig,
    pub loc: LocHeadConfig,
    pub seg_mid_channels: [usize; 2],
    /// Validation fraction of patients.
    pub val_frac: f64,
    /// Training-set fractions to sweep; singleton for a plain run.
    pub fractions: Vec<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train: ProbeTrainConfig::default(),
            arch: ClsArch::Mlp,
            mlp_hidden: 256,
            qformer: QFormerConfig::default(),
            loc: LocHeadConfig::default(),
            seg_mid_channels: [64, 32],
            val_frac: 0.3,
            fractions: vec![1.0],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.mlp_hidden == 0 {
            return Err(Error::config("probe.mlp_hidden must be positive".to_string()));
        }
        if !(0.0 < self.val_frac && self.val_frac < 1.0) {
            return Err(Error::config(format!(
                "probe.val_frac must be in (0,1), got {}",
                self.val_frac
            )));
        }
        if self.fractions.is_empty() {
            return Err(Error::config("probe.fractions must be non-empty".to_string()));
        }
        for &f in &self.fractions {
            if !(0.0 < f && f <= 1.0) {
                return Err(Error::config(format!("probe fraction {f} outside (0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub recall_k: usize,
    /// Horizon for fixed-time survival discrimination, days.
    pub survival_horizon_days: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_resamples: 1000,
            bootstrap_seed: 0,
            recall_k: 10,
            survival_horizon_days: 1095.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_resamples == 0 || self.recall_k == 0 {
            return Err(Error::config(
                "eval resamples and recall_k must be positive".to_string(),
            ));
        }
        if !(self.survival_horizon_days > 0.0) {
            return Err(Error::config("eval.survival_horizon_days must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub prep: PrepConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub ssl: HeadConfig,
    pub trainer: TrainConfig,
    pub embed: EmbedConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale configuration sized for the synthetic phantom corpus.
    pub fn toy() -> Self {
        RunConfig {
            seed: 0,
            prep: PrepConfig {
                max_side: 64,
                // phantom labels live in the uncropped frame
                strip_background: false,
                ..PrepConfig::default()
            },
            augment: AugmentConfig {
                global_target: 56,
                local_target: 28,
                ..AugmentConfig::default()
            },
            backbone: BackboneConfig::toy(),
            ssl: HeadConfig::toy(),
            trainer: TrainConfig {
                per_step_samples: 2,
                accumulation_steps: 1,
                total_steps: 20,
                base_lr: 5e-4,
                ..TrainConfig::default()
            },
            embed: EmbedConfig::default(),
            probe: ProbeConfig {
                train: ProbeTrainConfig {
                    max_epochs: 40,
                    ..ProbeTrainConfig::default()
                },
                mlp_hidden: 64,
                seg_mid_channels: [12, 8],
                ..ProbeConfig::default()
            },
            eval: EvalConfig {
                bootstrap_resamples: 500,
                ..EvalConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prep.validate()?;
        self.augment.validate()?;
        self.backbone.validate()?;
        self.ssl.validate()?;
        self.trainer.validate()?;
        self.probe.validate()?;
        self.eval.validate()?;
        if self.augment.patch_size != self.backbone.patch_size {
            return Err(Error::config(format!(
                "augment.patch_size {} != backbone.patch_size {}",
                self.augment.patch_size, self.backbone.patch_size
            )));
        }
        if let EmbedMode::Chunked2p5d { chunk_depth } = self.embed.mode {
            if chunk_depth == 0 || chunk_depth % self.backbone.patch_size != 0 {
                return Err(Error::config(format!(
                    "embed chunk depth {chunk_depth} must be a positive multiple of patch size {}",
                    self.backbone.patch_size
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully resolved config (every default made explicit).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("config encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Content hash over the canonical JSON form; the provenance key.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        crate::nn::hex(&h.finalize())
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            backbone: self.backbone.clone(),
            head: self.ssl.clone(),
            augment: self.augment.clone(),
            train: self.trainer.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::toy();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        cfg.save(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "seed = 1\n[trainer]\nnot_a_key = 3\n").unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("partial.toml");
        std::fs::write(&p, "seed = 7\n[backbone]\nembed_dim = 96\nn_heads = 4\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.backbone.embed_dim, 96);
        assert_eq!(cfg.backbone.n_blocks, BackboneConfig::default().n_blocks);
        assert_eq!(cfg.eval.recall_k, 10);
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::toy();
        cfg.augment.patch_size = 7;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::toy();
        cfg.embed.mode = EmbedMode::Chunked2p5d { chunk_depth: 15 };
        assert!(cfg.validate().is_err());
        cfg.embed.mode = EmbedMode::Chunked2p5d { chunk_depth: 28 };
        cfg.validate().unwrap();

        let mut cfg = RunConfig::toy();
        cfg.probe.fractions = vec![0.2, 1.5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::toy();
        let mut b = RunConfig::toy();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
