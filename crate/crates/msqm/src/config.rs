//! Run configuration: desk-scale defaults, the `paper_scale` reference
//! profile, and the plain-text `key = value` config file format.
//!
//! Unknown keys are rejected. `profile = paper_scale` swaps in the
//! paper-scale model dimensions and should come before any key it would
//! otherwise overwrite.

use std::path::{Path, PathBuf};

use crate::data::{BackgroundMode, SynthConfig};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::{DecodeMode, ModelConfig};
use crate::pipeline::LEVELS;
use crate::rng::{derive_seed, tag};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub clip_len: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub dim: usize,
    pub queries: usize,
    pub heads: usize,
    pub r_rounds: usize,
    pub stage1_rounds: usize,
    pub enc_blocks: usize,
    pub keep_ratio: f32,
    pub height: usize,
    pub width: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub n_objects: usize,
    pub speed_min: i64,
    pub speed_max: i64,
    pub background: BackgroundMode,
    /// When set, clips are read from `<root>/train` and `<root>/val`
    /// instead of being synthesized in memory.
    pub dataset_root: Option<PathBuf>,
    pub mode: DecodeMode,
}

impl Default for TrainConfig {
    /// Desk-scale profile.
    fn default() -> TrainConfig {
        TrainConfig {
            seed: 42,
            epochs: 15,
            clip_len: 5,
            learning_rate: 1e-4,
            batch_size: 2,
            dim: 48,
            queries: 5,
            heads: 4,
            r_rounds: 2,
            stage1_rounds: 1,
            enc_blocks: 2,
            keep_ratio: 0.5,
            height: 64,
            width: 64,
            train_clips: 12,
            val_clips: 4,
            n_objects: 2,
            speed_min: 1,
            speed_max: 3,
            background: BackgroundMode::StaticNoise,
            dataset_root: None,
            mode: DecodeMode::Ours,
        }
    }
}

impl TrainConfig {
    /// Reference values from the original experimental setup: D = 384 with
    /// eight heads, N = 5 queries, T = 5, r = 0.5, lr 1e-4, 15 epochs. The
    /// full setup also used a pretrained Video-Swin backbone and dataset
    /// resolutions that are far outside desk scale; this profile only pins
    /// the transformer dimensions (roughly nine decoder-layer applications
    /// per forward at L = 4).
    pub fn paper_scale() -> TrainConfig {
        TrainConfig {
            dim: 384,
            heads: 8,
            queries: 5,
            clip_len: 5,
            epochs: 15,
            learning_rate: 1e-4,
            keep_ratio: 0.5,
            r_rounds: 2,
            stage1_rounds: 1,
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t: self.clip_len,
            height: self.height,
            width: self.width,
            dim: self.dim,
            queries: self.queries,
            heads: self.heads,
            r_rounds: self.r_rounds,
            stage1_rounds: self.stage1_rounds,
            enc_blocks: self.enc_blocks,
            keep_ratio: self.keep_ratio,
            drop_scales: DecoderConfig::default_drop_scales(LEVELS),
            mode: self.mode,
        }
    }

    /// Generator settings for the i-th clip of a named split.
    pub fn synth_config(&self, split: &str, index: usize) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, &[tag("synth"), tag(split), index as u64]),
            t: self.clip_len,
            height: self.height,
            width: self.width,
            n_objects: self.n_objects,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            background: self.background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.train_clips == 0 || self.val_clips == 0 {
            if self.dataset_root.is_none() {
                return Err(Error::InvalidConfig(
                    "train_clips and val_clips must be positive for synthetic data".into(),
                ));
            }
        }
        self.model_config().validate()
    }

    /// Apply one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::InvalidConfig(format!("bad value {v:?} for key {k}"));
        macro_rules! parse {
            ($field:expr, $k:expr, $v:expr) => {
                $field = $v.parse().map_err(|_| bad($k, $v))?
            };
        }
        match key {
            "profile" => match value {
                "desk" => *self = TrainConfig::default(),
                "paper_scale" => *self = TrainConfig::paper_scale(),
                _ => return Err(bad(key, value)),
            },
            "seed" => parse!(self.seed, key, value),
            "epochs" => parse!(self.epochs, key, value),
            "clip_len" => parse!(self.clip_len, key, value),
            "learning_rate" => parse!(self.learning_rate, key, value),
            "batch_size" => parse!(self.batch_size, key, value),
            "dim" => parse!(self.dim, key, value),
            "queries" => parse!(self.queries, key, value),
            "heads" => parse!(self.heads, key, value),
            "r_rounds" => parse!(self.r_rounds, key, value),
            "stage1_rounds" => parse!(self.stage1_rounds, key, value),
            "enc_blocks" => parse!(self.enc_blocks, key, value),
            "keep_ratio" => parse!(self.keep_ratio, key, value),
            "height" => parse!(self.height, key, value),
            "width" => parse!(self.width, key, value),
            "train_clips" => parse!(self.train_clips, key, value),
            "val_clips" => parse!(self.val_clips, key, value),
            "n_objects" => parse!(self.n_objects, key, value),
            "speed_min" => parse!(self.speed_min, key, value),
            "speed_max" => parse!(self.speed_max, key, value),
            "background" => match value {
                "static_noise" => self.background = BackgroundMode::StaticNoise,
                "slow_drift" => self.background = BackgroundMode::SlowDrift,
                _ => return Err(bad(key, value)),
            },
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "mode" => self.mode = value.parse()?,
            _ => {
                return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a config file of `key = value` lines. `#` starts a comment;
    /// blank lines are ignored; unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "line {} is not a `key = value` assignment: {raw:?}",
                    lineno + 1
                ))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.clip_len, 5);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.dim, 48);
        assert_eq!(cfg.queries, 5);
        assert_eq!(cfg.keep_ratio, 0.5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn paper_profile_pins_transformer_dims() {
        let cfg = TrainConfig::paper_scale();
        assert_eq!(cfg.dim, 384);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.queries, 5);
        assert_eq!(cfg.learning_rate, 1e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply("learning_rte", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply("epochs", "three").is_err());
        assert!(cfg.apply("background", "disco").is_err());
        assert!(cfg.apply("mode", "both").is_err());
    }

    #[test]
    fn parses_file_with_comments() {
        let dir = std::env::temp_dir().join("msqm_cfg");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.cfg");
        std::fs::write(
            &path,
            "# run settings\nseed = 7\nepochs = 3   # short run\n\nkeep_ratio = 0.8\nmode = baseline\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.keep_ratio, 0.8);
        assert_eq!(cfg.mode, DecodeMode::Baseline);
    }

    #[test]
    fn malformed_line_is_an_error() {
        let dir = std::env::temp_dir().join("msqm_cfg2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.cfg");
        std::fs::write(&path, "seed 7\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
    }
}
