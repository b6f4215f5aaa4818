//! Full segmentation model: feature pipeline, query-memory decoder (or the
//! multiscale-query baseline), segmentation head.
//!
//! Parameters are registered in a fixed order and initialized per name, so
//! the two decode modes share bit-identical backbone, encoder, FPN,
//! embedding and head weights under the same seed.

use crate::decoder::{BaselineDecoder, DecodeTrace, DecoderConfig, QmDecoder};
use crate::embeddings::{Embeddings, LevelDims};
use crate::error::{Error, Result};
use crate::pipeline::{pyramid_dims, FeaturePipeline, PyramidLevel, LEVELS};
use crate::seg_head::{MaskClip, SegHead};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Ours,
    Baseline,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<DecodeMode> {
        match s {
            "ours" => Ok(DecodeMode::Ours),
            "baseline" => Ok(DecodeMode::Baseline),
            other => Err(Error::InvalidConfig(format!(
                "mode must be \"ours\" or \"baseline\", got {other:?}"
            ))),
        }
    }
}

/// Model dimensions and schedule.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub queries: usize,
    pub heads: usize,
    pub r_rounds: usize,
    pub stage1_rounds: usize,
    pub enc_blocks: usize,
    pub keep_ratio: f32,
    /// 0-based level indices that drop tokens; defaults to the finest two.
    pub drop_scales: Vec<usize>,
    pub mode: DecodeMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim < 6 || (self.dim / 3) % 2 != 0 {
            return bad(format!(
                "dim {} must be >= 6 with floor(dim/3) even for the positional split",
                self.dim
            ));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be divisible by 4 for the head", self.dim));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if self.drop_scales.iter().any(|&l| l >= LEVELS) {
            return bad(format!(
                "drop_scales {:?} outside 0..{LEVELS}",
                self.drop_scales
            ));
        }
        if self.t < 2 {
            return bad(format!("clip length {} must be at least 2", self.t));
        }
        if self.queries == 0 || self.r_rounds == 0 || self.stage1_rounds == 0 {
            return bad("queries, r_rounds and stage1_rounds must be positive".into());
        }
        // height/width divisibility is checked by pyramid_dims
        pyramid_dims(self.t, self.height, self.width).map(|_| ())
    }

    fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            queries: self.queries,
            heads: self.heads,
            r_rounds: self.r_rounds,
            stage1_rounds: self.stage1_rounds,
            keep_ratio: self.keep_ratio,
            drop_scales: self.drop_scales.clone(),
        }
    }
}

enum ModelDecoder {
    Ours(QmDecoder),
    Baseline(BaselineDecoder),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pipeline: FeaturePipeline,
    emb: Embeddings,
    decoder: ModelDecoder,
    head: SegHead,
    dims: Vec<LevelDims>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let dims = pyramid_dims(cfg.t, cfg.height, cfg.width)?;
        let mut store = ParamStore::new();
        let pipeline =
            FeaturePipeline::register(&mut store, cfg.dim, cfg.heads, cfg.enc_blocks, seed);
        let emb = Embeddings::register(&mut store, cfg.queries, cfg.dim, &dims, seed)?;
        let decoder = match cfg.mode {
            DecodeMode::Ours => {
                ModelDecoder::Ours(QmDecoder::register(&mut store, cfg.dim, cfg.decoder_config(), seed))
            }
            DecodeMode::Baseline => ModelDecoder::Baseline(BaselineDecoder::register(
                &mut store,
                cfg.dim,
                cfg.decoder_config(),
                seed,
            )),
        };
        let head = SegHead::register(&mut store, cfg.dim, seed);
        Ok(Model {
            cfg,
            store,
            pipeline,
            emb,
            decoder,
            head,
            dims,
        })
    }

    pub fn level_dims(&self) -> &[LevelDims] {
        &self.dims
    }

    /// Override the token keep ratio (benchmark sweeps). Only meaningful
    /// for the query-memory decoder; the baseline has no dropping layer.
    pub fn set_keep_ratio(&mut self, r: f32) -> Result<()> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidConfig(format!("keep ratio {r} outside (0, 1]")));
        }
        match &mut self.decoder {
            ModelDecoder::Ours(dec) => {
                dec.cfg.keep_ratio = r;
                self.cfg.keep_ratio = r;
                Ok(())
            }
            ModelDecoder::Baseline(_) => Err(Error::InvalidConfig(
                "the baseline decoder has no token drop to sweep".into(),
            )),
        }
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        let want = [self.cfg.t, 3, self.cfg.height, self.cfg.width];
        if frames.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                lhs: frames.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Decode a clip to finest-scale tokens. `forward_seed` pins the drop
    /// masks for this call.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        forward_seed: u64,
    ) -> Result<(PyramidLevel, DecodeTrace)> {
        self.check_frames(frames)?;
        let pyramid = self.pipeline.forward(g, &self.store, &self.emb, frames)?;
        match &self.decoder {
            ModelDecoder::Ours(dec) => dec.decode(g, &self.store, &self.emb, &pyramid, forward_seed),
            ModelDecoder::Baseline(dec) => {
                let out = dec.decode(g, &self.store, &self.emb, &pyramid)?;
                Ok((out, DecodeTrace::default()))
            }
        }
    }

    /// Per-frame logits at clip resolution (T, H, W).
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        forward_seed: u64,
    ) -> Result<NodeId> {
        let (finest, _) = self.forward_tokens(g, frames, forward_seed)?;
        self.head.segment(
            g,
            &self.store,
            finest.node,
            finest.dims,
            self.cfg.height,
            self.cfg.width,
        )
    }

    /// Inference: binary masks for one clip.
    pub fn predict(&self, frames: &Tensor, forward_seed: u64) -> Result<MaskClip> {
        let mut g = Graph::new();
        let logits = self.forward_logits(&mut g, frames, forward_seed)?;
        Ok(MaskClip::from_logits(g.detach(logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::rng::SplitMix64;

    pub fn toy_config(mode: DecodeMode) -> ModelConfig {
        ModelConfig {
            t: 2,
            height: 32,
            width: 32,
            dim: 24,
            queries: 3,
            heads: 2,
            r_rounds: 1,
            stage1_rounds: 1,
            enc_blocks: 1,
            keep_ratio: 1.0,
            drop_scales: DecoderConfig::default_drop_scales(LEVELS),
            mode,
        }
    }

    fn rand_frames(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n = cfg.t * 3 * cfg.height * cfg.width;
        Tensor::new(
            &[cfg.t, 3, cfg.height, cfg.width],
            (0..n).map(|_| rng.next_f32()).collect(),
        )
    }

    #[test]
    fn forward_produces_clip_sized_logits() {
        let cfg = toy_config(DecodeMode::Ours);
        let model = Model::new(cfg.clone(), 3).unwrap();
        let frames = rand_frames(&cfg, 1);
        let clip = model.predict(&frames, 7).unwrap();
        assert_eq!(clip.logits.shape(), &[2, 32, 32]);
        assert_eq!(clip.binary.shape(), &[2, 32, 32]);
    }

    #[test]
    fn baseline_shares_common_parameters_under_same_seed() {
        let ours = Model::new(toy_config(DecodeMode::Ours), 11).unwrap();
        let base = Model::new(toy_config(DecodeMode::Baseline), 11).unwrap();
        let mut shared = 0;
        for (_, name, tensor) in ours.store.iter() {
            if let Some(id) = base.store.id_by_name(name) {
                assert_eq!(
                    tensor.data(),
                    base.store.get(id).data(),
                    "{name} differs between modes"
                );
                shared += 1;
            }
        }
        // backbone, encoder, fpn, embeddings, query table, stage-1, head
        assert!(shared > 40, "only {shared} shared parameters");
        assert!(ours.store.id_by_name("dec.stage2.self.wq").is_some());
        assert!(base.store.id_by_name("dec.stage2.self.wq").is_none());
        assert!(base.store.id_by_name("dec.baseline.proj.weight").is_some());
    }

    #[test]
    fn rejects_bad_dims() {
        let mut cfg = toy_config(DecodeMode::Ours);
        cfg.dim = 26; // floor(26/3) = 8 even, but 26 % 4 != 0
        assert!(Model::new(cfg, 1).is_err());
        let mut cfg = toy_config(DecodeMode::Ours);
        cfg.heads = 5;
        assert!(Model::new(cfg, 1).is_err());
        let mut cfg = toy_config(DecodeMode::Ours);
        cfg.height = 48;
        assert!(Model::new(cfg, 1).is_err());
    }

    #[test]
    fn prediction_is_deterministic_given_seed() {
        let cfg = toy_config(DecodeMode::Ours);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let frames = rand_frames(&cfg, 2);
        let a = model.predict(&frames, 9).unwrap();
        let b = model.predict(&frames, 9).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn checkpoint_roundtrip_through_model() {
        let cfg = toy_config(DecodeMode::Ours);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let dir = std::env::temp_dir().join("msqm_model_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        crate::checkpoint::save(&model.store, &path).unwrap();

        let mut fresh = Model::new(cfg.clone(), 77).unwrap();
        crate::checkpoint::load_into(&mut fresh.store, &path).unwrap();
        let frames = rand_frames(&cfg, 3);
        let a = model.predict(&frames, 1).unwrap();
        let b = fresh.predict(&frames, 1).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn wrong_mode_checkpoint_is_rejected() {
        let ours = Model::new(toy_config(DecodeMode::Ours), 5).unwrap();
        let dir = std::env::temp_dir().join("msqm_model_ckpt2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ours.ckpt");
        crate::checkpoint::save(&ours.store, &path).unwrap();
        let mut base = Model::new(toy_config(DecodeMode::Baseline), 5).unwrap();
        assert!(crate::checkpoint::load_into(&mut base.store, &path).is_err());
    }
}
