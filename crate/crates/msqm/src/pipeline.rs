//! From raw clip to fused multiscale tokens: a strided 3D-convolution
//! pyramid, per-scale reduction to the model width, a transformer encoder on
//! the coarsest scale, and top-down FPN fusion.
//!
//! Levels are indexed coarsest-first (level 0 has the smallest spatial
//! extent); spatial sizes per level are H/32, H/16, H/8, H/4.

use crate::attention::{attend, ffn, FfnParams, MultiHeadParams};
use crate::embeddings::{normal_init, Embeddings, LevelDims};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Scale count of the pyramid.
pub const LEVELS: usize = 4;

/// Backbone stage widths, finest stage first (stage i produces H / 4*2^i).
pub const BACKBONE_WIDTHS: [usize; LEVELS] = [32, 64, 128, 256];

const NORM_GROUPS: usize = 8;

/// T RGB frames with per-frame binary motion masks.
#[derive(Clone, Debug)]
pub struct ClipSample {
    /// (T, 3, H, W), values in [0, 1].
    pub frames: Tensor,
    /// (T, H, W), values in {0, 1}.
    pub masks: Tensor,
    pub clip_id: String,
}

impl ClipSample {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[2], s[3])
    }
}

/// One pyramid level as flattened tokens inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    /// (T * H_l * W_l, D) tokens.
    pub node: NodeId,
    pub dims: LevelDims,
}

/// Ordered levels, coarsest first. Spatial extents strictly increase.
#[derive(Clone, Debug, Default)]
pub struct PyramidNodes {
    pub levels: Vec<PyramidLevel>,
}

/// One backbone stage output in conv layout.
#[derive(Clone, Copy, Debug)]
pub struct SpatialLevel {
    /// (C_l, T, H_l, W_l).
    pub node: NodeId,
    pub dims: LevelDims,
    pub channels: usize,
}

/// Level dimensions for an input clip, coarsest first.
pub fn pyramid_dims(t: usize, height: usize, width: usize) -> Result<Vec<LevelDims>> {
    if height % 32 != 0 || width % 32 != 0 {
        return Err(Error::Indivisible { height, width });
    }
    Ok((0..LEVELS)
        .map(|l| {
            let div = 32 >> l;
            LevelDims {
                t,
                h: height / div,
                w: width / div,
            }
        })
        .collect())
}

struct StageParams {
    conv_w: ParamId,
    conv_b: ParamId,
    norm_g: ParamId,
    norm_b: ParamId,
    width: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

struct EncoderBlock {
    attn: MultiHeadParams,
    ffn: FfnParams,
}

struct FpnLevel {
    lateral_w: ParamId,
    lateral_b: ParamId,
    smooth_w: ParamId,
    smooth_b: ParamId,
    norm_g: ParamId,
    norm_b: ParamId,
}

pub struct FeaturePipeline {
    stages: Vec<StageParams>,
    /// 1x1x1 projections C_l -> D, coarsest first.
    reduce: Vec<(ParamId, ParamId)>,
    encoder: Vec<EncoderBlock>,
    fpn: Vec<FpnLevel>,
    dim: usize,
}

impl FeaturePipeline {
    pub fn register(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        enc_blocks: usize,
        seed: u64,
    ) -> FeaturePipeline {
        let mut stages = Vec::with_capacity(LEVELS);
        let mut in_ch = 3;
        for (i, &width) in BACKBONE_WIDTHS.iter().enumerate() {
            let (kernel, stride, pad) = if i == 0 {
                ([3, 5, 5], [1, 4, 4], [1, 2, 2])
            } else {
                ([3, 3, 3], [1, 2, 2], [1, 1, 1])
            };
            let wname = format!("backbone.stage{}.conv.weight", i + 1);
            let fan_in = (in_ch * kernel[0] * kernel[1] * kernel[2]) as f32;
            stages.push(StageParams {
                conv_w: store.add(
                    &wname,
                    normal_init(
                        &[width, in_ch, kernel[0], kernel[1], kernel[2]],
                        seed,
                        &wname,
                        1.0 / fan_in.sqrt(),
                    ),
                ),
                conv_b: store.add(
                    format!("backbone.stage{}.conv.bias", i + 1),
                    Tensor::zeros(&[width]),
                ),
                norm_g: store.add(
                    format!("backbone.stage{}.norm.gain", i + 1),
                    Tensor::full(&[width], 1.0),
                ),
                norm_b: store.add(
                    format!("backbone.stage{}.norm.bias", i + 1),
                    Tensor::zeros(&[width]),
                ),
                width,
                kernel,
                stride,
                pad,
            });
            in_ch = width;
        }

        // reduce projections, coarsest first: level l reads stage LEVELS-1-l
        let reduce = (0..LEVELS)
            .map(|l| {
                let ch = BACKBONE_WIDTHS[LEVELS - 1 - l];
                let wname = format!("backbone.reduce.{}.weight", l + 1);
                (
                    store.add(
                        &wname,
                        normal_init(&[dim, ch, 1, 1, 1], seed, &wname, 1.0 / (ch as f32).sqrt()),
                    ),
                    store.add(
                        format!("backbone.reduce.{}.bias", l + 1),
                        Tensor::zeros(&[dim]),
                    ),
                )
            })
            .collect();

        let encoder = (0..enc_blocks)
            .map(|i| EncoderBlock {
                attn: MultiHeadParams::register(
                    store,
                    &format!("encoder.block{i}.attn"),
                    dim,
                    heads,
                    seed,
                ),
                ffn: FfnParams::register(store, &format!("encoder.block{i}.ffn"), dim, seed),
            })
            .collect();

        let fpn = (0..LEVELS)
            .map(|l| {
                let lname = format!("fpn.lateral.{}.weight", l + 1);
                let sname = format!("fpn.smooth.{}.weight", l + 1);
                FpnLevel {
                    lateral_w: store.add(
                        &lname,
                        normal_init(&[dim, dim, 1, 1, 1], seed, &lname, 1.0 / (dim as f32).sqrt()),
                    ),
                    lateral_b: store.add(
                        format!("fpn.lateral.{}.bias", l + 1),
                        Tensor::zeros(&[dim]),
                    ),
                    smooth_w: store.add(
                        &sname,
                        normal_init(
                            &[dim, dim, 1, 3, 3],
                            seed,
                            &sname,
                            1.0 / (dim as f32 * 9.0).sqrt(),
                        ),
                    ),
                    smooth_b: store.add(
                        format!("fpn.smooth.{}.bias", l + 1),
                        Tensor::zeros(&[dim]),
                    ),
                    norm_g: store.add(format!("fpn.norm.{}.gain", l + 1), Tensor::full(&[dim], 1.0)),
                    norm_b: store.add(format!("fpn.norm.{}.bias", l + 1), Tensor::zeros(&[dim])),
                }
            })
            .collect();

        FeaturePipeline {
            stages,
            reduce,
            encoder,
            fpn,
            dim,
        }
    }

    /// Backbone pyramid from clip frames, coarsest level first.
    pub fn extract_pyramid(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
    ) -> Result<Vec<SpatialLevel>> {
        let shape = frames.shape();
        assert_eq!(shape.len(), 4, "frames must be (T, 3, H, W)");
        let dims = pyramid_dims(shape[0], shape[2], shape[3])?;
        let cthw = frames.swap_leading_axes();
        let mut x = g.constant(&cthw);
        let mut levels = Vec::with_capacity(LEVELS);
        for (i, stage) in self.stages.iter().enumerate() {
            let w = g.param(store, stage.conv_w);
            let b = g.param(store, stage.conv_b);
            let conv = g.conv3d(x, w, Some(b), stage.stride, stage.pad)?;
            let gn = g.param(store, stage.norm_g);
            let gb = g.param(store, stage.norm_b);
            let normed = g.group_norm(conv, gn, gb, NORM_GROUPS);
            x = g.gelu(normed);
            levels.push(SpatialLevel {
                node: x,
                dims: dims[LEVELS - 1 - i],
                channels: stage.width,
            });
        }
        levels.reverse();
        Ok(levels)
    }

    /// Project one backbone level to the model width and flatten to
    /// (T * H_l * W_l, D) tokens, (t, h, w) row-major.
    pub fn reduce_and_flatten(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: &SpatialLevel,
        l: usize,
    ) -> Result<PyramidLevel> {
        let (wid, bid) = self.reduce[l];
        let w = g.param(store, wid);
        let b = g.param(store, bid);
        let projected = g.conv3d(level.node, w, Some(b), [1, 1, 1], [0, 0, 0])?;
        let tokens = spatial_to_tokens(g, projected, level.dims, self.dim);
        Ok(PyramidLevel {
            node: tokens,
            dims: level.dims,
        })
    }

    /// Transformer encoder on the coarsest level, then top-down FPN fusion.
    /// Output shapes equal input shapes level-for-level.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embeddings,
        pyramid: &PyramidNodes,
    ) -> Result<PyramidNodes> {
        let mut enc = pyramid.levels[0].node;
        for block in &self.encoder {
            let pos = emb.token_pos(g, store, 0)?;
            let qk = g.add(enc, pos);
            let attended = attend(g, store, &block.attn, qk, qk, enc)?;
            enc = ffn(g, store, &block.ffn, attended)?;
        }

        let mut fused = Vec::with_capacity(pyramid.levels.len());
        let mut accum: Option<(NodeId, LevelDims)> = None;
        for (l, level) in pyramid.levels.iter().enumerate() {
            let tokens = if l == 0 { enc } else { level.node };
            let spatial = tokens_to_spatial(g, tokens, level.dims, self.dim);
            let p = &self.fpn[l];
            let lw = g.param(store, p.lateral_w);
            let lb = g.param(store, p.lateral_b);
            let lateral = g.conv3d(spatial, lw, Some(lb), [1, 1, 1], [0, 0, 0])?;
            let acc = match accum {
                None => lateral,
                Some((coarser, cdims)) => {
                    let up = upsample_tokens(g, coarser, cdims, level.dims, self.dim);
                    let up_spatial = tokens_to_spatial(g, up, level.dims, self.dim);
                    g.add(lateral, up_spatial)
                }
            };
            let sw = g.param(store, p.smooth_w);
            let sb = g.param(store, p.smooth_b);
            let smooth = g.conv3d(acc, sw, Some(sb), [1, 1, 1], [0, 1, 1])?;
            let smooth_tokens = spatial_to_tokens(g, smooth, level.dims, self.dim);
            let res = g.add(tokens, smooth_tokens);
            let ng = g.param(store, p.norm_g);
            let nb = g.param(store, p.norm_b);
            let out = g.layer_norm(res, ng, nb);
            fused.push(PyramidLevel {
                node: out,
                dims: level.dims,
            });
            let acc_tokens = spatial_to_tokens(g, acc, level.dims, self.dim);
            accum = Some((acc_tokens, level.dims));
        }
        Ok(PyramidNodes { levels: fused })
    }

    /// Full pipeline: backbone, reduction, encoder + FPN.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embeddings,
        frames: &Tensor,
    ) -> Result<PyramidNodes> {
        let spatial = self.extract_pyramid(g, store, frames)?;
        let mut levels = Vec::with_capacity(spatial.len());
        for (l, s) in spatial.iter().enumerate() {
            levels.push(self.reduce_and_flatten(g, store, s, l)?);
        }
        self.encode(g, store, emb, &PyramidNodes { levels })
    }
}

/// (C, T, H, W) -> (T*H*W, C) tokens.
pub fn spatial_to_tokens(g: &mut Graph, x: NodeId, dims: LevelDims, d: usize) -> NodeId {
    let flat = g.reshape(x, &[d, dims.tokens()]);
    g.transpose2d(flat)
}

/// (T*H*W, C) tokens -> (C, T, H, W).
pub fn tokens_to_spatial(g: &mut Graph, x: NodeId, dims: LevelDims, d: usize) -> NodeId {
    let t = g.transpose2d(x);
    g.reshape(t, &[d, dims.t, dims.h, dims.w])
}

/// Bilinear resample tokens from one level's spatial grid to another's.
pub fn upsample_tokens(
    g: &mut Graph,
    x: NodeId,
    from: LevelDims,
    to: LevelDims,
    d: usize,
) -> NodeId {
    debug_assert_eq!(from.t, to.t);
    let grid = g.reshape(x, &[from.t, from.h, from.w, d]);
    let up = g.bilinear_interp(grid, to.h, to.w);
    g.reshape(up, &[to.tokens(), d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::GradCheck;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal_f32()).collect())
    }

    fn build(dim: usize) -> (ParamStore, FeaturePipeline, Embeddings, Vec<LevelDims>) {
        let mut store = ParamStore::new();
        let pipe = FeaturePipeline::register(&mut store, dim, 2, 2, 11);
        let dims = pyramid_dims(2, 32, 32).unwrap();
        let emb = Embeddings::register(&mut store, 3, dim, &dims, 11).unwrap();
        (store, pipe, emb, dims)
    }

    #[test]
    fn pyramid_dims_chain() {
        let dims = pyramid_dims(5, 64, 64).unwrap();
        let spatial: Vec<(usize, usize)> = dims.iter().map(|d| (d.h, d.w)).collect();
        assert_eq!(spatial, vec![(2, 2), (4, 4), (8, 8), (16, 16)]);
        assert_eq!(dims.len(), LEVELS);
        assert!(dims.iter().all(|d| d.t == 5));
    }

    #[test]
    fn indivisible_input_rejected() {
        let err = pyramid_dims(5, 60, 64).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"));
    }

    #[test]
    fn extract_pyramid_shapes() {
        let (store, pipe, _, _) = build(12);
        let mut g = Graph::new();
        let frames = rand_tensor(&[2, 3, 32, 32], 1);
        let levels = pipe.extract_pyramid(&mut g, &store, &frames).unwrap();
        assert_eq!(levels.len(), LEVELS);
        // coarsest first, spatial extents strictly increasing
        let hs: Vec<usize> = levels.iter().map(|l| l.dims.h).collect();
        assert_eq!(hs, vec![1, 2, 4, 8]);
        for (l, level) in levels.iter().enumerate() {
            let want_ch = BACKBONE_WIDTHS[LEVELS - 1 - l];
            assert_eq!(
                g.shape(level.node),
                &[want_ch, 2, level.dims.h, level.dims.w]
            );
        }
    }

    #[test]
    fn reduce_flattens_row_major_w_fastest() {
        let (mut store, pipe, _, _) = build(12);
        // make the coarsest reduce projection pick out channel 0
        let wid = store.id_by_name("backbone.reduce.4.weight").unwrap();
        let w = store.get_mut(wid);
        let ch = BACKBONE_WIDTHS[0];
        let mut new = vec![0.0f32; 12 * ch];
        new[0] = 1.0; // output feature 0 = input channel 0
        w.data_mut().copy_from_slice(&new);

        let mut g = Graph::new();
        // finest level: 8x8 at dim 32 channels for 32x32 input
        let frames = rand_tensor(&[2, 3, 32, 32], 2);
        let levels = pipe.extract_pyramid(&mut g, &store, &frames).unwrap();
        let finest = levels[LEVELS - 1];
        let tokens = pipe
            .reduce_and_flatten(&mut g, &store, &finest, LEVELS - 1)
            .unwrap();
        assert_eq!(g.shape(tokens.node), &[2 * 8 * 8, 12]);
        // token at flat index 0 is (t=0, h=0, w=0); token 1 is (0, 0, 1)
        let spatial = g.data(finest.node);
        assert_eq!(g.data(tokens.node)[0], spatial[0]);
        assert_eq!(g.data(tokens.node)[12], spatial[1]);
    }

    #[test]
    fn encode_preserves_shapes() {
        let (store, pipe, emb, dims) = build(12);
        let mut g = Graph::new();
        let levels: Vec<PyramidLevel> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| PyramidLevel {
                node: g.leaf(&rand_tensor(&[d.tokens(), 12], 20 + i as u64)),
                dims: d,
            })
            .collect();
        let fused = pipe
            .encode(&mut g, &store, &emb, &PyramidNodes { levels: levels.clone() })
            .unwrap();
        assert_eq!(fused.levels.len(), LEVELS);
        for (a, b) in fused.levels.iter().zip(&levels) {
            assert_eq!(g.shape(a.node), g.shape(b.node));
        }
    }

    #[test]
    fn zeroed_encoder_and_lateral_reduce_finest_to_norm_path() {
        let (mut store, pipe, emb, dims) = build(12);
        // zero every encoder projection and the FPN lateral paths
        let names: Vec<String> = store
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| {
                (n.starts_with("encoder.") && (n.contains(".w") || n.contains(".b")))
                    || n.starts_with("fpn.lateral.")
            })
            .collect();
        for n in names {
            let id = store.id_by_name(&n).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // keep layer-norm gains at one
        for l in 0..LEVELS {
            let gid = store.id_by_name(&format!("fpn.norm.{}.gain", l + 1)).unwrap();
            store.get_mut(gid).data_mut().iter_mut().for_each(|v| *v = 1.0);
        }

        let mut g = Graph::new();
        let levels: Vec<PyramidLevel> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| PyramidLevel {
                node: g.leaf(&rand_tensor(&[d.tokens(), 12], 30 + i as u64)),
                dims: d,
            })
            .collect();
        let finest_in = levels[LEVELS - 1].node;
        let fused = pipe
            .encode(&mut g, &store, &emb, &PyramidNodes { levels })
            .unwrap();
        // finest fused level collapses to layer_norm of its own tokens
        let gain = g.leaf(&Tensor::full(&[12], 1.0));
        let bias = g.leaf(&Tensor::zeros(&[12]));
        let want = g.layer_norm(finest_in, gain, bias);
        for (a, b) in g.data(fused.levels[LEVELS - 1].node).iter().zip(g.data(want)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn coarsest_perturbation_reaches_every_level() {
        let (store, pipe, emb, dims) = build(12);
        let base: Vec<Tensor> = dims
            .iter()
            .enumerate()
            .map(|(i, d)| rand_tensor(&[d.tokens(), 12], 40 + i as u64))
            .collect();

        let run = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let levels: Vec<PyramidLevel> = inputs
                .iter()
                .zip(&dims)
                .map(|(t, &d)| PyramidLevel {
                    node: g.leaf(t),
                    dims: d,
                })
                .collect();
            let fused = pipe
                .encode(&mut g, &store, &emb, &PyramidNodes { levels })
                .unwrap();
            fused
                .levels
                .iter()
                .map(|l| g.data(l.node).to_vec())
                .collect::<Vec<_>>()
        };

        let unperturbed = run(&base);
        let mut poked = base.clone();
        poked[0].data_mut()[5] += 1.0;
        let perturbed = run(&poked);
        for (l, (a, b)) in unperturbed.iter().zip(&perturbed).enumerate() {
            assert!(
                a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-7),
                "level {l} unaffected by coarsest perturbation"
            );
        }
    }

    #[test]
    fn reduce_projection_gradient_check() {
        let (store, pipe, _, _) = build(12);
        // finest level carries the narrowest stage width
        let finest = LEVELS - 1;
        let dims = LevelDims { t: 2, h: 2, w: 2 };
        let xt = rand_tensor(&[BACKBONE_WIDTHS[0], 2, 2, 2], 50);
        let probe = rand_tensor(&[dims.tokens(), 12], 51);

        let eval = |xs: &[f32]| {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::new(xt.shape(), xs.to_vec()));
            let level = SpatialLevel {
                node: x,
                dims,
                channels: BACKBONE_WIDTHS[0],
            };
            let tokens = pipe
                .reduce_and_flatten(&mut g, &store, &level, finest)
                .unwrap();
            let w = g.leaf(&probe);
            let prod = g.mul(tokens.node, w);
            let loss = g.sum_all(prod);
            g.scalar_f64(loss)
        };

        let mut g = Graph::new();
        let x = g.leaf(&xt.clone().with_grad());
        let level = SpatialLevel {
            node: x,
            dims,
            channels: BACKBONE_WIDTHS[0],
        };
        let tokens = pipe
            .reduce_and_flatten(&mut g, &store, &level, finest)
            .unwrap();
        let w = g.leaf(&probe);
        let prod = g.mul(tokens.node, w);
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let err = GradCheck::default().run(eval, xt.data(), &analytic);
        assert!(err <= 1e-3, "reduce projection gradient error {err}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (store, pipe, emb, _) = build(12);
        let frames = rand_tensor(&[2, 3, 32, 32], 60);
        let run = || {
            let mut g = Graph::new();
            let out = pipe.forward(&mut g, &store, &emb, &frames).unwrap();
            out.levels
                .iter()
                .map(|l| g.data(l.node).to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_counts_match_level_dims() {
        let (store, pipe, emb, dims) = build(12);
        let mut g = Graph::new();
        let frames = rand_tensor(&[2, 3, 32, 32], 61);
        let out = pipe.forward(&mut g, &store, &emb, &frames).unwrap();
        for (level, d) in out.levels.iter().zip(&dims) {
            assert_eq!(g.shape(level.node), &[d.tokens(), 12]);
        }
    }
}
