//! The two-stage multiscale query-memory decoder and the conventional
//! multiscale-query baseline.
//!
//! Stage 1 compresses the scene into N learned queries by sweeping the
//! pyramid coarse-to-fine: at every scale the queries self-attend, then
//! cross-attend with Q = queries + P, K = tokens + scale/spatiotemporal
//! positions, V = tokens. Stage 2 inverts the direction: dense tokens act as
//! queries against a shared N-entry memory bank initialized from the final
//! Stage-1 queries, so every level keeps its full (T * H_l * W_l) resolution.
//! Each decoded level is mixed into the next finer one by bilinear
//! upsampling, and the whole sweep repeats `r_rounds` times.
//!
//! Token drop: at the finest two scales the Stage-2 self-attention runs on a
//! random subset of rows (keep ratio r); dropped rows pass through unchanged
//! and everything participates in the cross-attention. The mask seed is
//! `derive_seed(forward_seed, &[tag("drop"), layer, scale, round])` with
//! `layer` fixed at 0 (one dropping site per scale per sweep).

use crate::attention::{attend, ffn, self_attend_with_drop, DropMask, FfnParams, MultiHeadParams};
use crate::embeddings::{normal_init, Embeddings, LevelDims, EMBED_INIT_STD};
use crate::error::Result;
use crate::rng::{derive_seed, tag};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

use crate::pipeline::{upsample_tokens, PyramidLevel, PyramidNodes};

/// Decoder shape and schedule. Scale indices in `drop_scales` are 0-based,
/// coarsest first.
#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub queries: usize,
    pub heads: usize,
    /// Stage-2 coarse-to-fine sweeps.
    pub r_rounds: usize,
    /// Stage-1 sweeps over the pyramid.
    pub stage1_rounds: usize,
    pub keep_ratio: f32,
    pub drop_scales: Vec<usize>,
}

impl DecoderConfig {
    /// Finest two of `levels` scales drop tokens, matching the reference
    /// schedule.
    pub fn default_drop_scales(levels: usize) -> Vec<usize> {
        if levels >= 2 {
            vec![levels - 2, levels - 1]
        } else {
            vec![levels - 1]
        }
    }
}

struct DecodeBlock {
    self_attn: MultiHeadParams,
    cross: MultiHeadParams,
    ffn: FfnParams,
}

impl DecodeBlock {
    fn register(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, seed: u64) -> Self {
        DecodeBlock {
            self_attn: MultiHeadParams::register(store, &format!("{prefix}.self"), dim, heads, seed),
            cross: MultiHeadParams::register(store, &format!("{prefix}.cross"), dim, heads, seed),
            ffn: FfnParams::register(store, &format!("{prefix}.ffn"), dim, seed),
        }
    }
}

/// Per-sweep record of what the token drop did.
#[derive(Clone, Debug, Default)]
pub struct DecodeTrace {
    /// masks[round][scale] is Some for dropping scales.
    pub masks: Vec<Vec<Option<DropMask>>>,
}

pub struct Stage2Out {
    /// Decoded levels O_l, dims identical to the input pyramid.
    pub levels: Vec<PyramidLevel>,
    pub masks: Vec<Option<DropMask>>,
}

/// Query-memory decoder ("ours").
pub struct QmDecoder {
    pub query_table: ParamId,
    stage1: DecodeBlock,
    stage2: DecodeBlock,
    pub cfg: DecoderConfig,
}

impl QmDecoder {
    pub fn register(store: &mut ParamStore, dim: usize, cfg: DecoderConfig, seed: u64) -> QmDecoder {
        QmDecoder {
            query_table: register_query_table(store, cfg.queries, dim, seed),
            stage1: DecodeBlock::register(store, "dec.stage1", dim, cfg.heads, seed),
            stage2: DecodeBlock::register(store, "dec.stage2", dim, cfg.heads, seed),
            cfg,
        }
    }

    /// Stage 1: multiscale query decoding. Returns the scale-L queries
    /// (N, D).
    pub fn stage1_query_decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embeddings,
        pyramid: &PyramidNodes,
    ) -> Result<NodeId> {
        query_decode_sweeps(
            g,
            store,
            emb,
            &self.stage1,
            self.query_table,
            pyramid,
            self.cfg.stage1_rounds,
        )
    }

    /// Stage 2: one coarse-to-fine memory-decoding sweep. The memory bank is
    /// read-only; decoded levels retain their token counts, and each level's
    /// output is mixed into the next finer input.
    pub fn stage2_memory_decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embeddings,
        pyramid: &PyramidNodes,
        memory: NodeId,
        round: usize,
        forward_seed: u64,
    ) -> Result<Stage2Out> {
        let levels = pyramid.levels.len();
        let mut inputs: Vec<NodeId> = pyramid.levels.iter().map(|l| l.node).collect();
        let mut out_levels = Vec::with_capacity(levels);
        let mut out_masks = Vec::with_capacity(levels);
        for l in 0..levels {
            let dims = pyramid.levels[l].dims;
            let x = inputs[l];
            let (x, mask) = if self.cfg.drop_scales.contains(&l) {
                let seed = derive_seed(forward_seed, &[tag("drop"), 0, l as u64, round as u64]);
                let (node, mask) =
                    self_attend_with_drop(g, store, &self.stage2.self_attn, x, self.cfg.keep_ratio, seed)?;
                (node, Some(mask))
            } else {
                (attend(g, store, &self.stage2.self_attn, x, x, x)?, None)
            };
            let pos = emb.token_pos(g, store, l)?;
            let q = g.add(x, pos);
            let p = g.param(store, emb.query_pos);
            let k = g.add(memory, p);
            let attended = attend(g, store, &self.stage2.cross, q, k, memory)?;
            let decoded = ffn(g, store, &self.stage2.ffn, attended)?;
            out_levels.push(PyramidLevel {
                node: decoded,
                dims,
            });
            out_masks.push(mask);
            if l + 1 < levels {
                let next_dims = pyramid.levels[l + 1].dims;
                inputs[l + 1] = mix_into_next(g, decoded, dims, inputs[l + 1], next_dims);
            }
        }
        Ok(Stage2Out {
            levels: out_levels,
            masks: out_masks,
        })
    }

    /// Full decode: Stage 1 once, memory initialized from its output, then
    /// `r_rounds` Stage-2 sweeps carrying the mixed pyramid forward. Returns
    /// the final finest-scale tokens.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embeddings,
        pyramid: &PyramidNodes,
        forward_seed: u64,
    ) -> Result<(PyramidLevel, DecodeTrace)> {
        let memory = self.stage1_query_decode(g, store, emb, pyramid)?;
        let mut trace = DecodeTrace::default();
        let mut current = pyramid.clone();
        for round in 0..self.cfg.r_rounds {
            let out = self.stage2_memory_decode(g, store, emb, &current, memory, round, forward_seed)?;
            trace.masks.push(out.masks);
            current = PyramidNodes { levels: out.levels };
        }
        let finest = *current.levels.last().expect("non-empty pyramid");
        Ok((finest, trace))
    }
}

/// Additive cross-scale mixing: upsample a decoded level to the next finer
/// grid and add it to that level's tokens.
pub fn mix_into_next(
    g: &mut Graph,
    decoded: NodeId,
    from: LevelDims,
    next: NodeId,
    to: LevelDims,
) -> NodeId {
    let d = g.shape(decoded)[1];
    let up = upsample_tokens(g, decoded, from, to, d);
    g.add(next, up)
}

/// Conventional multiscale-query baseline. Shares the backbone, encoder,
/// embeddings and head with the query-memory model; its decoder runs query
/// decoding only and modulates the finest level with per-query similarity
/// scores.
pub struct BaselineDecoder {
    pub query_table: ParamId,
    stage1: DecodeBlock,
    proj_w: ParamId,
    proj_b: ParamId,
    pub cfg: DecoderConfig,
}

impl BaselineDecoder {
    pub fn register(
        store: &mut ParamStore,
        dim: usize,
        cfg: DecoderConfig,
        seed: u64,
    ) -> BaselineDecoder {
        let query_table = register_query_table(store, cfg.queries, dim, seed);
        let stage1 = DecodeBlock::register(store, "dec.stage1", dim, cfg.heads, seed);
        let wname = "dec.baseline.proj.weight";
        BaselineDecoder {
            query_table,
            stage1,
            proj_w: store.add(
                wname,
                normal_init(&[dim + 1, dim], seed, wname, 1.0 / ((dim + 1) as f32).sqrt()),
            ),
            proj_b: store.add("dec.baseline.proj.bias", Tensor::zeros(&[dim])),
            cfg,
        }
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &Embeddings,
        pyramid: &PyramidNodes,
    ) -> Result<PyramidLevel> {
        let queries = query_decode_sweeps(
            g,
            store,
            emb,
            &self.stage1,
            self.query_table,
            pyramid,
            self.cfg.r_rounds,
        )?;
        let finest = *pyramid.levels.last().expect("non-empty pyramid");
        let modulated = self.modulate(g, store, finest.node, queries)?;
        Ok(PyramidLevel {
            node: modulated,
            dims: finest.dims,
        })
    }

    /// Append the max query-similarity score `max_i <x, q_i> / sqrt(D)` to
    /// every token and project back to D.
    pub fn modulate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: NodeId,
        queries: NodeId,
    ) -> Result<NodeId> {
        let d = g.shape(tokens)[1];
        let qt = g.transpose2d(queries);
        let scores = g.matmul(tokens, qt)?;
        let scaled = g.scale(scores, 1.0 / (d as f32).sqrt());
        let maxed = g.max_last(scaled);
        let cat = g.concat_last(tokens, maxed);
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        g.linear(cat, w, b)
    }
}

fn register_query_table(store: &mut ParamStore, queries: usize, dim: usize, seed: u64) -> ParamId {
    store.add(
        "dec.query_table",
        normal_init(&[queries, dim], seed, "dec.query_table", EMBED_INIT_STD),
    )
}

/// Shared query-decoding loop: `rounds` coarse-to-fine sweeps where queries
/// self-attend, cross-attend into each scale, and pass through the FFN.
fn query_decode_sweeps(
    g: &mut Graph,
    store: &ParamStore,
    emb: &Embeddings,
    block: &DecodeBlock,
    query_table: ParamId,
    pyramid: &PyramidNodes,
    rounds: usize,
) -> Result<NodeId> {
    let mut q = g.param(store, query_table);
    for _ in 0..rounds {
        for (l, level) in pyramid.levels.iter().enumerate() {
            q = attend(g, store, &block.self_attn, q, q, q)?;
            let p = g.param(store, emb.query_pos);
            let qpos = g.add(q, p);
            let pos = emb.token_pos(g, store, l)?;
            let kpos = g.add(level.node, pos);
            q = attend(g, store, &block.cross, qpos, kpos, level.node)?;
            q = ffn(g, store, &block.ffn, q)?;
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::pyramid_dims;
    use crate::rng::SplitMix64;

    const DIM: usize = 12;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal_f32()).collect())
    }

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            queries: 3,
            heads: 2,
            r_rounds: 2,
            stage1_rounds: 1,
            keep_ratio: 0.5,
            drop_scales: DecoderConfig::default_drop_scales(4),
        }
    }

    fn build(c: DecoderConfig) -> (ParamStore, QmDecoder, Embeddings, Vec<LevelDims>) {
        let mut store = ParamStore::new();
        let dims = pyramid_dims(2, 32, 32).unwrap();
        let emb = Embeddings::register(&mut store, c.queries, DIM, &dims, 3).unwrap();
        let dec = QmDecoder::register(&mut store, DIM, c, 3);
        (store, dec, emb, dims)
    }

    fn pyramid(g: &mut Graph, dims: &[LevelDims], seed: u64) -> PyramidNodes {
        PyramidNodes {
            levels: dims
                .iter()
                .enumerate()
                .map(|(i, &d)| PyramidLevel {
                    node: g.leaf(&rand_tensor(&[d.tokens(), DIM], seed + i as u64)),
                    dims: d,
                })
                .collect(),
        }
    }

    #[test]
    fn stage1_output_is_n_by_d() {
        let (store, dec, emb, dims) = build(cfg());
        let mut g = Graph::new();
        let pyr = pyramid(&mut g, &dims, 100);
        let q = dec.stage1_query_decode(&mut g, &store, &emb, &pyr).unwrap();
        assert_eq!(g.shape(q), &[3, DIM]);
    }

    #[test]
    fn stage1_zeroed_projections_leave_norm_path_of_q0() {
        let (mut store, dec, emb, dims) = build(cfg());
        // zero all output projections, ffn weights and positional tables
        let names: Vec<String> = store
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| {
                n.starts_with("dec.stage1.") && (n.ends_with(".wo") || n.ends_with(".bo")
                    || n.ends_with(".w2") || n.ends_with(".b2"))
                    || n == "embed.query_pos"
                    || n.starts_with("embed.scale.")
            })
            .collect();
        for n in names {
            let id = store.id_by_name(&n).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let pyr = pyramid(&mut g, &dims, 200);
        let q = dec.stage1_query_decode(&mut g, &store, &emb, &pyr).unwrap();

        // expected: q0 through the residual-only normalization chain
        // (self LN, cross LN, ffn LN) x levels
        let q0 = store.get(dec.query_table).clone();
        let mut expect = g.leaf(&q0);
        let gain = g.leaf(&Tensor::full(&[DIM], 1.0));
        let bias = g.leaf(&Tensor::zeros(&[DIM]));
        for _ in 0..dims.len() {
            for _ in 0..3 {
                expect = g.layer_norm(expect, gain, bias);
            }
        }
        assert_eq!(g.data(q), g.data(expect));
    }

    #[test]
    fn stage2_levels_retain_token_counts() {
        let (store, dec, emb, dims) = build(cfg());
        let mut g = Graph::new();
        let pyr = pyramid(&mut g, &dims, 300);
        let memory = g.leaf(&rand_tensor(&[3, DIM], 301));
        let out = dec
            .stage2_memory_decode(&mut g, &store, &emb, &pyr, memory, 0, 77)
            .unwrap();
        assert_eq!(out.levels.len(), dims.len());
        for (level, d) in out.levels.iter().zip(&dims) {
            assert_eq!(g.shape(level.node), &[d.tokens(), DIM]);
        }
        // memory itself never changes shape
        assert_eq!(g.shape(memory), &[3, DIM]);
    }

    #[test]
    fn drop_happens_only_at_finest_two_scales() {
        let (store, dec, emb, dims) = build(cfg());
        let mut g = Graph::new();
        let pyr = pyramid(&mut g, &dims, 400);
        let memory = g.leaf(&rand_tensor(&[3, DIM], 401));
        let out = dec
            .stage2_memory_decode(&mut g, &store, &emb, &pyr, memory, 0, 78)
            .unwrap();
        assert!(out.masks[0].is_none());
        assert!(out.masks[1].is_none());
        for l in [2usize, 3] {
            let mask = out.masks[l].as_ref().expect("drop at finest two scales");
            let n = dims[l].tokens();
            let want = ((0.5f64 * n as f64).round() as usize).max(1);
            assert_eq!(mask.kept_count(), want);
        }
    }

    #[test]
    fn mixing_zero_leaves_next_scale_unchanged() {
        let dims = pyramid_dims(2, 32, 32).unwrap();
        let mut g = Graph::new();
        let zero = g.leaf(&Tensor::zeros(&[dims[0].tokens(), DIM]));
        let next_t = rand_tensor(&[dims[1].tokens(), DIM], 500);
        let next = g.leaf(&next_t);
        let mixed = mix_into_next(&mut g, zero, dims[0], next, dims[1]);
        assert_eq!(g.data(mixed), next_t.data());
    }

    #[test]
    fn one_round_equals_single_stage2_call() {
        let mut c = cfg();
        c.r_rounds = 1;
        let (store, dec, emb, dims) = build(c);
        let seed = 55u64;

        let mut g1 = Graph::new();
        let pyr1 = pyramid(&mut g1, &dims, 600);
        let (out1, _) = dec.decode(&mut g1, &store, &emb, &pyr1, seed).unwrap();

        let mut g2 = Graph::new();
        let pyr2 = pyramid(&mut g2, &dims, 600);
        let memory = dec.stage1_query_decode(&mut g2, &store, &emb, &pyr2).unwrap();
        let stage2 = dec
            .stage2_memory_decode(&mut g2, &store, &emb, &pyr2, memory, 0, seed)
            .unwrap();

        assert_eq!(g1.data(out1.node), g2.data(stage2.levels.last().unwrap().node));
    }

    #[test]
    fn doubling_rounds_changes_output() {
        let (store, dec1, emb, dims) = build(DecoderConfig { r_rounds: 1, ..cfg() });
        let run = |dec: &QmDecoder| {
            let mut g = Graph::new();
            let pyr = pyramid(&mut g, &dims, 700);
            let (out, _) = dec.decode(&mut g, &store, &emb, &pyr, 9).unwrap();
            g.data(out.node).to_vec()
        };
        let one = run(&dec1);
        let dec2 = QmDecoder {
            query_table: dec1.query_table,
            stage1: DecodeBlock {
                self_attn: clone_params(&dec1.stage1.self_attn),
                cross: clone_params(&dec1.stage1.cross),
                ffn: clone_ffn(&dec1.stage1.ffn),
            },
            stage2: DecodeBlock {
                self_attn: clone_params(&dec1.stage2.self_attn),
                cross: clone_params(&dec1.stage2.cross),
                ffn: clone_ffn(&dec1.stage2.ffn),
            },
            cfg: DecoderConfig { r_rounds: 2, ..cfg() },
        };
        let two = run(&dec2);
        assert_ne!(one, two, "refinement must not be idempotent");
    }

    fn clone_params(p: &MultiHeadParams) -> MultiHeadParams {
        MultiHeadParams {
            wq: p.wq,
            bq: p.bq,
            wk: p.wk,
            bk: p.bk,
            wv: p.wv,
            bv: p.bv,
            wo: p.wo,
            bo: p.bo,
            ln_gain: p.ln_gain,
            ln_bias: p.ln_bias,
            heads: p.heads,
            dim: p.dim,
        }
    }

    fn clone_ffn(p: &FfnParams) -> FfnParams {
        FfnParams {
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
            ln_gain: p.ln_gain,
            ln_bias: p.ln_bias,
        }
    }

    #[test]
    fn full_ratio_is_invariant_to_drop_seed() {
        let mut c = cfg();
        c.keep_ratio = 1.0;
        let (store, dec, emb, dims) = build(c);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let pyr = pyramid(&mut g, &dims, 800);
            let (out, _) = dec.decode(&mut g, &store, &emb, &pyr, seed).unwrap();
            g.data(out.node).to_vec()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn decode_is_deterministic() {
        let (store, dec, emb, dims) = build(cfg());
        let run = || {
            let mut g = Graph::new();
            let pyr = pyramid(&mut g, &dims, 900);
            let (out, trace) = dec.decode(&mut g, &store, &emb, &pyr, 42).unwrap();
            (g.data(out.node).to_vec(), trace.masks)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(
            ta.iter().flatten().flatten().map(|m| &m.kept_indices).collect::<Vec<_>>(),
            tb.iter().flatten().flatten().map(|m| &m.kept_indices).collect::<Vec<_>>()
        );
    }

    #[test]
    fn baseline_keeps_head_contract() {
        let mut store = ParamStore::new();
        let dims = pyramid_dims(2, 32, 32).unwrap();
        let emb = Embeddings::register(&mut store, 3, DIM, &dims, 3).unwrap();
        let dec = BaselineDecoder::register(&mut store, DIM, cfg(), 3);
        let mut g = Graph::new();
        let pyr = pyramid(&mut g, &dims, 1000);
        let out = dec.decode(&mut g, &store, &emb, &pyr).unwrap();
        assert_eq!(g.shape(out.node), &[dims[3].tokens(), DIM]);
    }

    #[test]
    fn baseline_max_score_is_self_similarity() {
        let mut store = ParamStore::new();
        let dims = pyramid_dims(2, 32, 32).unwrap();
        let emb = Embeddings::register(&mut store, 3, DIM, &dims, 3).unwrap();
        let dec = BaselineDecoder::register(&mut store, DIM, cfg(), 3);
        // orthogonal queries: scaled basis vectors
        let mut qdata = vec![0.0f32; 3 * DIM];
        for i in 0..3 {
            qdata[i * DIM + i] = (i + 1) as f32;
        }
        // token = sqrt(D) * q_1
        let mut token = vec![0.0f32; DIM];
        token[1] = (DIM as f32).sqrt() * 2.0;

        let mut g = Graph::new();
        let queries = g.leaf(&Tensor::new(&[3, DIM], qdata));
        let tokens = g.leaf(&Tensor::new(&[1, DIM], token));
        // probe the scores directly, before projection
        let qt = g.transpose2d(queries);
        let scores = g.matmul(tokens, qt).unwrap();
        let scaled = g.scale(scores, 1.0 / (DIM as f32).sqrt());
        let maxed = g.max_last(scaled);
        // self-similarity of q_1 is |q_1|^2 = 4
        assert!((g.scalar(maxed) - 4.0).abs() < 1e-5);
        // and the modulated output keeps the head contract
        let out = dec.modulate(&mut g, &store, tokens, queries).unwrap();
        assert_eq!(g.shape(out), &[1, DIM]);
        let _ = emb;
    }
}
