//! Positional signals added to decoder inputs: learnable query positions,
//! learnable per-scale embeddings, and fixed sinusoidal spatiotemporal
//! embeddings.
//!
//! Scale indices are 0-based in code (0 = coarsest). Checkpoint names follow
//! the external convention and number scales from 1: `embed.scale.1` is the
//! coarsest table.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const EMBED_INIT_STD: f32 = 0.02;

/// Fixed sinusoidal embedding over (t, h, w) positions, flattened row-major
/// with w fastest. The channel budget is floor(D/3) per axis — sine/cosine
/// pairs at geometric frequencies with base 10000 — and any leftover
/// channels stay zero.
pub fn sinusoidal_st_embedding(t: usize, h: usize, w: usize, d: usize) -> Result<Tensor> {
    let per_axis = d / 3;
    if d < 6 || per_axis % 2 != 0 {
        return Err(Error::BadEmbeddingDim(d));
    }
    let pairs = per_axis / 2;
    // freq_j = 10000^(-2j / per_axis)
    let freqs: Vec<f64> = (0..pairs)
        .map(|j| 10000f64.powf(-2.0 * j as f64 / per_axis as f64))
        .collect();
    let rows = t * h * w;
    let mut data = vec![0.0f32; rows * d];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let row = ((ti * h) + hi) * w + wi;
                let base = row * d;
                for (axis, pos) in [(0usize, ti), (1, hi), (2, wi)] {
                    let off = base + axis * per_axis;
                    for (j, &f) in freqs.iter().enumerate() {
                        let angle = pos as f64 * f;
                        data[off + 2 * j] = angle.sin() as f32;
                        data[off + 2 * j + 1] = angle.cos() as f32;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[rows, d], data))
}

/// Per-level token dimensions of a feature pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelDims {
    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// The three positional tables. Query positions and per-scale embeddings are
/// trainable; the spatiotemporal tables are pure functions of the level
/// dimensions and receive no gradient.
pub struct Embeddings {
    pub query_pos: ParamId,
    scale: Vec<ParamId>,
    st: Vec<Tensor>,
    dims: Vec<LevelDims>,
}

impl Embeddings {
    pub fn register(
        store: &mut ParamStore,
        queries: usize,
        d: usize,
        dims: &[LevelDims],
        seed: u64,
    ) -> Result<Embeddings> {
        let query_pos = store.add(
            "embed.query_pos",
            normal_init(&[queries, d], seed, "embed.query_pos", EMBED_INIT_STD),
        );
        let mut scale = Vec::with_capacity(dims.len());
        let mut st = Vec::with_capacity(dims.len());
        for (l, ld) in dims.iter().enumerate() {
            let name = format!("embed.scale.{}", l + 1);
            scale.push(store.add(&name, normal_init(&[d], seed, &name, EMBED_INIT_STD)));
            st.push(sinusoidal_st_embedding(ld.t, ld.h, ld.w, d)?);
        }
        Ok(Embeddings {
            query_pos,
            scale,
            st,
            dims: dims.to_vec(),
        })
    }

    pub fn scale_count(&self) -> usize {
        self.scale.len()
    }

    pub fn level_dims(&self, l: usize) -> LevelDims {
        self.dims[l]
    }

    /// P^sc_l (broadcast over tokens) + P^st_l as a graph node of shape
    /// (T * H_l * W_l, D). Gradient reaches the scale table only.
    pub fn token_pos(&self, g: &mut Graph, store: &ParamStore, l: usize) -> Result<NodeId> {
        if l >= self.scale.len() {
            return Err(Error::UnknownScale {
                index: l,
                count: self.scale.len(),
            });
        }
        let st = g.constant(&self.st[l]);
        let sc = g.param(store, self.scale[l]);
        Ok(g.bias_add(st, sc))
    }
}

/// Zero-mean normal init with the given std, seeded per parameter name so
/// identical names initialize identically across model variants.
pub fn normal_init(shape: &[usize], seed: u64, name: &str, std: f32) -> Tensor {
    let mut rng = SplitMix64::new(derive_seed(seed, &[tag("init"), tag(name)]));
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal_f32() * std).collect())
}
