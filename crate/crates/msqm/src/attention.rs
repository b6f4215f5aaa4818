//! Multi-head attention, the post-norm transformer block pieces, and the
//! scale-specific random token drop.
//!
//! Drop masks are sampled from an explicitly passed seed, never a global RNG.
//! Callers derive that seed as
//! `derive_seed(run_seed, &[tag("drop"), layer, scale, step])`
//! (see [`crate::decoder`]), so any mask is reproducible from the run seed
//! and its schedule position.

use crate::embeddings::normal_init;
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Projection and normalization parameters of one attention operation.
pub struct MultiHeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> MultiHeadParams {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let std = 1.0 / (dim as f32).sqrt();
        let mat = |store: &mut ParamStore, suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            store.add(&name, normal_init(&[dim, dim], seed, &name, std))
        };
        let vecp = |store: &mut ParamStore, suffix: &str, fill: f32| {
            store.add(format!("{prefix}.{suffix}"), Tensor::full(&[dim], fill))
        };
        MultiHeadParams {
            wq: mat(store, "wq"),
            bq: vecp(store, "bq", 0.0),
            wk: mat(store, "wk"),
            bk: vecp(store, "bk", 0.0),
            wv: mat(store, "wv"),
            bv: vecp(store, "bv", 0.0),
            wo: mat(store, "wo"),
            bo: vecp(store, "bo", 0.0),
            ln_gain: vecp(store, "ln_g", 1.0),
            ln_bias: vecp(store, "ln_b", 0.0),
            heads,
            dim,
        }
    }
}

/// Intermediate views of one attention call, for tests and probes.
pub struct AttendOut {
    /// Final block output: layer_norm(Q + projected context).
    pub out: NodeId,
    /// Context before residual and normalization.
    pub core: NodeId,
    /// Per-head softmax weight matrices, each (n_q, n_k).
    pub weights: Vec<NodeId>,
}

/// Scaled dot-product attention with `heads` heads, output projection,
/// residual add from Q and post-norm.
pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    p: &MultiHeadParams,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    Ok(attend_parts(g, store, p, q, k, v)?.out)
}

pub fn attend_parts(
    g: &mut Graph,
    store: &ParamStore,
    p: &MultiHeadParams,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<AttendOut> {
    let head_dim = p.dim / p.heads;
    let scale = 1.0 / (head_dim as f32).sqrt();

    let (wq, bq) = (g.param(store, p.wq), g.param(store, p.bq));
    let (wk, bk) = (g.param(store, p.wk), g.param(store, p.bk));
    let (wv, bv) = (g.param(store, p.wv), g.param(store, p.bv));
    let (wo, bo) = (g.param(store, p.wo), g.param(store, p.bo));

    let qp = g.linear(q, wq, bq)?;
    let kp = g.linear(k, wk, bk)?;
    let vp = g.linear(v, wv, bv)?;

    let mut weights = Vec::with_capacity(p.heads);
    let mut context = None;
    for h in 0..p.heads {
        let qh = g.slice_last(qp, h * head_dim, head_dim);
        let kh = g.slice_last(kp, h * head_dim, head_dim);
        let vh = g.slice_last(vp, h * head_dim, head_dim);
        let kt = g.transpose2d(kh);
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_last(scaled);
        weights.push(attn);
        let ctx = g.matmul(attn, vh)?;
        context = Some(match context {
            None => ctx,
            Some(acc) => g.concat_last(acc, ctx),
        });
    }
    let context = context.expect("at least one head");
    let core = g.linear(context, wo, bo)?;
    let res = g.add(q, core);
    let (ln_g, ln_b) = (g.param(store, p.ln_gain), g.param(store, p.ln_bias));
    let out = g.layer_norm(res, ln_g, ln_b);
    Ok(AttendOut { out, core, weights })
}

/// Feed-forward half of a transformer block: D -> 4D -> D with GELU,
/// residual, post-norm.
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl FfnParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, seed: u64) -> FfnParams {
        let hidden = 4 * dim;
        let n1 = format!("{prefix}.w1");
        let n2 = format!("{prefix}.w2");
        FfnParams {
            w1: store.add(&n1, normal_init(&[dim, hidden], seed, &n1, 1.0 / (dim as f32).sqrt())),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(&n2, normal_init(&[hidden, dim], seed, &n2, 1.0 / (hidden as f32).sqrt())),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
            ln_gain: store.add(format!("{prefix}.ln_g"), Tensor::full(&[dim], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln_b"), Tensor::zeros(&[dim])),
        }
    }
}

pub fn ffn(g: &mut Graph, store: &ParamStore, p: &FfnParams, x: NodeId) -> Result<NodeId> {
    let (w1, b1) = (g.param(store, p.w1), g.param(store, p.b1));
    let (w2, b2) = (g.param(store, p.w2), g.param(store, p.b2));
    let h = g.linear(x, w1, b1)?;
    let a = g.gelu(h);
    let o = g.linear(a, w2, b2)?;
    let res = g.add(x, o);
    let (ln_g, ln_b) = (g.param(store, p.ln_gain), g.param(store, p.ln_bias));
    Ok(g.layer_norm(res, ln_g, ln_b))
}

/// Which token rows survive a drop at keep ratio r.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    /// Strictly increasing row indices.
    pub kept_indices: Vec<usize>,
    pub keep_ratio: f32,
    pub seed: u64,
}

impl DropMask {
    /// Keeps `max(1, round(r * n))` rows, sampled without replacement.
    pub fn sample(n_tokens: usize, keep_ratio: f32, seed: u64) -> DropMask {
        assert!(
            keep_ratio > 0.0 && keep_ratio <= 1.0,
            "keep ratio must be in (0, 1], got {keep_ratio}"
        );
        let kept = ((keep_ratio as f64 * n_tokens as f64).round() as usize).clamp(1, n_tokens);
        let kept_indices = SplitMix64::new(seed).sample_indices(n_tokens, kept);
        DropMask {
            kept_indices,
            keep_ratio,
            seed,
        }
    }

    pub fn kept_count(&self) -> usize {
        self.kept_indices.len()
    }
}

/// Self-attention restricted to a random subset of rows. Kept rows are
/// replaced by their attended values; dropped rows pass through unchanged,
/// preserving count and order for the cross-attention that follows.
pub fn self_attend_with_drop(
    g: &mut Graph,
    store: &ParamStore,
    p: &MultiHeadParams,
    x: NodeId,
    keep_ratio: f32,
    seed: u64,
) -> Result<(NodeId, DropMask)> {
    let n = g.shape(x)[0];
    let mask = DropMask::sample(n, keep_ratio, seed);
    let kept = g.gather_rows(x, &mask.kept_indices);
    let updated = attend(g, store, p, kept, kept, kept)?;
    let out = g.scatter_rows(x, updated, &mask.kept_indices);
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheck;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal_f32()).collect())
    }

    fn setup(dim: usize, heads: usize) -> (ParamStore, MultiHeadParams) {
        let mut store = ParamStore::new();
        let p = MultiHeadParams::register(&mut store, "attn", dim, heads, 5);
        (store, p)
    }

    fn make_identity(store: &mut ParamStore, p: &MultiHeadParams) {
        for w in [p.wq, p.wk, p.wv, p.wo] {
            let d = p.dim;
            *store.get_mut(w) = Tensor::eye(d).with_grad();
        }
    }

    #[test]
    fn singleton_key_weights_are_one_and_core_is_v_row() {
        let (mut store, p) = setup(4, 2);
        make_identity(&mut store, &p);
        let mut g = Graph::new();
        let q = g.leaf(&rand_tensor(&[3, 4], 1));
        let k = g.leaf(&rand_tensor(&[1, 4], 2));
        let vt = rand_tensor(&[1, 4], 3);
        let v = g.leaf(&vt);
        let parts = attend_parts(&mut g, &store, &p, q, k, v).unwrap();
        for w in &parts.weights {
            assert_eq!(g.shape(*w), &[3, 1]);
            for &val in g.data(*w) {
                assert_eq!(val, 1.0);
            }
        }
        // identity projections: context for every query is the single V row
        for row in g.data(parts.core).chunks_exact(4) {
            for (a, b) in row.iter().zip(vt.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let (mut store, p) = setup(6, 3);
        make_identity(&mut store, &p);
        let mut g = Graph::new();
        let q = g.leaf(&rand_tensor(&[2, 6], 4));
        let krow = rand_tensor(&[1, 6], 5);
        let kdata: Vec<f32> = krow.data().iter().cycle().take(5 * 6).copied().collect();
        let k = g.leaf(&Tensor::new(&[5, 6], kdata));
        let vt = rand_tensor(&[5, 6], 6);
        let v = g.leaf(&vt);
        let parts = attend_parts(&mut g, &store, &p, q, k, v).unwrap();
        let mut mean = vec![0.0f64; 6];
        for row in vt.data().chunks_exact(6) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64 / 5.0;
            }
        }
        for row in g.data(parts.core).chunks_exact(6) {
            for (a, m) in row.iter().zip(&mean) {
                assert!((*a as f64 - m).abs() < 1e-5, "{a} vs {m}");
            }
        }
    }

    #[test]
    fn output_shape_is_nq_by_d() {
        let (store, p) = setup(8, 4);
        let mut g = Graph::new();
        let q = g.leaf(&rand_tensor(&[7, 8], 7));
        let k = g.leaf(&rand_tensor(&[13, 8], 8));
        let v = g.leaf(&rand_tensor(&[13, 8], 9));
        let out = attend(&mut g, &store, &p, q, k, v).unwrap();
        assert_eq!(g.shape(out), &[7, 8]);
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let (store, p) = setup(8, 2);
        let mut g = Graph::new();
        let q = g.leaf(&rand_tensor(&[4, 8], 10));
        let k = g.leaf(&rand_tensor(&[9, 8], 11));
        let v = g.leaf(&rand_tensor(&[9, 8], 12));
        let parts = attend_parts(&mut g, &store, &p, q, k, v).unwrap();
        for w in &parts.weights {
            for row in g.data(*w).chunks_exact(9) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn permuting_keys_and_values_together_is_invariant() {
        let (store, p) = setup(6, 2);
        let kt = rand_tensor(&[5, 6], 13);
        let vt = rand_tensor(&[5, 6], 14);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(&t.data()[i * 6..(i + 1) * 6]);
            }
            Tensor::new(&[5, 6], data)
        };

        let mut g1 = Graph::new();
        let q1 = g1.leaf(&rand_tensor(&[3, 6], 15));
        let k1 = g1.leaf(&kt);
        let v1 = g1.leaf(&vt);
        let o1 = attend(&mut g1, &store, &p, q1, k1, v1).unwrap();

        let mut g2 = Graph::new();
        let q2 = g2.leaf(&rand_tensor(&[3, 6], 15));
        let k2 = g2.leaf(&permute(&kt));
        let v2 = g2.leaf(&permute(&vt));
        let o2 = attend(&mut g2, &store, &p, q2, k2, v2).unwrap();

        for (a, b) in g1.data(o1).iter().zip(g2.data(o2)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn drop_full_ratio_equals_plain_attention_bitwise() {
        let (store, p) = setup(6, 3);
        let xt = rand_tensor(&[10, 6], 16);

        let mut g1 = Graph::new();
        let x1 = g1.leaf(&xt);
        let (out1, mask) = self_attend_with_drop(&mut g1, &store, &p, x1, 1.0, 99).unwrap();
        assert_eq!(mask.kept_count(), 10);

        let mut g2 = Graph::new();
        let x2 = g2.leaf(&xt);
        let out2 = attend(&mut g2, &store, &p, x2, x2, x2).unwrap();

        assert_eq!(g1.data(out1), g2.data(out2));
    }

    #[test]
    fn drop_half_updates_exactly_half() {
        let (store, p) = setup(6, 2);
        let xt = rand_tensor(&[10, 6], 17);
        let mut g = Graph::new();
        let x = g.leaf(&xt);
        let (out, mask) = self_attend_with_drop(&mut g, &store, &p, x, 0.5, 123).unwrap();
        assert_eq!(mask.kept_count(), 5);
        let out_data = g.data(out);
        let mut updated = 0;
        let mut passthrough = 0;
        for r in 0..10 {
            let same = out_data[r * 6..(r + 1) * 6] == xt.data()[r * 6..(r + 1) * 6];
            if mask.kept_indices.contains(&r) {
                assert!(!same, "kept row {r} should have been updated");
                updated += 1;
            } else {
                assert!(same, "dropped row {r} must pass through bit-identically");
                passthrough += 1;
            }
        }
        assert_eq!((updated, passthrough), (5, 5));
    }

    #[test]
    fn drop_is_reproducible_per_seed() {
        let (store, p) = setup(6, 2);
        let xt = rand_tensor(&[8, 6], 18);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let x = g.leaf(&xt);
            let (out, mask) = self_attend_with_drop(&mut g, &store, &p, x, 0.4, seed).unwrap();
            (g.data(out).to_vec(), mask)
        };
        let (a, ma) = run(7);
        let (b, mb) = run(7);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (_, mc) = run(8);
        assert_ne!(ma.kept_indices, mc.kept_indices);
    }

    #[test]
    fn ffn_with_zero_weights_is_layer_norm() {
        let mut store = ParamStore::new();
        let p = FfnParams::register(&mut store, "ffn", 6, 21);
        for id in [p.w1, p.w2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let xt = rand_tensor(&[4, 6], 22);
        let mut g = Graph::new();
        let x = g.leaf(&xt);
        let out = ffn(&mut g, &store, &p, x).unwrap();
        assert_eq!(g.shape(out), &[4, 6]);
        let gain = g.leaf(&Tensor::full(&[6], 1.0));
        let bias = g.leaf(&Tensor::zeros(&[6]));
        let want = g.layer_norm(x, gain, bias);
        assert_eq!(g.data(out), g.data(want));
    }

    #[test]
    fn ffn_gradient_check() {
        let mut store = ParamStore::new();
        let p = FfnParams::register(&mut store, "ffn", 4, 23);
        let xt = rand_tensor(&[3, 4], 24);
        let probe = rand_tensor(&[3, 4], 99);

        let eval = |xs: &[f32]| {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::new(&[3, 4], xs.to_vec()));
            let out = ffn(&mut g, &store, &p, x).unwrap();
            let w = g.leaf(&probe);
            let prod = g.mul(out, w);
            let loss = g.sum_all(prod);
            g.scalar_f64(loss)
        };

        let mut g = Graph::new();
        let x = g.leaf(&xt.clone().with_grad());
        let out = ffn(&mut g, &store, &p, x).unwrap();
        let w = g.leaf(&probe);
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let err = GradCheck::default().run(eval, xt.data(), &analytic);
        assert!(err <= 1e-3, "ffn gradient error {err}");
    }

    #[test]
    fn attention_gradient_check() {
        let (store, p) = setup(4, 2);
        let xt = rand_tensor(&[5, 4], 25);
        let probe = rand_tensor(&[5, 4], 98);

        let eval = |xs: &[f32]| {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::new(&[5, 4], xs.to_vec()));
            let out = attend(&mut g, &store, &p, x, x, x).unwrap();
            let w = g.leaf(&probe);
            let prod = g.mul(out, w);
            let loss = g.sum_all(prod);
            g.scalar_f64(loss)
        };

        let mut g = Graph::new();
        let x = g.leaf(&xt.clone().with_grad());
        let out = attend(&mut g, &store, &p, x, x, x).unwrap();
        let w = g.leaf(&probe);
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let err = GradCheck::default().run(eval, xt.data(), &analytic);
        assert!(err <= 1e-3, "attention gradient error {err}");
    }
}
