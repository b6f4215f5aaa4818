//! Segmentation head: finest-scale tokens to per-frame binary motion masks.
//!
//! Three 3x3x3 conv blocks halve the channel width down to one logit plane,
//! which is bilinearly upsampled per frame to the clip resolution. A sigmoid
//! gives probabilities; binary masks threshold at 0.5 with ties going to 1.

use crate::embeddings::{normal_init, LevelDims};
use crate::error::{Error, Result};
use crate::pipeline::tokens_to_spatial;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Starting bias of the final logit layer. A mildly negative prior matches
/// the foreground rate of motion masks and avoids the early all-foreground
/// regime.
const FINAL_BIAS_INIT: f32 = -2.0;

pub struct SegHead {
    convs: Vec<(ParamId, ParamId)>,
    dim: usize,
}

impl SegHead {
    pub fn register(store: &mut ParamStore, dim: usize, seed: u64) -> SegHead {
        assert!(dim % 4 == 0 && dim >= 4, "head needs dim divisible by 4, got {dim}");
        let widths = [dim, dim / 2, dim / 4, 1];
        let mut convs = Vec::with_capacity(3);
        for i in 0..3 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let wname = format!("head.conv{}.weight", i + 1);
            let fan_in = (cin * 27) as f32;
            let w = store.add(
                &wname,
                normal_init(&[cout, cin, 3, 3, 3], seed, &wname, 1.0 / fan_in.sqrt()),
            );
            let bias_init = if i == 2 { FINAL_BIAS_INIT } else { 0.0 };
            let b = store.add(
                format!("head.conv{}.bias", i + 1),
                Tensor::full(&[cout], bias_init),
            );
            convs.push((w, b));
        }
        SegHead { convs, dim }
    }

    /// Decode (T * H_l * W_l, D) tokens into per-frame logits at the clip
    /// resolution (T, out_h, out_w).
    pub fn segment(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: NodeId,
        dims: LevelDims,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let shape = g.shape(tokens);
        if shape.len() != 2 || shape[0] != dims.tokens() || shape[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "segment",
                lhs: shape.to_vec(),
                rhs: vec![dims.tokens(), self.dim],
            });
        }
        let mut x = tokens_to_spatial(g, tokens, dims, self.dim);
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            x = g.conv3d(x, wn, Some(bn), [1, 1, 1], [1, 1, 1])?;
            if i + 1 < self.convs.len() {
                x = g.gelu(x);
            }
        }
        let grid = g.reshape(x, &[dims.t, dims.h, dims.w, 1]);
        let up = g.bilinear_interp(grid, out_h, out_w);
        Ok(g.reshape(up, &[dims.t, out_h, out_w]))
    }
}

/// Dense per-frame mask prediction.
#[derive(Clone, Debug)]
pub struct MaskClip {
    /// (T, H, W) raw logits.
    pub logits: Tensor,
    /// Sigmoid probabilities, open interval (0, 1).
    pub probs: Tensor,
    /// {0, 1} masks; 1 wherever probability >= 0.5.
    pub binary: Tensor,
}

impl MaskClip {
    pub fn from_logits(logits: Tensor) -> MaskClip {
        // sigmoid saturates to exactly 0.0 / 1.0 in f32 beyond |x| ~ 17;
        // clamp into the open interval at f32 resolution
        const P_MAX: f32 = 0.999_999_94;
        let probs = Tensor::new(
            logits.shape(),
            logits
                .data()
                .iter()
                .map(|&x| {
                    let p = (1.0 / (1.0 + (-x as f64).exp())) as f32;
                    p.clamp(f32::MIN_POSITIVE, P_MAX)
                })
                .collect(),
        );
        // probability >= 0.5 is exactly logit >= 0, ties to foreground
        let binary = Tensor::new(
            logits.shape(),
            logits
                .data()
                .iter()
                .map(|&x| if x >= 0.0 { 1.0 } else { 0.0 })
                .collect(),
        );
        MaskClip {
            logits,
            probs,
            binary,
        }
    }
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

    fn build(dim: usize) -> (ParamStore, SegHead) {
        let mut store = ParamStore::new();
        let head = SegHead::register(&mut store, dim, 13);
        (store, head)
    }

    #[test]
    fn output_matches_clip_resolution() {
        let (store, head) = build(8);
        let dims = LevelDims { t: 2, h: 4, w: 4 };
        let mut g = Graph::new();
        let tokens = g.leaf(&rand_tensor(&[dims.tokens(), 8], 1));
        let logits = head.segment(&mut g, &store, tokens, dims, 16, 16).unwrap();
        assert_eq!(g.shape(logits), &[2, 16, 16]);
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let (store, head) = build(8);
        let dims = LevelDims { t: 2, h: 4, w: 4 };
        let mut g = Graph::new();
        let tokens = g.leaf(&rand_tensor(&[10, 8], 2));
        let err = head.segment(&mut g, &store, tokens, dims, 16, 16).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "segment", .. }));
    }

    #[test]
    fn saturated_bias_gives_all_ones() {
        let (mut store, head) = build(8);
        for i in 1..=3 {
            let wid = store.id_by_name(&format!("head.conv{i}.weight")).unwrap();
            store.get_mut(wid).data_mut().iter_mut().for_each(|v| *v = 0.0);
            let bid = store.id_by_name(&format!("head.conv{i}.bias")).unwrap();
            let fill = if i == 3 { 10.0 } else { 0.0 };
            store.get_mut(bid).data_mut().iter_mut().for_each(|v| *v = fill);
        }
        let dims = LevelDims { t: 2, h: 4, w: 4 };
        let mut g = Graph::new();
        let tokens = g.leaf(&rand_tensor(&[dims.tokens(), 8], 3));
        let logits = head.segment(&mut g, &store, tokens, dims, 8, 8).unwrap();
        let clip = MaskClip::from_logits(g.detach(logits));
        assert!(clip.binary.data().iter().all(|&v| v == 1.0));
        assert!(clip.probs.data().iter().all(|&p| p > 0.999));
    }

    #[test]
    fn probabilities_open_interval_and_threshold_ties_to_one() {
        let logits = Tensor::new(&[1, 1, 3], vec![-30.0, 0.0, 30.0]);
        let clip = MaskClip::from_logits(logits);
        for &p in clip.probs.data() {
            assert!(p > 0.0 && p < 1.0);
        }
        assert_eq!(clip.binary.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn head_gradient_check() {
        let (store, head) = build(4);
        let dims = LevelDims { t: 2, h: 2, w: 2 };
        let xt = rand_tensor(&[dims.tokens(), 4], 5);
        let probe = rand_tensor(&[2, 4, 4], 6);

        let eval = |xs: &[f32]| {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::new(&[dims.tokens(), 4], xs.to_vec()));
            let logits = head.segment(&mut g, &store, x, dims, 4, 4).unwrap();
            let w = g.leaf(&probe);
            let prod = g.mul(logits, w);
            let loss = g.sum_all(prod);
            g.scalar_f64(loss)
        };

        let mut g = Graph::new();
        let x = g.leaf(&xt.clone().with_grad());
        let logits = head.segment(&mut g, &store, x, dims, 4, 4).unwrap();
        let w = g.leaf(&probe);
        let prod = g.mul(logits, w);
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let err = GradCheck::default().run(eval, xt.data(), &analytic);
        assert!(err <= 1e-3, "head gradient error {err}");
    }

    #[test]
    fn interior_logits_shift_with_input() {
        // translation covariance up to border effects: shifting the token
        // grid by one cell shifts upsampled logits by the scale factor
        let (store, head) = build(8);
        let dims = LevelDims { t: 1, h: 16, w: 16 };
        let base = rand_tensor(&[dims.tokens(), 8], 7);

        // shifted[h][w] = base[h][w-1]
        let mut shifted = vec![0.0f32; base.len()];
        for h in 0..16 {
            for w in 1..16 {
                let dst = (h * 16 + w) * 8;
                let src = (h * 16 + w - 1) * 8;
                shifted[dst..dst + 8].copy_from_slice(&base.data()[src..src + 8]);
            }
        }

        let mut g = Graph::new();
        let t1 = g.leaf(&base);
        let l1 = head.segment(&mut g, &store, t1, dims, 64, 64).unwrap();
        let t2 = g.leaf(&Tensor::new(&[dims.tokens(), 8], shifted));
        let l2 = head.segment(&mut g, &store, t2, dims, 64, 64).unwrap();

        let a = g.data(l1);
        let b = g.data(l2);
        // factor 4 upsampling: logits2[y][x] == logits1[y][x-4] away from borders
        for y in 16..48 {
            for x in 16..48 {
                let got = b[y * 64 + x];
                let want = a[y * 64 + x - 4];
                assert!(
                    (got - want).abs() < 1e-4,
                    "({y},{x}): {got} vs {want}"
                );
            }
        }
    }
}
