//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] is built per forward call: every op executes eagerly and
//! records enough to replay the chain rule backwards. [`Graph::backward`]
//! walks the tape once in reverse; each call accumulates into the persistent
//! per-node gradients, and [`Graph::apply_param_grads`] folds leaf gradients
//! back into the owning [`ParamStore`]. The graph is dropped after the step.
//!
//! Reductions (matmul inner products, convolution taps, softmax and norm
//! statistics, `sum_all`) accumulate in f64 with a fixed order.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    ConstLeaf,
    ParamLeaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GroupNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        groups: usize,
    },
    Reshape(NodeId),
    Transpose2d(NodeId),
    ConcatLast(NodeId, NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: NodeId,
        upd: NodeId,
        idx: Vec<usize>,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Bilinear {
        x: NodeId,
        new_h: usize,
        new_w: usize,
    },
    SumAll {
        x: NodeId,
        exact: f64,
    },
    MaxLast {
        x: NodeId,
        argmax: Vec<u32>,
    },
    BceWithLogits {
        logits: NodeId,
        target: NodeId,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, NodeId)>,
    param_lookup: HashMap<usize, NodeId>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.node(id).data
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        assert_eq!(self.node(id).data.len(), 1, "scalar() on non-scalar node");
        self.node(id).data[0]
    }

    /// Exact f64 value of a `sum_all` node, f32 value otherwise.
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        match self.node(id).op {
            Op::SumAll { exact, .. } => exact,
            _ => self.scalar(id) as f64,
        }
    }

    pub fn detach(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(&n.shape, n.data.clone())
    }

    /// Accumulated gradient of a node, populated by `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.node(id).grad.as_deref()
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::ConstLeaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Leaf whose gradient participation follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::ConstLeaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Leaf bound to a store parameter. Repeated use of the same parameter
    /// in one graph returns the same node, so shared parameters accumulate
    /// gradients by the sum rule.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_lookup.get(&id.0) {
            return n;
        }
        let t = store.get(id);
        let n = self.push(Op::ParamLeaf, t.shape().to_vec(), t.data().to_vec(), true);
        self.param_nodes.push((id, n));
        self.param_lookup.insert(id.0, n);
        n
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(na.shape, nb.shape, "add: shape mismatch");
        let data = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        self.push(Op::Add(a, b), shape, data, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(na.shape, nb.shape, "mul: shape mismatch");
        let data = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        self.push(Op::Mul(a, b), shape, data, needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(na.shape, nb.shape, "div: shape mismatch");
        let data = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| x / y)
            .collect();
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        self.push(Op::Div(a, b), shape, data, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let nx = self.node(x);
        let data = nx.data.iter().map(|v| v * c).collect();
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(Op::Scale(x, c), shape, data, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let nx = self.node(x);
        let data = nx.data.iter().map(|v| v + c).collect();
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(Op::AddScalar(x), shape, data, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let data = nx.data.iter().map(|v| v.max(0.0)).collect();
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(Op::Relu(x), shape, data, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let data = nx.data.iter().map(|&v| gelu_f(v as f64) as f32).collect();
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(Op::Gelu(x), shape, data, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let data = nx.data.iter().map(|&v| sigmoid_f(v)).collect();
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(Op::Sigmoid(x), shape, data, needs)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0f32; m * n];
        mm_nn(&na.data, &nb.data, m, k, n, &mut out);
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, needs))
    }

    /// Broadcast a length-D vector over the last axis. The only broadcast
    /// in the engine.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (nx, nb) = (self.node(x), self.node(bias));
        let d = *nx.shape.last().expect("bias_add on scalar");
        assert_eq!(nb.shape, vec![d], "bias_add: bias must be [last_dim]");
        let mut data = nx.data.clone();
        for row in data.chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(&nb.data) {
                *v += b;
            }
        }
        let needs = nx.needs_grad || nb.needs_grad;
        let shape = nx.shape.clone();
        self.push(Op::BiasAdd { x, bias }, shape, data, needs)
    }

    /// matmul followed by bias_add.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        Ok(self.bias_add(h, b))
    }

    /// Softmax along the last axis with max subtraction. NaN inputs yield
    /// NaN outputs.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let d = *nx.shape.last().expect("softmax on scalar");
        let mut data = vec![0.0f32; nx.data.len()];
        for (out, row) in data.chunks_exact_mut(d).zip(nx.data.chunks_exact(d)) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0f64;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = ((v - m) as f64).exp();
                *o = e as f32;
                denom += e;
            }
            for o in out.iter_mut() {
                *o = (*o as f64 / denom) as f32;
            }
        }
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(Op::SoftmaxLast(x), shape, data, needs)
    }

    /// Per-row normalization over the last axis (eps = 1e-5), then affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (nx, ng, nb) = (self.node(x), self.node(gain), self.node(bias));
        let d = *nx.shape.last().expect("layer_norm on scalar");
        assert!(d >= 2, "layer_norm needs last axis >= 2");
        assert_eq!(ng.shape, vec![d]);
        assert_eq!(nb.shape, vec![d]);
        let mut data = vec![0.0f32; nx.data.len()];
        for (out, row) in data.chunks_exact_mut(d).zip(nx.data.chunks_exact(d)) {
            let (mean, rstd) = row_stats(row);
            for i in 0..d {
                let xhat = (row[i] as f64 - mean) * rstd;
                out[i] = (xhat * ng.data[i] as f64 + nb.data[i] as f64) as f32;
            }
        }
        let needs = nx.needs_grad || ng.needs_grad || nb.needs_grad;
        let shape = nx.shape.clone();
        self.push(Op::LayerNorm { x, gain, bias }, shape, data, needs)
    }

    /// Group normalization of a [C, ...] tensor: channels are split into
    /// `groups`, each group normalized over its channels and all trailing
    /// axes, then a per-channel affine is applied.
    pub fn group_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, groups: usize) -> NodeId {
        let (nx, ng, nb) = (self.node(x), self.node(gain), self.node(bias));
        let c = nx.shape[0];
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(ng.shape, vec![c]);
        assert_eq!(nb.shape, vec![c]);
        let inner: usize = nx.shape[1..].iter().product();
        let cpg = c / groups;
        let mut data = vec![0.0f32; nx.data.len()];
        for g in 0..groups {
            let span = &nx.data[g * cpg * inner..(g + 1) * cpg * inner];
            let (mean, rstd) = row_stats(span);
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let (gv, bv) = (ng.data[ch] as f64, nb.data[ch] as f64);
                let base = ch * inner;
                for i in 0..inner {
                    let xhat = (nx.data[base + i] as f64 - mean) * rstd;
                    data[base + i] = (xhat * gv + bv) as f32;
                }
            }
        }
        let needs = nx.needs_grad || ng.needs_grad || nb.needs_grad;
        let shape = nx.shape.clone();
        self.push(
            Op::GroupNorm { x, gain, bias, groups },
            shape,
            data,
            needs,
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let nx = self.node(x);
        assert_eq!(
            shape.iter().product::<usize>(),
            nx.data.len(),
            "reshape: element count mismatch ({:?} -> {:?})",
            nx.shape,
            shape
        );
        let (data, needs) = (nx.data.clone(), nx.needs_grad);
        self.push(Op::Reshape(x), shape.to_vec(), data, needs)
    }

    pub fn transpose2d(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        assert_eq!(nx.shape.len(), 2, "transpose2d needs rank 2");
        let (r, c) = (nx.shape[0], nx.shape[1]);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = nx.data[i * c + j];
            }
        }
        let needs = nx.needs_grad;
        self.push(Op::Transpose2d(x), vec![c, r], data, needs)
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (self.node(a), self.node(b));
        let (ra, rb) = (na.shape.len(), nb.shape.len());
        assert_eq!(ra, rb, "concat_last: rank mismatch");
        assert_eq!(na.shape[..ra - 1], nb.shape[..rb - 1], "concat_last: leading dims differ");
        let (da, db) = (na.shape[ra - 1], nb.shape[rb - 1]);
        let rows = na.data.len() / da;
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&na.data[r * da..(r + 1) * da]);
            data.extend_from_slice(&nb.data[r * db..(r + 1) * db]);
        }
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = da + db;
        let needs = na.needs_grad || nb.needs_grad;
        self.push(Op::ConcatLast(a, b), shape, data, needs)
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let nx = self.node(x);
        let d = *nx.shape.last().expect("slice_last on scalar");
        assert!(start + len <= d, "slice_last out of bounds");
        let rows = nx.data.len() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&nx.data[r * d + start..r * d + start + len]);
        }
        let mut shape = nx.shape.clone();
        *shape.last_mut().unwrap() = len;
        let needs = nx.needs_grad;
        self.push(Op::SliceLast { x, start, len }, shape, data, needs)
    }

    /// Select rows of a [n, D] tensor. Indices must be strictly increasing.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let nx = self.node(x);
        assert_eq!(nx.shape.len(), 2, "gather_rows needs rank 2");
        let d = nx.shape[1];
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < nx.shape[0]), "gather_rows index out of range");
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&nx.data[i * d..(i + 1) * d]);
        }
        let needs = nx.needs_grad;
        self.push(
            Op::GatherRows { x, idx: idx.to_vec() },
            vec![idx.len(), d],
            data,
            needs,
        )
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `upd`.
    pub fn scatter_rows(&mut self, base: NodeId, upd: NodeId, idx: &[usize]) -> NodeId {
        let (nb, nu) = (self.node(base), self.node(upd));
        assert_eq!(nb.shape.len(), 2);
        assert_eq!(nu.shape.len(), 2);
        assert_eq!(nb.shape[1], nu.shape[1], "scatter_rows width mismatch");
        assert_eq!(nu.shape[0], idx.len(), "scatter_rows row count mismatch");
        let d = nb.shape[1];
        let mut data = nb.data.clone();
        for (r, &i) in idx.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&nu.data[r * d..(r + 1) * d]);
        }
        let needs = nb.needs_grad || nu.needs_grad;
        let shape = nb.shape.clone();
        self.push(
            Op::ScatterRows { base, upd, idx: idx.to_vec() },
            shape,
            data,
            needs,
        )
    }

    // ── Spatial ops ─────────────────────────────────────────────────

    /// Cross-correlation of x: [C_in, T, H, W] with w: [C_out, C_in, kt, kh, kw].
    /// Output extents follow floor((in + 2p - k) / s) + 1.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let (nx, nw) = (self.node(x), self.node(w));
        if nx.shape.len() != 4 || nw.shape.len() != 5 || nx.shape[0] != nw.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: nx.shape.clone(),
                rhs: nw.shape.clone(),
            });
        }
        let dims = Conv3dDims::derive(&nx.shape, &nw.shape, stride, pad)?;
        if let Some(b) = bias {
            assert_eq!(self.node(b).shape, vec![dims.co], "conv3d bias shape");
        }
        let bias_data = bias.map(|b| self.node(b).data.clone());
        let data = conv3d_forward(&self.node(x).data, &self.node(w).data, bias_data.as_deref(), &dims);
        let needs = self.needs(x)
            || self.needs(w)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::Conv3d { x, w, bias, stride, pad },
            vec![dims.co, dims.to, dims.ho, dims.wo],
            data,
            needs,
        ))
    }

    /// Per-frame bilinear resampling of x: [T, H, W, D] to (new_h, new_w),
    /// align-corners = false with edge clamping.
    pub fn bilinear_interp(&mut self, x: NodeId, new_h: usize, new_w: usize) -> NodeId {
        let nx = self.node(x);
        assert_eq!(nx.shape.len(), 4, "bilinear_interp needs [T, H, W, D]");
        assert!(new_h >= 1 && new_w >= 1);
        let (t, h, w, d) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        let ytaps = interp_taps(h, new_h);
        let xtaps = interp_taps(w, new_w);
        let mut data = vec![0.0f32; t * new_h * new_w * d];
        for ti in 0..t {
            let frame = &nx.data[ti * h * w * d..(ti + 1) * h * w * d];
            let oframe = &mut data[ti * new_h * new_w * d..(ti + 1) * new_h * new_w * d];
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    let o = (oy * new_w + ox) * d;
                    let i00 = (y0 * w + x0) * d;
                    let i01 = (y0 * w + x1) * d;
                    let i10 = (y1 * w + x0) * d;
                    let i11 = (y1 * w + x1) * d;
                    for c in 0..d {
                        let v = w00 * frame[i00 + c] as f64
                            + w01 * frame[i01 + c] as f64
                            + w10 * frame[i10 + c] as f64
                            + w11 * frame[i11 + c] as f64;
                        oframe[o + c] = v as f32;
                    }
                }
            }
        }
        let needs = nx.needs_grad;
        self.push(
            Op::Bilinear { x, new_h, new_w },
            vec![t, new_h, new_w, d],
            data,
            needs,
        )
    }

    // ── Reductions and losses ───────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let exact: f64 = nx.data.iter().map(|&v| v as f64).sum();
        let needs = nx.needs_grad;
        self.push(Op::SumAll { x, exact }, vec![1], vec![exact as f32], needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x).data.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Row-wise maximum over the last axis: [rows, m] -> [rows, 1].
    /// The gradient routes to the first maximizing entry of each row.
    pub fn max_last(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let d = *nx.shape.last().expect("max_last on scalar");
        let rows = nx.data.len() / d;
        let mut data = vec![0.0f32; rows];
        let mut argmax = vec![0u32; rows];
        for r in 0..rows {
            let row = &nx.data[r * d..(r + 1) * d];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            data[r] = bv;
            argmax[r] = bi as u32;
        }
        let mut shape = nx.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let needs = nx.needs_grad;
        self.push(Op::MaxLast { x, argmax }, shape, data, needs)
    }

    /// Elementwise binary cross-entropy from logits,
    /// `max(x, 0) - x*z + ln(1 + exp(-|x|))`. Targets take no gradient.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        let (nl, nt) = (self.node(logits), self.node(target));
        assert_eq!(nl.shape, nt.shape, "bce_with_logits: shape mismatch");
        let data = nl
            .data
            .iter()
            .zip(&nt.data)
            .map(|(&x, &z)| {
                let x = x as f64;
                (x.max(0.0) - x * z as f64 + (1.0 + (-x.abs()).exp()).ln()) as f32
            })
            .collect();
        let needs = nl.needs_grad;
        let shape = nl.shape.clone();
        self.push(Op::BceWithLogits { logits, target }, shape, data, needs)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each call accumulates another
    /// full pass into the persistent node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::NonScalarLoss(self.node(loss).shape.clone()));
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        pass[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = pass[i].take() else { continue };
            self.propagate(i, &g, &mut pass);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Fold parameter-leaf gradients back into the store (accumulating).
    pub fn apply_param_grads(&self, store: &mut ParamStore) {
        for &(pid, nid) in &self.param_nodes {
            if let Some(g) = self.node(nid).grad.as_deref() {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    fn add_into(&self, pass: &mut [Option<Vec<f32>>], id: NodeId, contrib: &[f32]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut pass[id.0];
        match slot {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn add_into_f64(&self, pass: &mut [Option<Vec<f32>>], id: NodeId, contrib: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut pass[id.0];
        match slot {
            Some(buf) => {
                for (a, &b) in buf.iter_mut().zip(contrib) {
                    *a += b as f32;
                }
            }
            None => *slot = Some(contrib.iter().map(|&v| v as f32).collect()),
        }
    }

    fn propagate(&self, i: usize, g: &[f32], pass: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::ConstLeaf | Op::ParamLeaf => {}

            Op::Add(a, b) => {
                self.add_into(pass, *a, g);
                self.add_into(pass, *b, g);
            }

            Op::Mul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                if self.needs(*a) {
                    let da: Vec<f32> = g.iter().zip(&nb.data).map(|(gv, bv)| gv * bv).collect();
                    self.add_into(pass, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f32> = g.iter().zip(&na.data).map(|(gv, av)| gv * av).collect();
                    self.add_into(pass, *b, &db);
                }
            }

            Op::Div(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                if self.needs(*a) {
                    let da: Vec<f32> = g.iter().zip(&nb.data).map(|(gv, bv)| gv / bv).collect();
                    self.add_into(pass, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(na.data.iter().zip(&nb.data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    self.add_into(pass, *b, &db);
                }
            }

            Op::Scale(x, c) => {
                let dx: Vec<f32> = g.iter().map(|gv| gv * c).collect();
                self.add_into(pass, *x, &dx);
            }

            Op::AddScalar(x) => self.add_into(pass, *x, g),

            Op::MatMul { a, b } => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k) = (na.shape[0], na.shape[1]);
                let n = nb.shape[1];
                if self.needs(*a) {
                    // dA = g . B^T
                    let mut da = vec![0.0f32; m * k];
                    mm_nt(g, &nb.data, m, n, k, &mut da);
                    self.add_into(pass, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let mut db = vec![0.0f64; k * n];
                    mm_tn_acc(&na.data, g, m, k, n, &mut db);
                    self.add_into_f64(pass, *b, &db);
                }
            }

            Op::BiasAdd { x, bias } => {
                self.add_into(pass, *x, g);
                if self.needs(*bias) {
                    let d = self.node(*bias).shape[0];
                    let mut db = vec![0.0f64; d];
                    for row in g.chunks_exact(d) {
                        for (acc, &gv) in db.iter_mut().zip(row) {
                            *acc += gv as f64;
                        }
                    }
                    self.add_into_f64(pass, *bias, &db);
                }
            }

            Op::Relu(x) => {
                let nx = self.node(*x);
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&nx.data)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_into(pass, *x, &dx);
            }

            Op::Gelu(x) => {
                let nx = self.node(*x);
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&nx.data)
                    .map(|(gv, &xv)| (*gv as f64 * gelu_df(xv as f64)) as f32)
                    .collect();
                self.add_into(pass, *x, &dx);
            }

            Op::Sigmoid(x) => {
                let out = &self.nodes[i].data;
                let dx: Vec<f32> = g
                    .iter()
                    .zip(out)
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.add_into(pass, *x, &dx);
            }

            Op::SoftmaxLast(x) => {
                let out = &self.nodes[i].data;
                let d = *self.nodes[i].shape.last().unwrap();
                let mut dx = vec![0.0f32; out.len()];
                for ((dxr, gr), sr) in dx
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(out.chunks_exact(d))
                {
                    let dot: f64 = gr
                        .iter()
                        .zip(sr)
                        .map(|(&gv, &sv)| gv as f64 * sv as f64)
                        .sum();
                    for j in 0..d {
                        dxr[j] = (sr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                self.add_into(pass, *x, &dx);
            }

            Op::LayerNorm { x, gain, bias } => {
                let (nx, ng) = (self.node(*x), self.node(*gain));
                let d = *nx.shape.last().unwrap();
                let rows = nx.data.len() / d;
                let mut dx = vec![0.0f64; nx.data.len()];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                for r in 0..rows {
                    let xr = &nx.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_stats(xr);
                    let mut dxhat = vec![0.0f64; d];
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..d {
                        let xhat = (xr[j] as f64 - mean) * rstd;
                        let gj = gr[j] as f64;
                        dgain[j] += gj * xhat;
                        dbias[j] += gj;
                        let dh = gj * ng.data[j] as f64;
                        dxhat[j] = dh;
                        sum_dxhat += dh;
                        sum_dxhat_xhat += dh * xhat;
                    }
                    let inv_n = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (xr[j] as f64 - mean) * rstd;
                        dx[r * d + j] =
                            rstd * (dxhat[j] - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                self.add_into_f64(pass, *x, &dx);
                self.add_into_f64(pass, *gain, &dgain);
                self.add_into_f64(pass, *bias, &dbias);
            }

            Op::GroupNorm { x, gain, bias, groups } => {
                let groups = *groups;
                let (nx, ng) = (self.node(*x), self.node(*gain));
                let c = nx.shape[0];
                let inner: usize = nx.shape[1..].iter().product();
                let cpg = c / groups;
                let m = cpg * inner;
                let mut dx = vec![0.0f64; nx.data.len()];
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                for grp in 0..groups {
                    let base = grp * m;
                    let span = &nx.data[base..base + m];
                    let (mean, rstd) = row_stats(span);
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for cc in 0..cpg {
                        let ch = grp * cpg + cc;
                        let gv = ng.data[ch] as f64;
                        for k in 0..inner {
                            let idx = ch * inner + k;
                            let xhat = (nx.data[idx] as f64 - mean) * rstd;
                            let gj = g[idx] as f64;
                            dgain[ch] += gj * xhat;
                            dbias[ch] += gj;
                            let dh = gj * gv;
                            sum_dxhat += dh;
                            sum_dxhat_xhat += dh * xhat;
                        }
                    }
                    let inv_m = 1.0 / m as f64;
                    for cc in 0..cpg {
                        let ch = grp * cpg + cc;
                        let gv = ng.data[ch] as f64;
                        for k in 0..inner {
                            let idx = ch * inner + k;
                            let xhat = (nx.data[idx] as f64 - mean) * rstd;
                            let dh = g[idx] as f64 * gv;
                            dx[idx] =
                                rstd * (dh - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                        }
                    }
                }
                self.add_into_f64(pass, *x, &dx);
                self.add_into_f64(pass, *gain, &dgain);
                self.add_into_f64(pass, *bias, &dbias);
            }

            Op::Reshape(x) => self.add_into(pass, *x, g),

            Op::Transpose2d(x) => {
                let (c, r) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut dx = vec![0.0f32; g.len()];
                for a in 0..c {
                    for b in 0..r {
                        dx[b * c + a] = g[a * r + b];
                    }
                }
                self.add_into(pass, *x, &dx);
            }

            Op::ConcatLast(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let da = *na.shape.last().unwrap();
                let db = *nb.shape.last().unwrap();
                let rows = na.data.len() / da;
                if self.needs(*a) {
                    let mut ga = vec![0.0f32; na.data.len()];
                    for r in 0..rows {
                        ga[r * da..(r + 1) * da]
                            .copy_from_slice(&g[r * (da + db)..r * (da + db) + da]);
                    }
                    self.add_into(pass, *a, &ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0f32; nb.data.len()];
                    for r in 0..rows {
                        gb[r * db..(r + 1) * db]
                            .copy_from_slice(&g[r * (da + db) + da..(r + 1) * (da + db)]);
                    }
                    self.add_into(pass, *b, &gb);
                }
            }

            Op::SliceLast { x, start, len } => {
                let nx = self.node(*x);
                let d = *nx.shape.last().unwrap();
                let rows = nx.data.len() / d;
                let mut dx = vec![0.0f32; nx.data.len()];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_into(pass, *x, &dx);
            }

            Op::GatherRows { x, idx } => {
                let nx = self.node(*x);
                let d = nx.shape[1];
                let mut dx = vec![0.0f32; nx.data.len()];
                for (r, &srci) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[srci * d + j] += g[r * d + j];
                    }
                }
                self.add_into(pass, *x, &dx);
            }

            Op::ScatterRows { base, upd, idx } => {
                let nb = self.node(*base);
                let d = nb.shape[1];
                if self.needs(*base) {
                    let mut db = g.to_vec();
                    for &i in idx {
                        db[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                    self.add_into(pass, *base, &db);
                }
                if self.needs(*upd) {
                    let mut du = vec![0.0f32; idx.len() * d];
                    for (r, &i) in idx.iter().enumerate() {
                        du[r * d..(r + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    self.add_into(pass, *upd, &du);
                }
            }

            Op::Conv3d { x, w, bias, stride, pad } => {
                let (nx, nw) = (self.node(*x), self.node(*w));
                let dims = Conv3dDims::derive(&nx.shape, &nw.shape, *stride, *pad)
                    .expect("dims already validated in forward");
                if self.needs(*x) {
                    let dx = conv3d_backward_input(g, &nw.data, &dims);
                    self.add_into_f64(pass, *x, &dx);
                }
                if self.needs(*w) {
                    let dw = conv3d_backward_weight(g, &nx.data, &dims);
                    self.add_into_f64(pass, *w, &dw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let plane = dims.to * dims.ho * dims.wo;
                        let mut db = vec![0.0f64; dims.co];
                        for co in 0..dims.co {
                            db[co] = g[co * plane..(co + 1) * plane]
                                .iter()
                                .map(|&v| v as f64)
                                .sum();
                        }
                        self.add_into_f64(pass, *b, &db);
                    }
                }
            }

            Op::Bilinear { x, new_h, new_w } => {
                let nx = self.node(*x);
                let (t, h, w, d) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
                let ytaps = interp_taps(h, *new_h);
                let xtaps = interp_taps(w, *new_w);
                let mut dx = vec![0.0f64; nx.data.len()];
                for ti in 0..t {
                    let go = &g[ti * new_h * new_w * d..(ti + 1) * new_h * new_w * d];
                    let dframe = &mut dx[ti * h * w * d..(ti + 1) * h * w * d];
                    for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                            let w00 = (1.0 - fy) * (1.0 - fx);
                            let w01 = (1.0 - fy) * fx;
                            let w10 = fy * (1.0 - fx);
                            let w11 = fy * fx;
                            let o = (oy * new_w + ox) * d;
                            for c in 0..d {
                                let gv = go[o + c] as f64;
                                dframe[(y0 * w + x0) * d + c] += w00 * gv;
                                dframe[(y0 * w + x1) * d + c] += w01 * gv;
                                dframe[(y1 * w + x0) * d + c] += w10 * gv;
                                dframe[(y1 * w + x1) * d + c] += w11 * gv;
                            }
                        }
                    }
                }
                self.add_into_f64(pass, *x, &dx);
            }

            Op::SumAll { x, .. } => {
                let n = self.node(*x).data.len();
                let dx = vec![g[0]; n];
                self.add_into(pass, *x, &dx);
            }

            Op::MaxLast { x, argmax } => {
                let nx = self.node(*x);
                let d = *nx.shape.last().unwrap();
                let mut dx = vec![0.0f32; nx.data.len()];
                for (r, &am) in argmax.iter().enumerate() {
                    dx[r * d + am as usize] = g[r];
                }
                self.add_into(pass, *x, &dx);
            }

            Op::BceWithLogits { logits, target } => {
                let (nl, nt) = (self.node(*logits), self.node(*target));
                if self.needs(*logits) {
                    let dl: Vec<f32> = g
                        .iter()
                        .zip(nl.data.iter().zip(&nt.data))
                        .map(|(gv, (&x, &z))| gv * (sigmoid_f(x) - z))
                        .collect();
                    self.add_into(pass, *logits, &dl);
                }
            }
        }
    }
}

// ── Scalar helpers ─────────────────────────────────────────────────

fn sigmoid_f(x: f32) -> f32 {
    (1.0 / (1.0 + (-x as f64).exp())) as f32
}

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Mean and reciprocal stddev (with eps) of a slice, f64 accumulation.
fn row_stats(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

// ── Matmul kernels ─────────────────────────────────────────────────

/// out[m,n] = a[m,k] . b[k,n]
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &ap) in arow.iter().enumerate() {
            let ap = ap as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (av, &bv) in acc.iter_mut().zip(brow) {
                *av += ap * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
}

/// out[m,n] = a[m,k] . b[n,k]^T
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f64;
            for (p, &av) in arow.iter().enumerate() {
                s += av as f64 * brow[p] as f64;
            }
            out[i * n + j] = s as f32;
        }
    }
}

/// out[k,n] += a[m,k]^T . g[m,n]
fn mm_tn_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let ap = ap as f64;
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += ap * gv as f64;
            }
        }
    }
}

// ── Conv3d kernels ─────────────────────────────────────────────────

struct Conv3dDims {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Conv3dDims {
    fn derive(
        xshape: &[usize],
        wshape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Conv3dDims> {
        let (ci, t, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (co, kt, kh, kw) = (wshape[0], wshape[2], wshape[3], wshape[4]);
        assert!(stride.iter().all(|&s| s >= 1), "conv3d stride must be >= 1");
        let out_extent = |i: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            let padded = i + 2 * p;
            if k > padded {
                return None;
            }
            Some((padded - k) / s + 1)
        };
        let to = out_extent(t, kt, stride[0], pad[0]);
        let ho = out_extent(h, kh, stride[1], pad[1]);
        let wo = out_extent(w, kw, stride[2], pad[2]);
        match (to, ho, wo) {
            (Some(to), Some(ho), Some(wo)) if to >= 1 && ho >= 1 && wo >= 1 => Ok(Conv3dDims {
                ci,
                t,
                h,
                w,
                co,
                kt,
                kh,
                kw,
                to,
                ho,
                wo,
                stride,
                pad,
            }),
            _ => Err(Error::EmptyOutput {
                op: "conv3d",
                input: xshape.to_vec(),
                kernel: vec![kt, kh, kw],
                stride: stride.to_vec(),
                padding: pad.to_vec(),
            }),
        }
    }

    /// Output index range [lo, hi) for which `o*s + k - p` lands inside
    /// [0, size_in).
    fn valid(size_in: usize, size_out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
        let (size_in, size_out, k, s, p) = (
            size_in as i64,
            size_out as i64,
            k as i64,
            s as i64,
            p as i64,
        );
        let lo = ceil_div(p - k, s).max(0);
        let hi = ((size_in - 1 + p - k).div_euclid(s) + 1).clamp(lo, size_out);
        (lo as usize, hi as usize)
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

fn conv3d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &Conv3dDims) -> Vec<f32> {
    let plane = d.to * d.ho * d.wo;
    let mut out = vec![0.0f32; d.co * plane];
    let mut acc = vec![0.0f64; plane];
    let (st, sh, sw) = (d.stride[0], d.stride[1], d.stride[2]);
    let (pt, ph, pw) = (d.pad[0], d.pad[1], d.pad[2]);
    for co in 0..d.co {
        let b = bias.map(|b| b[co] as f64).unwrap_or(0.0);
        acc.iter_mut().for_each(|v| *v = b);
        for ci in 0..d.ci {
            for kt in 0..d.kt {
                let (t0, t1) = Conv3dDims::valid(d.t, d.to, kt, st, pt);
                for kh in 0..d.kh {
                    let (h0, h1) = Conv3dDims::valid(d.h, d.ho, kh, sh, ph);
                    for kw in 0..d.kw {
                        let (w0, w1) = Conv3dDims::valid(d.w, d.wo, kw, sw, pw);
                        let wv = w[(((co * d.ci + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        for ot in t0..t1 {
                            let ti = ot * st + kt - pt;
                            for oh in h0..h1 {
                                let hi = oh * sh + kh - ph;
                                let xbase = ((ci * d.t + ti) * d.h + hi) * d.w + kw;
                                let obase = (ot * d.ho + oh) * d.wo;
                                // wi = ow*sw + kw - pw
                                for ow in w0..w1 {
                                    acc[obase + ow] += wv * x[xbase + ow * sw - pw] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (o, &v) in out[co * plane..(co + 1) * plane].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

fn conv3d_backward_input(g: &[f32], w: &[f32], d: &Conv3dDims) -> Vec<f64> {
    let mut dx = vec![0.0f64; d.ci * d.t * d.h * d.w];
    let (st, sh, sw) = (d.stride[0], d.stride[1], d.stride[2]);
    let (pt, ph, pw) = (d.pad[0], d.pad[1], d.pad[2]);
    for co in 0..d.co {
        let gplane = &g[co * d.to * d.ho * d.wo..(co + 1) * d.to * d.ho * d.wo];
        for ci in 0..d.ci {
            for kt in 0..d.kt {
                let (t0, t1) = Conv3dDims::valid(d.t, d.to, kt, st, pt);
                for kh in 0..d.kh {
                    let (h0, h1) = Conv3dDims::valid(d.h, d.ho, kh, sh, ph);
                    for kw in 0..d.kw {
                        let (w0, w1) = Conv3dDims::valid(d.w, d.wo, kw, sw, pw);
                        let wv = w[(((co * d.ci + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        for ot in t0..t1 {
                            let ti = ot * st + kt - pt;
                            for oh in h0..h1 {
                                let hi = oh * sh + kh - ph;
                                let xbase = ((ci * d.t + ti) * d.h + hi) * d.w + kw;
                                let obase = (ot * d.ho + oh) * d.wo;
                                for ow in w0..w1 {
                                    dx[xbase + ow * sw - pw] += wv * gplane[obase + ow] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv3d_backward_weight(g: &[f32], x: &[f32], d: &Conv3dDims) -> Vec<f64> {
    let mut dw = vec![0.0f64; d.co * d.ci * d.kt * d.kh * d.kw];
    let (st, sh, sw) = (d.stride[0], d.stride[1], d.stride[2]);
    let (pt, ph, pw) = (d.pad[0], d.pad[1], d.pad[2]);
    for co in 0..d.co {
        let gplane = &g[co * d.to * d.ho * d.wo..(co + 1) * d.to * d.ho * d.wo];
        for ci in 0..d.ci {
            for kt in 0..d.kt {
                let (t0, t1) = Conv3dDims::valid(d.t, d.to, kt, st, pt);
                for kh in 0..d.kh {
                    let (h0, h1) = Conv3dDims::valid(d.h, d.ho, kh, sh, ph);
                    for kw in 0..d.kw {
                        let (w0, w1) = Conv3dDims::valid(d.w, d.wo, kw, sw, pw);
                        let mut acc = 0.0f64;
                        for ot in t0..t1 {
                            let ti = ot * st + kt - pt;
                            for oh in h0..h1 {
                                let hi = oh * sh + kh - ph;
                                let xbase = ((ci * d.t + ti) * d.h + hi) * d.w + kw;
                                let obase = (ot * d.ho + oh) * d.wo;
                                for ow in w0..w1 {
                                    acc +=
                                        x[xbase + ow * sw - pw] as f64 * gplane[obase + ow] as f64;
                                }
                            }
                        }
                        dw[(((co * d.ci + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw] = acc;
                    }
                }
            }
        }
    }
    dw
}

// ── Bilinear taps ──────────────────────────────────────────────────

/// For each output coordinate, the two source indices and the fractional
/// weight of the second one (align-corners = false, edge clamped).
fn interp_taps(size_in: usize, size_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = size_in as f64 / size_out as f64;
    (0..size_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, size_in as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(size_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
