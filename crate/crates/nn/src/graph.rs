//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order for
//! the backward sweep.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::kernels::{col2im, gemm, im2col, Window};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dCfg {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2dCfg {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub output_pad: (usize, usize),
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    MulConst(NodeId, Arc<Tensor>),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanLastAxis(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BroadcastSpatial(NodeId),
    ConcatChannels(Vec<NodeId>),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    GatherLocations {
        x: NodeId,
        item: usize,
        idx: Vec<usize>,
    },
    L2NormRows {
        x: NodeId,
        norms: Vec<f64>,
        eps: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SpectralNorm {
        w: NodeId,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<(u64, usize), NodeId>,
    frozen: HashSet<u64>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_leaves: HashMap<(u64, usize), NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter in `store`, `None` where the parameter
    /// was not reached.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|pid| {
                self.param_leaves
                    .get(&(store.store_id(), pid.index()))
                    .and_then(|n| self.grads[n.0].clone())
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `store` enter this graph as constants from now on.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.store_id());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (for gradients w.r.t. inputs).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let key = (store.store_id(), id.index());
        if let Some(&n) = self.param_leaves.get(&key) {
            return n;
        }
        let trainable = !self.frozen.contains(&store.store_id());
        let n = self.push_arc(store.get_arc(id), Op::Leaf, trainable);
        self.param_leaves.insert(key, n);
        n
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Shift(a), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, t: Tensor) -> NodeId {
        let v = self.value(a).zip_map(&t, |x, y| x * y);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulConst(a, Arc::new(t)), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    // ---- reductions and shape ----------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Mean over the last axis: `[..., L] -> [...]`.
    pub fn mean_last_axis(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let shape = t.shape();
        let l = *shape.last().expect("mean_last_axis on a scalar");
        let out_shape = &shape[..shape.len() - 1];
        let data: Vec<f64> = t
            .data()
            .chunks(l)
            .map(|c| c.iter().sum::<f64>() / l as f64)
            .collect();
        let v = Tensor::new(out_shape, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanLastAxis(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial average.
    pub fn spatial_mean(&mut self, a: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(a).dims4();
        let r = self.reshape(a, &[n, c, h * w]);
        self.mean_last_axis(r)
    }

    // ---- convolution -------------------------------------------------

    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, kh, kw]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, cfg: Conv2dCfg) -> NodeId {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (co, wci, kh, kw) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
        let win = Window::conv(ci, h, wd, (kh, kw), cfg.stride, cfg.pad);
        let rows = win.col_rows();
        let p = win.col_cols();
        let mut cols = vec![0.0; n * rows * p];
        let mut out = vec![0.0; n * co * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let c = &mut cols[i * rows * p..(i + 1) * rows * p];
            im2col(&xv[i * ci * h * wd..(i + 1) * ci * h * wd], &win, c);
            let o = &mut out[i * co * p..(i + 1) * co * p];
            gemm(co, rows, p, 1.0, wv, false, c, false, 0.0, o);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, p);
        }
        let v = Tensor::new(&[n, co, win.out_h, win.out_w], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(v, Op::Conv2d { x, w, b, win, cols }, rg)
    }

    /// `x: [N, Ci, H, W]`, `w: [Ci, Co, kh, kw]`, `b: [Co]`. Output size per
    /// axis is `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cfg: ConvTranspose2dCfg,
    ) -> NodeId {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (wci, co, kh, kw) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv_transpose2d: input has {ci} channels, kernel expects {wci}");
        let oh = (h - 1) * cfg.stride.0 + kh + cfg.output_pad.0 - 2 * cfg.pad.0;
        let ow = (wd - 1) * cfg.stride.1 + kw + cfg.output_pad.1 - 2 * cfg.pad.1;
        let win = Window::conv(co, oh, ow, (kh, kw), cfg.stride, cfg.pad);
        assert_eq!(
            (win.out_h, win.out_w),
            (h, wd),
            "conv_transpose2d: inconsistent output padding"
        );
        let rows = win.col_rows();
        let p = h * wd;
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * co * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            gemm(rows, ci, p, 1.0, wv, true, &xv[i * ci * p..(i + 1) * ci * p], false, 0.0, &mut cols);
            col2im(&cols, &win, &mut out[i * co * oh * ow..(i + 1) * co * oh * ow]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, oh * ow);
        }
        let v = Tensor::new(&[n, co, oh, ow], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(v, Op::ConvTranspose2d { x, w, b, win }, rg)
    }

    /// Per-sample, per-channel normalisation over the spatial axes, no affine.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let m = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (plane, o) in xv.chunks(m).zip(out.chunks_mut(m)) {
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in o.iter_mut().zip(plane) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(&[n, c, h, w], out);
        let rg = self.rg(&[x]);
        self.push(v, Op::InstanceNorm { x, inv_std }, rg)
    }

    /// `y[n,c,h,w] = w[n,c] * x[n,c,h,w] + b[n,c]`.
    pub fn channel_affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, c, h, wd) = self.value(x).dims4();
        assert_eq!(self.shape(w), &[n, c], "channel_affine: scale shape");
        assert_eq!(self.shape(b), &[n, c], "channel_affine: shift shape");
        let m = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; xv.len()];
        for (k, (plane, o)) in xv.chunks(m).zip(out.chunks_mut(m)).enumerate() {
            for (o, v) in o.iter_mut().zip(plane) {
                *o = wv[k] * v + bv[k];
            }
        }
        let v = Tensor::new(&[n, c, h, wd], out);
        let rg = self.rg(&[x, w, b]);
        self.push(v, Op::ChannelAffine { x, w, b }, rg)
    }

    /// `[N, C] -> [N, C, H, W]` by repetition over the spatial axes.
    pub fn broadcast_spatial(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let (n, c) = self.value(a).dims2();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in av {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let v = Tensor::new(&[n, c, h, w], out);
        let rg = self.rg(&[a]);
        self.push(v, Op::BroadcastSpatial(a), rg)
    }

    /// Concatenate `[N, C_i, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let rest: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], n, "concat_channels: batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat_channels: trailing shape mismatch");
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * rest);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[i * c * rest..(i + 1) * c * rest]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let v = Tensor::new(&shape, out);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatChannels(parts.to_vec()), rg)
    }

    // ---- dense -------------------------------------------------------

    /// `x: [N, In]`, `w: [Out, In]`, `b: [Out]` -> `x wᵀ + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (n, fin) = self.value(x).dims2();
        let (fout, win) = self.value(w).dims2();
        assert_eq!(fin, win, "linear: input width {fin}, weight expects {win}");
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fout, "linear: bias width");
            for row in out.chunks_mut(fout) {
                for (o, b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
        }
        let v = Tensor::new(&[n, fout], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(v, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let v = Tensor::new(&[m, n], out);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = transpose2(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    // ---- contrastive helpers -----------------------------------------

    /// Rows `[I, C]` holding the channel vectors of batch item `item` at the
    /// flattened spatial positions `idx`.
    pub fn gather_locations(&mut self, x: NodeId, item: usize, idx: &[usize]) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(item < n);
        let m = h * w;
        let xv = self.value(x).data();
        let base = item * c * m;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &p in idx {
            assert!(p < m, "gather_locations: position {p} out of {m}");
            for ch in 0..c {
                out.push(xv[base + ch * m + p]);
            }
        }
        let v = Tensor::new(&[idx.len(), c], out);
        let rg = self.rg(&[x]);
        self.push(
            v,
            Op::GatherLocations {
                x,
                item,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Divide every row of `[R, D]` by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (_, d) = self.value(x).dims2();
        let xv = self.value(x);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = nrm.max(eps);
            out.extend(row.iter().map(|v| v / denom));
            norms.push(nrm);
        }
        let v = Tensor::new(xv.shape(), out);
        let rg = self.rg(&[x]);
        self.push(v, Op::L2NormRows { x, norms, eps }, rg)
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &t) in lv.chunks(k).zip(targets) {
            assert!(t < k, "cross_entropy: target {t} out of {k} classes");
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let v = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `w / σ` with `σ = uᵀ W v`, `W` being `w` viewed as
    /// `[shape[0], rest]`. `u` and `v` are treated as constants.
    pub fn spectral_normalize(&mut self, w: NodeId, u: &[f64], v: &[f64]) -> NodeId {
        let t = self.value(w);
        let rows = t.shape()[0];
        let cols = t.numel() / rows;
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        let wv = t.data();
        let mut sigma = 0.0;
        for r in 0..rows {
            let dot: f64 = wv[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum();
            sigma += u[r] * dot;
        }
        let value = if sigma.abs() > 1e-12 {
            t.map(|x| x / sigma)
        } else {
            t.clone()
        };
        let rg = self.rg(&[w]);
        self.push(
            value,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let seed_shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::ones(&seed_shape));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_leaves: self.param_leaves.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Shift(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, t) => self.accumulate(grads, *a, g.zip_map(t, |x, y| x * y)),
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, gx);
            }
            Op::LeakyRelu(a, s) => {
                let gx = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { s * g });
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Op::Softplus(a) => {
                let gx = g.zip_map(self.value(*a), |g, x| g * sigmoid(x));
                self.accumulate(grads, *a, gx);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |g, y| g * y)),
            Op::Log(a) => {
                let gx = g.zip_map(self.value(*a), |g, x| g / x);
                self.accumulate(grads, *a, gx);
            }
            Op::Abs(a) => {
                let gx = g.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, gx);
            }
            Op::Square(a) => {
                let gx = g.zip_map(self.value(*a), |g, x| 2.0 * g * x);
                self.accumulate(grads, *a, gx);
            }
            Op::SumAll(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                let s = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanLastAxis(a) => {
                let shape = self.shape(*a);
                let l = *shape.last().unwrap();
                let mut out = Vec::with_capacity(g.numel() * l);
                for &v in g.data() {
                    out.extend(std::iter::repeat_n(v / l as f64, l));
                }
                self.accumulate(grads, *a, Tensor::new(shape, out));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Conv2d { x, w, b, win, cols } => self.conv2d_backward(g, *x, *w, *b, win, cols, grads),
            Op::ConvTranspose2d { x, w, b, win } => {
                self.conv_transpose2d_backward(g, *x, *w, *b, win, grads)
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = y.dims4();
                let m = h * w;
                let mut out = vec![0.0; y.numel()];
                for (k, ((gp, yp), o)) in g
                    .data()
                    .chunks(m)
                    .zip(y.data().chunks(m))
                    .zip(out.chunks_mut(m))
                    .enumerate()
                {
                    let sg: f64 = gp.iter().sum();
                    let sgy: f64 = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                    let scale = inv_std[k] / m as f64;
                    for ((o, &gv), &yv) in o.iter_mut().zip(gp).zip(yp) {
                        *o = scale * (m as f64 * gv - sg - yv * sgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), out));
            }
            Op::ChannelAffine { x, w, b } => {
                let (n, c, h, wd) = y.dims4();
                let m = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for (k, (o, gp)) in gx.chunks_mut(m).zip(g.data().chunks(m)).enumerate() {
                        for (o, gv) in o.iter_mut().zip(gp) {
                            *o = wv[k] * gv;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape(), gx));
                }
                let mut gw = vec![0.0; n * c];
                let mut gb = vec![0.0; n * c];
                for (k, (gp, xp)) in g.data().chunks(m).zip(xv.chunks(m)).enumerate() {
                    gw[k] = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                    gb[k] = gp.iter().sum();
                }
                self.accumulate(grads, *w, Tensor::new(&[n, c], gw));
                self.accumulate(grads, *b, Tensor::new(&[n, c], gb));
            }
            Op::BroadcastSpatial(a) => {
                let (n, c, h, w) = y.dims4();
                let gx: Vec<f64> = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                self.accumulate(grads, *a, Tensor::new(&[n, c], gx));
            }
            Op::ConcatChannels(parts) => {
                let n = y.shape()[0];
                let rest: usize = y.shape()[2..].iter().product();
                let total_c = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let c = shape[1];
                    if self.requires_grad(p) {
                        let mut out = Vec::with_capacity(n * c * rest);
                        for i in 0..n {
                            let start = (i * total_c + offset) * rest;
                            out.extend_from_slice(&g.data()[start..start + c * rest]);
                        }
                        self.accumulate(grads, p, Tensor::new(&shape, out));
                    }
                    offset += c;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2();
                let fout = y.shape()[1];
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; n * fin];
                    gemm(n, fout, fin, 1.0, g.data(), false, self.value(*w).data(), false, 0.0, &mut gx);
                    self.accumulate(grads, *x, Tensor::new(&[n, fin], gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, 1.0, g.data(), true, self.value(*x).data(), false, 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::new(&[fout, fin], gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; fout];
                    for row in g.data().chunks(fout) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[fout], gb));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = y.shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, self.value(*b).data(), true, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a).data(), true, g.data(), false, 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose2(g)),
            Op::GatherLocations { x, item, idx } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let m = h * w;
                let mut gx = Tensor::zeros(self.shape(*x));
                let base = item * c * m;
                let gd = gx.data_mut();
                for (r, &p) in idx.iter().enumerate() {
                    for ch in 0..c {
                        gd[base + ch * m + p] += g.data()[r * c + ch];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2NormRows { x, norms, eps } => {
                let (_, d) = y.dims2();
                let mut out = Vec::with_capacity(y.numel());
                for ((gr, yr), &nrm) in g.data().chunks(d).zip(y.data().chunks(d)).zip(norms) {
                    if nrm > *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        out.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / nrm));
                    } else {
                        out.extend(gr.iter().map(|gv| gv / eps));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), out));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, k) = self.value(*logits).dims2();
                let s = g.item() / n as f64;
                let mut out = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    out[r * k + t] -= 1.0;
                }
                out.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *logits, Tensor::new(&[n, k], out));
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                if sigma.abs() <= 1e-12 {
                    self.accumulate(grads, *w, g.clone());
                    return;
                }
                let cols = v.len();
                let inner: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                let coef = inner / (sigma * sigma);
                let out: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv / sigma - coef * u[k / cols] * v[k % cols])
                    .collect();
                self.accumulate(grads, *w, Tensor::new(wv.shape(), out));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: &Window,
        cols: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (n, co, _, _) = g.dims4();
        let rows = win.col_rows();
        let p = win.col_cols();
        let img = win.channels * win.height * win.width;
        let wv = self.value(w).data();
        let gd = g.data();
        if self.requires_grad(w) {
            let mut gw = vec![0.0; co * rows];
            for i in 0..n {
                gemm(co, p, rows, 1.0, &gd[i * co * p..(i + 1) * co * p], false, &cols[i * rows * p..(i + 1) * rows * p], true, 1.0, &mut gw);
            }
            self.accumulate(grads, w, Tensor::new(self.shape(w), gw));
        }
        if self.requires_grad(x) {
            let mut gx = vec![0.0; n * img];
            let mut dcols = vec![0.0; rows * p];
            for i in 0..n {
                gemm(rows, co, p, 1.0, wv, true, &gd[i * co * p..(i + 1) * co * p], false, 0.0, &mut dcols);
                col2im(&dcols, win, &mut gx[i * img..(i + 1) * img]);
            }
            self.accumulate(grads, x, Tensor::new(self.shape(x), gx));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(gd, n, co, p));
        }
    }

    fn conv_transpose2d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: &Window,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, co, oh, ow) = g.dims4();
        let (_, ci, h, wd) = self.value(x).dims4();
        let rows = win.col_rows();
        let p = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let mut dcols = vec![0.0; rows * p];
        let mut gx = self.requires_grad(x).then(|| vec![0.0; n * ci * p]);
        let mut gw = self.requires_grad(w).then(|| vec![0.0; ci * rows]);
        for i in 0..n {
            im2col(&gd[i * co * oh * ow..(i + 1) * co * oh * ow], win, &mut dcols);
            if let Some(gx) = gx.as_mut() {
                gemm(ci, rows, p, 1.0, wv, false, &dcols, false, 0.0, &mut gx[i * ci * p..(i + 1) * ci * p]);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(ci, p, rows, 1.0, &xv[i * ci * p..(i + 1) * ci * p], false, &dcols, true, 1.0, gw);
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, Tensor::new(self.shape(x), gx));
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, Tensor::new(self.shape(w), gw));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(gd, n, co, oh * ow));
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, m: usize) {
    assert_eq!(bias.len(), c, "bias length {} for {} channels", bias.len(), c);
    for i in 0..n {
        for (ch, &b) in bias.iter().enumerate() {
            let start = (i * c + ch) * m;
            out[start..start + m].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, m: usize) -> Tensor {
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (i * c + ch) * m;
            *o += g[start..start + m].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], out)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
