use std::collections::HashMap;

use crate::kernels::{self, gemm, ConvGeom, Mat};
use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleItems(Var, Vec<f64>),
    ChannelBias(Var, Var),
    ItemChannelAdd(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Silu(Var),
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Upsample2x(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Reshape(Var),
    Transpose12(Var),
    Embedding {
        ids: Vec<usize>,
        table: Var,
    },
    TokenMean {
        x: Var,
        weights: Vec<f64>,
    },
    WeightedSqErr {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::ScaleItems(a, _) => vec![*a],
            Op::ChannelBias(x, b) | Op::ItemChannelAdd(x, b) => vec![*x, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::GroupNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Silu(x) | Op::Gelu(x) | Op::Upsample2x(x) | Op::Reshape(x) | Op::Transpose12(x) => {
                vec![*x]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Embedding { table, .. } => vec![*table],
            Op::TokenMean { x, .. } => vec![*x],
            Op::WeightedSqErr { pred, .. } => vec![*pred],
            Op::Sum(x) => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations supporting one reverse sweep.
///
/// Parameters are pulled from the borrowed [`ParamStore`] on first use and
/// memoized, so a parameter used twice in one forward pass shares a node.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients indexed by parameter id; parameters not touched by the
    /// forward pass get `None`.
    pub fn into_param_grads(mut self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; num_params];
        for (id, var) in &self.params {
            out[id.index()] = self.grads[var.0].take();
        }
        out
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// A graph with no parameter store; only constants and leaves.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.get(id).clone();
        let v = self.leaf(value);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiplies the `i`-th slice along the leading axis by `factors[i]`.
    pub fn scale_items(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(0), factors.len(), "scale_items: one factor per item");
        let len = x.item_len();
        let mut out = x.clone();
        for (chunk, f) in out.data_mut().chunks_mut(len).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::ScaleItems(a, factors))
    }

    /// Adds `b[c]` along axis 1 of `x` (`[n, c, ...]`).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let c = xv.dim(1);
        assert_eq!(self.value(b).numel(), c, "channel_bias: bias length");
        let spatial: usize = xv.shape()[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        self.push(out, Op::ChannelBias(x, b))
    }

    /// Adds a per-item, per-channel vector `e: [n, c]` to `x: [n, c, ...]`.
    pub fn item_channel_add(&mut self, x: Var, e: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(self.value(e).shape(), &[n, c], "item_channel_add: shape");
        let spatial: usize = xv.shape()[2..].iter().product();
        let ev = self.value(e).data().to_vec();
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let add = ev[i];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        self.push(out, Op::ItemChannelAdd(x, e))
    }

    /// `x @ w^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (out_f, in_f) = (wv.dim(0), wv.dim(1));
        assert_eq!(*xv.shape().last().unwrap(), in_f, "linear: input width");
        let rows = xv.numel() / in_f;
        let mut out = vec![0.0; rows * out_f];
        gemm(
            rows,
            in_f,
            out_f,
            1.0,
            Mat::rm(xv.data(), in_f),
            Mat::tr(wv.data(), in_f),
            0.0,
            &mut out,
            out_f,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), out_f, "linear: bias length");
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let value = Tensor::new(shape, out);
        self.push(value, Op::Linear { x, w, b })
    }

    /// 2-D convolution of `x: [n, cin, h, w]` with `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d: input channels");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * cout * cols];
        let mut buf = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols]
        };
        for ni in 0..n {
            let xi = &xv[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            let patches: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                kernels::im2col(xi, &geom, &mut buf);
                &buf
            };
            gemm(
                cout,
                rows,
                cols,
                1.0,
                Mat::rm(wv, rows),
                Mat::rm(patches, cols),
                0.0,
                &mut out[ni * cout * cols..(ni + 1) * cout * cols],
                cols,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(cols).enumerate() {
                let bc = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out);
        self.push(value, Op::Conv2d { x, w, b, geom })
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible by {groups} groups");
        let spatial: usize = xv.shape()[2..].iter().product();
        let (means, rstds) = kernels::group_stats(xv.data(), n, c, spatial, groups, eps);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let cpg = c / groups;
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let (ni, ci) = (i / c, i % c);
            let gi = ni * groups + ci / cpg;
            let (m, r) = (means[gi], rstds[gi]);
            for v in chunk.iter_mut() {
                *v = (*v - m) * r * gv[ci] + bv[ci];
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let rows = xv.numel() / d;
        let (means, rstds) = kernels::group_stats(xv.data(), rows, 1, d, 1, eps);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - means[r]) * rstds[r] * gv[j] + bv[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [b, t, c]`, `k` and `v: [b, s, c]`; heads split the channel axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (b, t, c) = dims3(self.value(q));
        let (bk, s, ck) = dims3(self.value(k));
        assert_eq!((b, c), (bk, ck), "attention: q/k shapes");
        assert_eq!(self.value(v).shape(), &[b, s, c], "attention: v shape");
        assert_eq!(c % heads, 0, "attention: channels not divisible by heads");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * heads * t * s];
        let mut out = vec![0.0; b * t * c];
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * t * s..(bi * heads + h + 1) * t * s];
                let q_off = bi * t * c + h * dh;
                let kv_off = bi * s * c + h * dh;
                gemm(
                    t,
                    dh,
                    s,
                    scale,
                    Mat::strided(&qv[q_off..], c, 1),
                    Mat::strided(&kv[kv_off..], 1, c),
                    0.0,
                    p,
                    s,
                );
                kernels::softmax_rows(p, s);
                gemm(
                    t,
                    s,
                    dh,
                    1.0,
                    Mat::rm(p, s),
                    Mat::strided(&vv[kv_off..], c, 1),
                    0.0,
                    &mut out[q_off..],
                    c,
                );
            }
        }
        let value = Tensor::new(vec![b, t, c], out);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out);
        self.push(value, Op::Upsample2x(x))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), bv.rank(), "concat: rank mismatch");
        for d in 0..av.rank() {
            if d != axis {
                assert_eq!(av.dim(d), bv.dim(d), "concat: shape mismatch on axis {d}");
            }
        }
        let outer: usize = av.shape()[..axis].iter().product();
        let inner: usize = av.shape()[axis + 1..].iter().product();
        let (la, lb) = (av.dim(axis) * inner, bv.dim(axis) * inner);
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for o in 0..outer {
            out.extend_from_slice(&av.data()[o * la..(o + 1) * la]);
            out.extend_from_slice(&bv.data()[o * lb..(o + 1) * lb]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] += bv.dim(axis);
        let value = Tensor::new(shape, out);
        self.push(value, Op::Concat { a, b, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, Op::Reshape(x))
    }

    /// `[n, a, b] -> [n, b, a]`.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let value = transpose12(self.value(x));
        self.push(value, Op::Transpose12(x))
    }

    /// `[n, c, h, w] -> [n, h*w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let flat = self.reshape(x, &[n, c, h * w]);
        self.transpose12(flat)
    }

    /// `[n, h*w, c] -> [n, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, l, c) = dims3(self.value(x));
        assert_eq!(l, h * w, "from_tokens: token count");
        let t = self.transpose12(x);
        self.reshape(t, &[n, c, h, w])
    }

    /// Row lookup into `table: [vocab, d]`; result has shape `shape + [d]`.
    pub fn embedding(&mut self, ids: Vec<usize>, shape: &[usize], table: Var) -> Var {
        let tv = self.value(table);
        let (vocab, d) = (tv.dim(0), tv.dim(1));
        assert_eq!(shape.iter().product::<usize>(), ids.len(), "embedding: id count");
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            assert!(id < vocab, "embedding: id {id} out of range {vocab}");
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut full = shape.to_vec();
        full.push(d);
        let value = Tensor::new(full, out);
        self.push(value, Op::Embedding { ids, table })
    }

    /// Weighted sum over the token axis of `[b, l, d]` with fixed weights `[b*l]`.
    pub fn token_mean(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let (b, l, d) = dims3(self.value(x));
        assert_eq!(weights.len(), b * l, "token_mean: weight count");
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for li in 0..l {
                let wgt = weights[bi * l + li];
                let row = &xv[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += wgt * v;
                }
            }
        }
        let value = Tensor::new(vec![b, d], out);
        self.push(value, Op::TokenMean { x, weights })
    }

    /// `(1/n) * sum_i weights[i] * ||pred_i - target_i||^2` over the leading axis.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "weighted_sq_err: shape mismatch");
        let n = pv.dim(0);
        assert_eq!(weights.len(), n, "weighted_sq_err: one weight per item");
        let len = pv.item_len();
        let mut total = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let p = &pv.data()[i * len..(i + 1) * len];
            let t = &target.data()[i * len..(i + 1) * len];
            let se: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w * se;
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).numel(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(&node.op, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || g.mul(self.value(*b)));
                self.accum(grads, *b, || g.mul(self.value(*a)));
            }
            Op::Scale(a, f) => self.accum(grads, *a, || g.scale(*f)),
            Op::ScaleItems(a, factors) => self.accum(grads, *a, || {
                let len = g.item_len();
                let mut out = g.clone();
                for (chunk, f) in out.data_mut().chunks_mut(len).zip(factors) {
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                out
            }),
            Op::ChannelBias(x, b) => {
                self.accum(grads, *x, || g.clone());
                self.accum(grads, *b, || {
                    let c = g.dim(1);
                    let spatial: usize = g.shape()[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(spatial).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    Tensor::new(self.value(*b).shape().to_vec(), gb)
                });
            }
            Op::ItemChannelAdd(x, e) => {
                self.accum(grads, *x, || g.clone());
                self.accum(grads, *e, || {
                    let spatial: usize = g.shape()[2..].iter().product();
                    let ge = g.data().chunks(spatial).map(|c| c.iter().sum()).collect();
                    Tensor::new(self.value(*e).shape().to_vec(), ge)
                });
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (out_f, in_f) = (wv.dim(0), wv.dim(1));
                let rows = g.numel() / out_f;
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; rows * in_f];
                    gemm(
                        rows,
                        out_f,
                        in_f,
                        1.0,
                        Mat::rm(g.data(), out_f),
                        Mat::rm(wv.data(), in_f),
                        0.0,
                        &mut dx,
                        in_f,
                    );
                    Tensor::new(self.value(*x).shape().to_vec(), dx)
                });
                self.accum(grads, *w, || {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(
                        out_f,
                        rows,
                        in_f,
                        1.0,
                        Mat::tr(g.data(), out_f),
                        Mat::rm(self.value(*x).data(), in_f),
                        0.0,
                        &mut dw,
                        in_f,
                    );
                    Tensor::new(vec![out_f, in_f], dw)
                });
                if let Some(b) = b {
                    self.accum(grads, *b, || {
                        let mut db = vec![0.0; out_f];
                        for row in g.data().chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        Tensor::new(vec![out_f], db)
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let spatial: usize = xv.shape()[2..].iter().product();
                let gv = self.value(*gamma).data();
                let cpg = c / groups;
                let count = (cpg * spatial) as f64;
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let sidx = ni * groups + gi;
                        let (m, r) = (means[sidx], rstds[sidx]);
                        let start = (ni * c + gi * cpg) * spatial;
                        let end = start + cpg * spatial;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in start..end {
                            let ci = (i / spatial) % c;
                            let xhat = (xv.data()[i] - m) * r;
                            let dxhat = g.data()[i] * gv[ci];
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                            dgamma[ci] += g.data()[i] * xhat;
                            dbeta[ci] += g.data()[i];
                        }
                        let (m1, m2) = (s1 / count, s2 / count);
                        for i in start..end {
                            let ci = (i / spatial) % c;
                            let xhat = (xv.data()[i] - m) * r;
                            let dxhat = g.data()[i] * gv[ci];
                            dx[i] = r * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                self.accum(grads, *x, || Tensor::new(xv.shape().to_vec(), dx));
                self.accum(grads, *gamma, || Tensor::new(vec![c], dgamma));
                self.accum(grads, *beta, || Tensor::new(vec![c], dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, (xrow, grow)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let (m, rs) = (means[r], rstds[r]);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let xhat = (xrow[j] - m) * rs;
                        let dxhat = grow[j] * gv[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    for j in 0..d {
                        let xhat = (xrow[j] - m) * rs;
                        dx[r * d + j] = rs * (grow[j] * gv[j] - m1 - xhat * m2);
                    }
                }
                self.accum(grads, *x, || Tensor::new(xv.shape().to_vec(), dx));
                self.accum(grads, *gamma, || Tensor::new(vec![d], dgamma));
                self.accum(grads, *beta, || Tensor::new(vec![d], dbeta));
            }
            Op::Silu(x) => self.accum(grads, *x, || {
                self.value(*x).zip_map(g, |v, gg| {
                    let s = kernels::sigmoid(v);
                    gg * s * (1.0 + v * (1.0 - s))
                })
            }),
            Op::Gelu(x) => self.accum(grads, *x, || {
                self.value(*x).zip_map(g, |v, gg| gg * kernels::gelu_grad(v))
            }),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Upsample2x(x) => self.accum(grads, *x, || {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                Tensor::new(vec![n, c, h, w], dx)
            }),
            Op::Concat { a, b, axis } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let outer: usize = av.shape()[..*axis].iter().product();
                let inner: usize = av.shape()[axis + 1..].iter().product();
                let (la, lb) = (av.dim(*axis) * inner, bv.dim(*axis) * inner);
                self.accum(grads, *a, || {
                    let mut ga = Vec::with_capacity(av.numel());
                    for o in 0..outer {
                        ga.extend_from_slice(&g.data()[o * (la + lb)..o * (la + lb) + la]);
                    }
                    Tensor::new(av.shape().to_vec(), ga)
                });
                self.accum(grads, *b, || {
                    let mut gb = Vec::with_capacity(bv.numel());
                    for o in 0..outer {
                        gb.extend_from_slice(&g.data()[o * (la + lb) + la..(o + 1) * (la + lb)]);
                    }
                    Tensor::new(bv.shape().to_vec(), gb)
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, || g.clone().reshape(self.value(*x).shape()))
            }
            Op::Transpose12(x) => self.accum(grads, *x, || transpose12(g)),
            Op::Embedding { ids, table } => self.accum(grads, *table, || {
                let tv = self.value(*table);
                let d = tv.dim(1);
                let mut gt = Tensor::zeros(tv.shape());
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    gt.data_mut()[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(o, r)| *o += r);
                }
                gt
            }),
            Op::TokenMean { x, weights } => self.accum(grads, *x, || {
                let (b, l, d) = dims3(self.value(*x));
                let mut gx = vec![0.0; b * l * d];
                for bi in 0..b {
                    for li in 0..l {
                        let wgt = weights[bi * l + li];
                        let dst = &mut gx[(bi * l + li) * d..(bi * l + li + 1) * d];
                        for (o, gg) in dst.iter_mut().zip(&g.data()[bi * d..(bi + 1) * d]) {
                            *o = wgt * gg;
                        }
                    }
                }
                Tensor::new(vec![b, l, d], gx)
            }),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            } => self.accum(grads, *pred, || {
                let pv = self.value(*pred);
                let n = pv.dim(0) as f64;
                let len = pv.item_len();
                let up = g.data()[0];
                let mut out = pv.sub(target);
                for (chunk, w) in out.data_mut().chunks_mut(len).zip(weights) {
                    chunk.iter_mut().for_each(|v| *v *= 2.0 * w * up / n);
                }
                out
            }),
            Op::Sum(x) => {
                let up = g.data()[0];
                self.accum(grads, *x, || Tensor::full(self.value(*x).shape(), up));
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.wants(v) {
            return;
        }
        let contrib = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, cout, _, _) = g.dims4();
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x);
        let wv = self.value(w).data();
        let in_len = geom.cin * geom.h * geom.w;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dw = vec![0.0; cout * rows];
        let mut dx = if want_x { vec![0.0; xv.numel()] } else { Vec::new() };
        let mut buf = vec![0.0; rows * cols];
        for ni in 0..n {
            let gi = &g.data()[ni * cout * cols..(ni + 1) * cout * cols];
            if want_w {
                let xi = &xv.data()[ni * in_len..(ni + 1) * in_len];
                let patches: &[f64] = if geom.is_pointwise() {
                    xi
                } else {
                    kernels::im2col(xi, geom, &mut buf);
                    &buf
                };
                gemm(
                    cout,
                    cols,
                    rows,
                    1.0,
                    Mat::rm(gi, cols),
                    Mat::tr(patches, cols),
                    1.0,
                    &mut dw,
                    rows,
                );
            }
            if want_x {
                let dxi = &mut dx[ni * in_len..(ni + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(rows, cout, cols, 1.0, Mat::tr(wv, rows), Mat::rm(gi, cols), 0.0, dxi, cols);
                } else {
                    gemm(
                        rows,
                        cout,
                        cols,
                        1.0,
                        Mat::tr(wv, rows),
                        Mat::rm(gi, cols),
                        0.0,
                        &mut buf,
                        cols,
                    );
                    kernels::col2im(&buf, geom, dxi);
                }
            }
        }
        if want_x {
            self.accum(grads, x, || Tensor::new(xv.shape().to_vec(), dx));
        }
        if want_w {
            self.accum(grads, w, || Tensor::new(self.value(w).shape().to_vec(), dw));
        }
        if let Some(b) = b {
            self.accum(grads, b, || {
                let mut db = vec![0.0; cout];
                for (i, chunk) in g.data().chunks(cols).enumerate() {
                    db[i % cout] += chunk.iter().sum::<f64>();
                }
                Tensor::new(vec![cout], db)
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (b, t, c) = dims3(self.value(q));
        let s = self.value(k).dim(1);
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; b * t * c];
        let mut dk = vec![0.0; b * s * c];
        let mut dv = vec![0.0; b * s * c];
        let mut dp = vec![0.0; t * s];
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * t * s..(bi * heads + h + 1) * t * s];
                let q_off = bi * t * c + h * dh;
                let kv_off = bi * s * c + h * dh;
                let go = &g.data()[q_off..];
                gemm(
                    s,
                    t,
                    dh,
                    1.0,
                    Mat::tr(p, s),
                    Mat::strided(go, c, 1),
                    1.0,
                    &mut dv[kv_off..],
                    c,
                );
                gemm(
                    t,
                    dh,
                    s,
                    1.0,
                    Mat::strided(go, c, 1),
                    Mat::strided(&vv[kv_off..], 1, c),
                    0.0,
                    &mut dp,
                    s,
                );
                for (drow, prow) in dp.chunks_mut(s).zip(p.chunks(s)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (d, pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                gemm(
                    t,
                    s,
                    dh,
                    1.0,
                    Mat::rm(&dp, s),
                    Mat::strided(&kv[kv_off..], c, 1),
                    1.0,
                    &mut dq[q_off..],
                    c,
                );
                gemm(
                    s,
                    t,
                    dh,
                    1.0,
                    Mat::tr(&dp, s),
                    Mat::strided(&qv[q_off..], c, 1),
                    1.0,
                    &mut dk[kv_off..],
                    c,
                );
            }
        }
        self.accum(grads, q, || Tensor::new(vec![b, t, c], dq));
        self.accum(grads, k, || Tensor::new(vec![b, s, c], dk));
        self.accum(grads, v, || Tensor::new(vec![b, s, c], dv));
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.rank(), 3, "expected rank-3 tensor, got {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2))
}

fn transpose12(t: &Tensor) -> Tensor {
    let (n, a, b) = dims3(t);
    let mut out = vec![0.0; n * a * b];
    for ni in 0..n {
        let src = &t.data()[ni * a * b..(ni + 1) * a * b];
        let dst = &mut out[ni * a * b..(ni + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    Tensor::new(vec![n, b, a], out)
}
