//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough information to propagate gradients back to its inputs. Nodes
//! are only differentiated when at least one input leads back to a trainable
//! parameter or a [`Graph::variable`] leaf, so running a frozen model through
//! a graph costs little more than a plain forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

use crate::nn::ParamStore;

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies one parameter tensor of one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

/// Precomputed sampling taps for a bilinear resize (half-pixel centers, no
/// corner alignment).
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }

    /// Interpolation weight matrix along the height axis, `[out_h, in_h]`.
    pub fn row_matrix(&self) -> Array2<f64> {
        taps_matrix(&self.rows, self.in_h)
    }

    /// Interpolation weight matrix along the width axis, `[out_w, in_w]`.
    pub fn col_matrix(&self) -> Array2<f64> {
        taps_matrix(&self.cols, self.in_w)
    }

    fn apply(&self, x: &[f64], planes: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * ih * iw..(p + 1) * ih * iw];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (i, &(r0, r1, lr)) in self.rows.iter().enumerate() {
                for (j, &(c0, c1, lc)) in self.cols.iter().enumerate() {
                    let top = src[r0 * iw + c0] * (1.0 - lc) + src[r0 * iw + c1] * lc;
                    let bot = src[r1 * iw + c0] * (1.0 - lc) + src[r1 * iw + c1] * lc;
                    dst[i * ow + j] = top * (1.0 - lr) + bot * lr;
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64], planes: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut out = vec![0.0; planes * ih * iw];
        for p in 0..planes {
            let src = &g[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
            for (i, &(r0, r1, lr)) in self.rows.iter().enumerate() {
                for (j, &(c0, c1, lc)) in self.cols.iter().enumerate() {
                    let v = src[i * ow + j];
                    dst[r0 * iw + c0] += v * (1.0 - lr) * (1.0 - lc);
                    dst[r0 * iw + c1] += v * (1.0 - lr) * lc;
                    dst[r1 * iw + c0] += v * lr * (1.0 - lc);
                    dst[r1 * iw + c1] += v * lr * lc;
                }
            }
        }
        out
    }
}

fn taps_matrix(taps: &[(usize, usize, f64)], input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((taps.len(), input));
    for (o, &(i0, i1, l)) in taps.iter().enumerate() {
        m[[o, i0]] += 1.0 - l;
        m[[o, i1]] += l;
    }
    m
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    Upsample(Var, usize),
    Bilinear(Var, Arc<BilinearPlan>),
    Silu(Var),
    Exp(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var),
    Index(Var, usize),
    L2Rows(Var, Vec<f64>),
    GroupNorm(Var, usize, Vec<f64>),
    BatchNorm(Var, Vec<f64>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamKey, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    /// Gradients of the parameters of `store`, indexed by parameter position.
    pub fn for_store(&self, store: &ParamStore) -> impl Iterator<Item = (usize, &Tensor)> + '_ {
        let uid = store.uid();
        self.params
            .iter()
            .filter(move |(k, _)| k.store == uid)
            .map(|(k, t)| (k.index, t))
    }

    /// Gradient of a [`Graph::variable`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn sum_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn to_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("matrix operand must be 2-D")
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let rows = g.c * g.k * g.k;
    let cols = g.n * g.ho * g.wo;
    let mut out = vec![0.0; rows * cols];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for b in 0..g.n {
                    let plane = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let base = (b * g.ho + oh) * g.wo;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[base + ow] = row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

fn col2im(cols: &Array2<f64>, g: &ConvGeom) -> Vec<f64> {
    let ncols = g.n * g.ho * g.wo;
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let row_src = &src[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let off = (b * g.c + ci) * g.h * g.w;
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.ho + oh) * g.wo;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dx[off + ih as usize * g.w + iw as usize] += row_src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Layout helper: `[o, n*ho*wo]` matrix <-> `[n, o, ho, wo]` tensor.
fn channels_first_to_batch(m: &[f64], n: usize, o: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o * hw];
    for oc in 0..o {
        for b in 0..n {
            let src = &m[oc * n * hw + b * hw..oc * n * hw + (b + 1) * hw];
            out[(b * o + oc) * hw..(b * o + oc + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn batch_to_channels_first(t: &[f64], n: usize, o: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o * hw];
    for b in 0..n {
        for oc in 0..o {
            let src = &t[(b * o + oc) * hw..(b * o + oc + 1) * hw];
            out[oc * n * hw + b * hw..oc * n * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// Normalizes groups of elements given by `index(group, i)` to zero mean and
/// unit variance; returns the normalized data and per-group inverse std.
fn normalize_groups(
    x: &[f64],
    groups: usize,
    size: usize,
    eps: f64,
    index: impl Fn(usize, usize) -> usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(groups);
    for gi in 0..groups {
        let mean = (0..size).map(|i| x[index(gi, i)]).sum::<f64>() / size as f64;
        let var = (0..size)
            .map(|i| {
                let d = x[index(gi, i)] - mean;
                d * d
            })
            .sum::<f64>()
            / size as f64;
        let is = 1.0 / (var + eps).sqrt();
        for i in 0..size {
            let j = index(gi, i);
            out[j] = (x[j] - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

fn normalize_groups_backward(
    g: &[f64],
    xhat: &[f64],
    inv: &[f64],
    size: usize,
    index: impl Fn(usize, usize) -> usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    let m = size as f64;
    for (gi, &is) in inv.iter().enumerate() {
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for i in 0..size {
            let j = index(gi, i);
            sg += g[j];
            sgx += g[j] * xhat[j];
        }
        for i in 0..size {
            let j = index(gi, i);
            dx[j] = is / m * (m * g[j] - sg - xhat[j] * sgx);
        }
    }
    dx
}

/// Batch statistics produced by [`Graph::batch_norm`] in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `store` bound after this call receive gradients.
    pub fn train(&mut self, store: &ParamStore) {
        if !self.trainable.contains(&store.uid()) {
            self.trainable.push(store.uid());
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let g = |v: &Var| self.nodes[v.0].grad;
        match op {
            Op::Leaf | Op::Param(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => g(a) || g(b),
            Op::Conv2d { x, w, b, .. } => g(x) || g(w) || b.as_ref().is_some_and(g),
            Op::Concat(vs, _) => vs.iter().any(g),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Upsample(a, _)
            | Op::Bilinear(a, _)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Slice(a, _, _)
            | Op::Softmax(a)
            | Op::Index(a, _)
            | Op::L2Rows(a, _)
            | Op::GroupNorm(a, _, _)
            | Op::BatchNorm(a, _) => g(a),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Tensor::from_elem(IxDyn(&[]), v))
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds parameter `index` of `store`. It is differentiable only when the
    /// store was registered with [`Graph::train`].
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let grad = self.trainable.contains(&store.uid());
        let key = ParamKey {
            store: store.uid(),
            index,
        };
        self.nodes.push(Node {
            value: store.shared(index),
            op: if grad { Op::Param(key) } else { Op::Leaf },
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a tensor of shape {:?}", t.shape());
        t.iter().next().copied().unwrap_or(0.0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = to_matrix(self.value(a)).dot(&to_matrix(self.value(b)));
        self.push(v.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = to_matrix(self.value(a))
            .t()
            .as_standard_layout()
            .into_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    /// 2-D convolution over `[n, c, h, w]` with a square `[o, c, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [n, c, h, w], got {xs:?}");
        assert_eq!(
            ws.len(),
            4,
            "conv2d kernel must be [o, c, k, k], got {ws:?}"
        );
        assert_eq!(
            xs[1], ws[1],
            "conv2d channel mismatch: input {xs:?}, kernel {ws:?}"
        );
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let k = ws[2];
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let o = ws[0];
        let cols = im2col(&contiguous(self.value(x)), &geom);
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((o, geom.c * k * k))
            .expect("kernel reshape");
        let m = wmat.dot(&cols);
        let hw = geom.ho * geom.wo;
        let mut out = channels_first_to_batch(m.as_slice().expect("dot output"), geom.n, o, hw);
        if let Some(b) = b {
            let bias = contiguous(self.value(b)).into_owned();
            for bi in 0..geom.n {
                for (oc, bv) in bias.iter().enumerate() {
                    for v in &mut out[(bi * o + oc) * hw..(bi * o + oc + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let value = from_vec(&[geom.n, o, geom.ho, geom.wo], out);
        // the unfolded input is only needed for the kernel gradient
        let cols = if self.nodes[w.0].grad {
            cols
        } else {
            Array2::zeros((0, 0))
        };
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// Nearest-neighbour upsampling of `[n, c, h, w]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let src = contiguous(self.value(x));
        let (oh, ow) = (h * factor, w * factor);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[p * oh * ow + i * ow + j] = src[p * h * w + (i / factor) * w + j / factor];
                }
            }
        }
        let value = from_vec(&[s[0], s[1], oh, ow], out);
        self.push(value, Op::Upsample(x, factor))
    }

    /// Bilinear resize of `[n, c, h, w]` according to `plan`.
    pub fn bilinear(&mut self, x: Var, plan: Arc<BilinearPlan>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(
            (s[2], s[3]),
            (plan.in_h, plan.in_w),
            "bilinear plan mismatch"
        );
        let out = plan.apply(&contiguous(self.value(x)), s[0] * s[1]);
        let value = from_vec(&[s[0], s[1], plan.out_h, plan.out_w], out);
        self.push(value, Op::Bilinear(x, plan))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = self.value(x).sum_axis(Axis(axis));
        self.push(v, Op::SumAxis(x, axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let data = contiguous(self.value(x)).into_owned();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            self.shape(x)
        );
        self.push(from_vec(shape, data), Op::Reshape(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes agree");
        let v = v.as_standard_layout().into_owned();
        self.push(v, Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::Slice(x, axis, start))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().expect("softmax needs at least one axis");
        let mut data = contiguous(self.value(x)).into_owned();
        for row in data.chunks_mut(last) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(from_vec(&shape, data), Op::Softmax(x))
    }

    /// Element at flat (row-major) position `i`, as a 0-d tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let v = contiguous(self.value(x))[i];
        self.push(Tensor::from_elem(IxDyn(&[]), v), Op::Index(x, i))
    }

    /// Scales every slice along axis 0 to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let mut data = contiguous(self.value(x)).into_owned();
        let size = data.len() / rows.max(1);
        let mut norms = Vec::with_capacity(rows);
        for row in data.chunks_mut(size.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(from_vec(&shape, data), Op::L2Rows(x, norms))
    }

    /// Group normalization (no affine) of `[n, c, ...]` with `groups`
    /// contiguous channel groups per sample.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(
            shape.len() >= 2 && shape[1].is_multiple_of(groups),
            "group_norm {shape:?}/{groups}"
        );
        let data = contiguous(self.value(x));
        let size = data.len() / (shape[0] * groups);
        let (out, inv) = normalize_groups(&data, shape[0] * groups, size, eps, |g, i| g * size + i);
        self.push(from_vec(&shape, out), Op::GroupNorm(x, size, inv))
    }

    /// Batch normalization (no affine) of `[n, c, ...]` with batch statistics.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, BatchStats) {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let data = contiguous(self.value(x)).into_owned();
        let size = n * hw;
        let index = move |ch: usize, i: usize| (i / hw) * c * hw + ch * hw + i % hw;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let m = (0..size).map(|i| data[index(ch, i)]).sum::<f64>() / size as f64;
            mean[ch] = m;
            var[ch] = (0..size)
                .map(|i| (data[index(ch, i)] - m).powi(2))
                .sum::<f64>()
                / size as f64;
        }
        let (out, inv) = normalize_groups(&data, c, size, eps, index);
        let v = self.push(from_vec(&shape, out), Op::BatchNorm(x, inv));
        (
            v,
            BatchStats {
                mean,
                var,
                count: size,
            },
        )
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::default();
        if !self.nodes[loss.0].grad {
            return out;
        }
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(key) => match out.params.get_mut(key) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.params.insert(*key, g);
                    }
                },
                Op::Add(a, b) => {
                    let ga = sum_to_shape(g.clone(), self.shape(*a));
                    let gb = sum_to_shape(g, self.shape(*b));
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = sum_to_shape(g.clone(), self.shape(*a));
                    let gb = sum_to_shape(-g, self.shape(*b));
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].grad {
                        let ga = sum_to_shape(&g * self.value(*b), self.shape(*a));
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].grad {
                        let gb = sum_to_shape(&g * self.value(*a), self.shape(*b));
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, *a, g * *s),
                Op::MatMul(a, b) => {
                    let gm = to_matrix(&g);
                    if self.nodes[a.0].grad {
                        let ga = gm.dot(&to_matrix(self.value(*b)).t());
                        self.accumulate(&mut grads, *a, ga.into_dyn());
                    }
                    if self.nodes[b.0].grad {
                        let gb = to_matrix(self.value(*a)).t().dot(&gm);
                        self.accumulate(&mut grads, *b, gb.into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    let ga = to_matrix(&g).t().as_standard_layout().into_owned();
                    self.accumulate(&mut grads, *a, ga.into_dyn());
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let o = self.shape(*w)[0];
                    let hw = geom.ho * geom.wo;
                    let gflat = contiguous(&g);
                    let gm = Array2::from_shape_vec(
                        (o, geom.n * hw),
                        batch_to_channels_first(&gflat, geom.n, o, hw),
                    )
                    .expect("grad matrix");
                    if self.nodes[w.0].grad {
                        let gw = gm.dot(&cols.t());
                        let gw = gw
                            .into_shape_with_order(IxDyn(self.shape(*w)))
                            .expect("kernel");
                        self.accumulate(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].grad {
                            let gb = gm.sum_axis(Axis(1));
                            self.accumulate(&mut grads, *b, gb.into_dyn());
                        }
                    }
                    if self.nodes[x.0].grad {
                        let wmat = self
                            .value(*w)
                            .view()
                            .into_shape_with_order((o, geom.c * geom.k * geom.k))
                            .expect("kernel reshape");
                        let dcols = wmat.t().dot(&gm);
                        let dx = col2im(&dcols, geom);
                        self.accumulate(&mut grads, *x, from_vec(self.shape(*x), dx));
                    }
                }
                Op::Upsample(x, f) => {
                    let s = self.shape(*x).to_vec();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h * f, w * f);
                    let src = contiguous(&g);
                    let mut dx = vec![0.0; s.iter().product()];
                    for p in 0..s[0] * s[1] {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[p * h * w + (i / f) * w + j / f] +=
                                    src[p * oh * ow + i * ow + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, from_vec(&s, dx));
                }
                Op::Bilinear(x, plan) => {
                    let s = self.shape(*x).to_vec();
                    let dx = plan.adjoint(&contiguous(&g), s[0] * s[1]);
                    self.accumulate(&mut grads, *x, from_vec(&s, dx));
                }
                Op::Silu(x) => {
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &a| {
                            let s = sigmoid(a);
                            *d *= s * (1.0 + a * (1.0 - s));
                        });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = g * &*node.value;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    let dx = Tensor::from_elem(self.value(*x).raw_dim(), s);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SumAxis(x, axis) => {
                    let dx = g
                        .insert_axis(Axis(*axis))
                        .broadcast(self.value(*x).raw_dim())
                        .expect("broadcast back")
                        .to_owned();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let data = contiguous(&g).into_owned();
                    self.accumulate(&mut grads, *x, from_vec(self.shape(*x), data));
                }
                Op::Concat(xs, axis) => {
                    let mut start = 0;
                    for x in xs {
                        let len = self.shape(*x)[*axis];
                        if self.nodes[x.0].grad {
                            let part = g
                                .slice_axis(Axis(*axis), Slice::from(start..start + len))
                                .as_standard_layout()
                                .into_owned();
                            self.accumulate(&mut grads, *x, part);
                        }
                        start += len;
                    }
                }
                Op::Slice(x, axis, start) => {
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    let len = g.shape()[*axis];
                    dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(&g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let shape = self.shape(*x).to_vec();
                    let last = *shape.last().unwrap_or(&1);
                    let y = contiguous(&node.value);
                    let gs = contiguous(&g);
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in
                        y.chunks(last).zip(gs.chunks(last)).zip(dx.chunks_mut(last))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(&mut grads, *x, from_vec(&shape, dx));
                }
                Op::Index(x, i) => {
                    let shape = self.shape(*x).to_vec();
                    let mut dx = vec![0.0; shape.iter().product()];
                    dx[*i] = g.iter().next().copied().unwrap_or(0.0);
                    self.accumulate(&mut grads, *x, from_vec(&shape, dx));
                }
                Op::L2Rows(x, norms) => {
                    let shape = self.shape(*x).to_vec();
                    let y = contiguous(&node.value);
                    let gs = contiguous(&g);
                    let size = y.len() / norms.len().max(1);
                    let mut dx = vec![0.0; y.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let span = r * size..(r + 1) * size;
                        let dot: f64 = y[span.clone()]
                            .iter()
                            .zip(&gs[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in span {
                            dx[j] = (gs[j] - y[j] * dot) / n;
                        }
                    }
                    self.accumulate(&mut grads, *x, from_vec(&shape, dx));
                }
                Op::GroupNorm(x, size, inv) => {
                    let size = *size;
                    let dx = normalize_groups_backward(
                        &contiguous(&g),
                        &contiguous(&node.value),
                        inv,
                        size,
                        |gi, i| gi * size + i,
                    );
                    self.accumulate(&mut grads, *x, from_vec(self.shape(*x), dx));
                }
                Op::BatchNorm(x, inv) => {
                    let shape = self.shape(*x).to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let hw: usize = shape[2..].iter().product();
                    let dx = normalize_groups_backward(
                        &contiguous(&g),
                        &contiguous(&node.value),
                        inv,
                        n * hw,
                        |ch, i| (i / hw) * c * hw + ch * hw + i % hw,
                    );
                    self.accumulate(&mut grads, *x, from_vec(&shape, dx));
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build(x))/dx against the tape.
    pub(crate) fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = random(shape, seed);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.wrt(x).expect("input gradient").clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-5, "element {i}: analytic {a} vs numeric {numeric}");
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = g.constant(random(g.shape(y), seed));
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_and_broadcast() {
        check(&[2, 3], 1, |g, x| {
            let b = g.constant(random(&[3], 9));
            let s = g.add(x, b);
            let m = g.mul(s, x);
            let e = g.exp(m);
            let d = g.sub(e, x);
            let t = g.silu(d);
            weighted_sum(g, t, 2)
        });
        // gradient flowing into the broadcast operand
        check(&[3], 3, |g, x| {
            let a = g.constant(random(&[4, 3], 4));
            let m = g.mul(a, x);
            weighted_sum(g, m, 5)
        });
    }

    #[test]
    fn matmul_transpose_softmax() {
        check(&[3, 4], 6, |g, x| {
            let b = g.constant(random(&[4, 2], 7));
            let m = g.matmul(x, b);
            let t = g.transpose(m);
            let s = g.softmax(t);
            weighted_sum(g, s, 8)
        });
        check(&[4, 2], 6, |g, x| {
            let a = g.constant(random(&[3, 4], 7));
            let m = g.matmul(a, x);
            weighted_sum(g, m, 8)
        });
    }

    #[test]
    fn conv_gradients() {
        check(&[2, 3, 5, 5], 10, |g, x| {
            let w = g.constant(random(&[4, 3, 3, 3], 11));
            let b = g.constant(random(&[4], 12));
            let y = g.conv2d(x, w, Some(b), 2, 1);
            weighted_sum(g, y, 13)
        });
        check(&[4, 3, 3, 3], 14, |g, w| {
            let x = g.constant(random(&[2, 3, 5, 5], 15));
            let y = g.conv2d(x, w, None, 1, 1);
            weighted_sum(g, y, 16)
        });
        check(&[4], 17, |g, b| {
            let x = g.constant(random(&[2, 3, 4, 4], 18));
            let w = g.constant(random(&[4, 3, 1, 1], 19));
            let y = g.conv2d(x, w, Some(b), 1, 0);
            weighted_sum(g, y, 20)
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = random(&[1, 2, 4, 4], 30);
        let w = random(&[3, 2, 3, 3], 31);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 1, 1);
        let y = g.value(y).clone();
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (ii, jj) = (i as isize + ki - 1, j as isize + kj - 1);
                                if (0..4).contains(&ii) && (0..4).contains(&jj) {
                                    acc += x[[0, c, ii as usize, jj as usize]]
                                        * w[[o, c, ki as usize, kj as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, o, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resampling_gradients() {
        check(&[1, 2, 3, 3], 21, |g, x| {
            let y = g.upsample(x, 2);
            weighted_sum(g, y, 22)
        });
        let plan = Arc::new(BilinearPlan::new(3, 5, 7, 4));
        check(&[2, 1, 3, 5], 23, move |g, x| {
            let y = g.bilinear(x, plan.clone());
            weighted_sum(g, y, 24)
        });
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let plan = BilinearPlan::new(4, 4, 4, 4);
        let x = random(&[1, 1, 4, 4], 3);
        let y = plan.apply(x.as_slice().unwrap(), 1);
        assert_eq!(y, x.as_slice().unwrap());
        let up = BilinearPlan::new(2, 3, 8, 8);
        let y = up.apply(&[0.5; 6], 1);
        assert!(y.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn reductions_and_shapes() {
        check(&[2, 3, 2], 25, |g, x| {
            let s = g.sum_axis(x, 1);
            let r = g.reshape(s, &[4]);
            let i = g.index(r, 2);
            let m = g.mean(x);
            let t = g.mul(i, m);
            let c = g.concat(&[x, x], 0);
            let sl = g.slice(c, 0, 1, 2);
            let u = weighted_sum(g, sl, 26);
            g.add(t, u)
        });
    }

    #[test]
    fn normalization_gradients() {
        check(&[2, 6], 27, |g, x| {
            let y = g.l2_normalize_rows(x);
            weighted_sum(g, y, 28)
        });
        check(&[2, 4, 3], 29, |g, x| {
            let y = g.group_norm(x, 2, 1e-5);
            weighted_sum(g, y, 30)
        });
        check(&[3, 2, 2, 2], 31, |g, x| {
            let (y, _) = g.batch_norm(x, 1e-5);
            weighted_sum(g, y, 32)
        });
    }

    #[test]
    fn batch_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 3, 2, 2], 40));
        let (y, stats) = g.batch_norm(x, 0.0);
        let y = g.value(y).clone();
        for c in 0..3 {
            let vals: Vec<f64> = y.index_axis(Axis(1), c).iter().copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
            assert!(stats.var[c] > 0.0);
        }
    }

    #[test]
    fn frozen_inputs_skip_backward() {
        let mut g = Graph::new();
        let a = g.constant(random(&[3], 1));
        let s = g.sum(a);
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).is_empty());
    }
}
