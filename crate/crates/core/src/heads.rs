//! Trainable neck and head, fixed simplex-ETF prototypes, the dot-regression
//! loss, cosine distillation and nearest-prototype classification.

use ndarray::{Array2, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, GroupNorm, Linear, ParamStore};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Output channels of the neck convolution.
    pub neck_channels: usize,
    /// Stride of the neck convolution.
    pub neck_stride: usize,
    /// Pooled neck output size.
    pub d_neck: usize,
    /// Dimension of the normalized head output and of the prototypes.
    pub d_cls: usize,
    pub gn_groups: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            neck_channels: 32,
            neck_stride: 2,
            d_neck: 64,
            d_cls: 32,
            gn_groups: 8,
        }
    }
}

/// Convolution, batch normalization, SiLU, 1x1 bottleneck, then global
/// average pooling.
#[derive(Debug, Clone)]
pub struct ConvNeck {
    pub store: ParamStore,
    conv: Conv2d,
    bn: BatchNorm2d,
    bottleneck: Conv2d,
    pub d_neck: usize,
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl ConvNeck {
    pub fn new(c_in: usize, cfg: &HeadConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[Purpose::Init as u64, 2]);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(
            &mut store,
            "conv",
            c_in,
            cfg.neck_channels,
            3,
            cfg.neck_stride,
            &mut r,
        );
        let bn = BatchNorm2d::new(&mut store, "bn", cfg.neck_channels);
        let bottleneck = Conv2d::new(
            &mut store,
            "bottleneck",
            cfg.neck_channels,
            cfg.d_neck,
            1,
            1,
            &mut r,
        );
        Self {
            store,
            conv,
            bn,
            bottleneck,
            d_neck: cfg.d_neck,
        }
    }

    /// `[N, C, H, W]` to `[N, d_neck]`. In training mode the batch statistics
    /// are returned for [`ConvNeck::update_running`].
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> (Var, Option<BatchStats>) {
        let h = self.conv.forward(g, &self.store, x);
        let (h, stats) = match mode {
            Mode::Train => {
                let (h, s) = self.bn.forward_train(g, &self.store, h);
                (h, Some(s))
            }
            Mode::Eval => (self.bn.forward_eval(g, &self.store, h), None),
        };
        let h = g.silu(h);
        let h = self.bottleneck.forward(g, &self.store, h);
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, &[s[0], s[1], s[2] * s[3]]);
        (g.mean_axis(h, 2), stats)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        self.bn.update_running(&mut self.store, stats);
    }

    /// Sets the running statistics to the exact batch statistics of the
    /// convolution outputs of `x`.
    pub fn recalibrate(&mut self, x: &Tensor) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h = self.conv.forward(&mut g, &self.store, xv);
        let (_, stats) = g.batch_norm(h, crate::nn::BN_EPS);
        self.bn.set_running(&mut self.store, &stats);
    }

    /// Sets every bias (convolutions and batch-norm shift) to zero.
    pub fn zero_biases(&mut self) {
        for idx in [self.conv.bias, self.bottleneck.bias, self.bn.beta] {
            self.store.get_mut(idx).fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Residual MLP: `r = x + SiLU(GN(L2(SiLU(GN(L1 x)))))`, then an affine
/// projection to `d_cls` and L2 normalization.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub store: ParamStore,
    lin1: Linear,
    gn1: GroupNorm,
    lin2: Linear,
    gn2: GroupNorm,
    proj: Linear,
    pub d_in: usize,
    pub d_cls: usize,
}

impl MlpHead {
    pub fn new(cfg: &HeadConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[Purpose::Init as u64, 3]);
        let mut store = ParamStore::new();
        let d = cfg.d_neck;
        let lin1 = Linear::new(&mut store, "lin1", d, d, &mut r);
        let gn1 = GroupNorm::new(&mut store, "gn1", cfg.gn_groups, d);
        let lin2 = Linear::new(&mut store, "lin2", d, d, &mut r);
        let gn2 = GroupNorm::new(&mut store, "gn2", cfg.gn_groups, d);
        let proj = Linear::new(&mut store, "proj", d, cfg.d_cls, &mut r);
        for l in [&lin1, &lin2, &proj] {
            store.get_mut(l.bias).fill(0.0);
        }
        Self {
            store,
            lin1,
            gn1,
            lin2,
            gn2,
            proj,
            d_in: d,
            d_cls: cfg.d_cls,
        }
    }

    /// Output before normalization, `[N, d_cls]`.
    pub fn forward_raw(&self, g: &mut Graph, x: Var) -> Var {
        let s = &self.store;
        let h = self.lin1.forward(g, s, x);
        let h = self.gn1.forward(g, s, h);
        let h = g.silu(h);
        let h = self.lin2.forward(g, s, h);
        let h = self.gn2.forward(g, s, h);
        let h = g.silu(h);
        let r = g.add(x, h);
        self.proj.forward(g, s, r)
    }

    /// Unit-norm output `[N, d_cls]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.forward_raw(g, x);
        g.l2_normalize_rows(y)
    }

    /// Zeros the second linear layer (weights and bias).
    pub fn zero_second_layer(&mut self) {
        self.store.get_mut(self.lin2.weight).fill(0.0);
        self.store.get_mut(self.lin2.bias).fill(0.0);
    }

    /// Negates the final projection.
    pub fn negate_projection(&mut self) {
        for idx in [self.proj.weight, self.proj.bias] {
            self.store.get_mut(idx).mapv_inplace(|v| -v);
        }
    }

    /// The final affine projection applied to `x`, without the MLP branch.
    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        self.proj.forward(g, &self.store, x)
    }
}

/// Fixed simplex equiangular tight frame, `W: [d, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfPrototypes {
    pub w: Array2<f64>,
}

/// Orthonormal basis `[K, K-1]` of the complement of the all-ones vector.
fn helmert(k: usize) -> Array2<f64> {
    let mut q = Array2::zeros((k, k - 1));
    for j in 1..k {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            q[[i, j - 1]] = 1.0 / norm;
        }
        q[[j, j - 1]] = -(j as f64) / norm;
    }
    q
}

impl EtfPrototypes {
    /// `W = sqrt(K/(K-1)) U Q^T` with `Q` the Helmert basis (so
    /// `Q Q^T = I - 11^T/K`) and `U` a seeded `d x (K-1)` orthonormal matrix.
    pub fn new(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Dimension(format!("ETF needs K >= 2, got {k}")));
        }
        if d < k - 1 {
            return Err(Error::Dimension(format!(
                "ETF needs d >= K - 1, got d = {d}, K = {k}"
            )));
        }
        let mut r = rng::stream(seed, &[Purpose::Etf as u64]);
        let mut u = Array2::<f64>::zeros((d, k - 1));
        for j in 0..k - 1 {
            loop {
                let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                for _ in 0..2 {
                    for p in 0..j {
                        let dot: f64 = (0..d).map(|i| u[[i, p]] * v[i]).sum();
                        for (i, vi) in v.iter_mut().enumerate() {
                            *vi -= dot * u[[i, p]];
                        }
                    }
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    for (i, vi) in v.iter().enumerate() {
                        u[[i, j]] = vi / n;
                    }
                    break;
                }
            }
        }
        let w = u.dot(&helmert(k).t()) * (k as f64 / (k - 1) as f64).sqrt();
        Ok(Self { w })
    }

    pub fn num_classes(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn column(&self, c: usize) -> Result<Vec<f64>> {
        if c >= self.num_classes() {
            return Err(Error::ClassId {
                id: c,
                k: self.num_classes(),
            });
        }
        Ok(self.w.column(c).to_vec())
    }

    /// Prototype columns of `labels`, stacked as rows `[N, d]`.
    pub fn targets(&self, labels: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::zeros(IxDyn(&[labels.len(), self.dim()]));
        for (i, &y) in labels.iter().enumerate() {
            for (j, v) in self.column(y)?.into_iter().enumerate() {
                t[[i, j]] = v;
            }
        }
        Ok(t)
    }
}

/// `1/2 (w_y . h - 1)^2` for a single unit vector.
pub fn dr_loss(h: &[f64], y: usize, etf: &EtfPrototypes) -> Result<f64> {
    let w = etf.column(y)?;
    if h.len() != w.len() {
        return Err(Error::Dimension(format!(
            "feature dim {} vs prototypes {}",
            h.len(),
            w.len()
        )));
    }
    let dot: f64 = h.iter().zip(&w).map(|(a, b)| a * b).sum();
    Ok(0.5 * (dot - 1.0).powi(2))
}

/// Batch-mean dot-regression loss on a graph; `h` is `[N, d]`.
pub fn dr_loss_graph(g: &mut Graph, h: Var, labels: &[usize], etf: &EtfPrototypes) -> Result<Var> {
    let w = g.constant(etf.targets(labels)?);
    let p = g.mul(h, w);
    let dot = g.sum_axis(p, 1);
    let one = g.scalar_constant(1.0);
    let d = g.sub(dot, one);
    let d2 = g.mul(d, d);
    let m = g.mean(d2);
    Ok(g.scale(m, 0.5))
}

/// Batch-mean `1 - cos(t_i, s_i)` between teacher and student rows `[N, d]`.
pub fn distill_loss_graph(g: &mut Graph, teacher: Var, student: Var) -> Var {
    let t = g.l2_normalize_rows(teacher);
    let s = g.l2_normalize_rows(student);
    let p = g.mul(t, s);
    let cos = g.sum_axis(p, 1);
    let m = g.mean(cos);
    let one = g.scalar_constant(1.0);
    g.sub(one, m)
}

/// Frozen copy of neck (optional) and head taken at a session boundary.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub neck: Option<ConvNeck>,
    pub head: MlpHead,
}

impl TeacherSnapshot {
    pub fn take(neck: &ConvNeck, head: &MlpHead, include_neck: bool) -> Self {
        let mut h = head.clone();
        h.store = head.store.snapshot();
        let n = include_neck.then(|| {
            let mut n = neck.clone();
            n.store = neck.store.snapshot();
            n
        });
        Self { neck: n, head: h }
    }

    /// Teacher outputs for aggregated features `[N, C, H, W]`; `student_neck`
    /// is used when the snapshot holds only the head.
    pub fn forward(&self, g: &mut Graph, features: Var, student_neck: &ConvNeck) -> Var {
        let neck = self.neck.as_ref().unwrap_or(student_neck);
        let (v, _) = neck.forward(g, features, Mode::Eval);
        self.head.forward(g, v)
    }

    pub fn checksum(&self) -> String {
        let n = self
            .neck
            .as_ref()
            .map(|n| n.store.checksum())
            .unwrap_or_default();
        format!("{n}{}", self.head.store.checksum())
    }
}

/// Distillation loss for one aggregated generative feature `[C, H, W]`.
pub fn distill_loss(
    feature: &Tensor,
    teacher: &TeacherSnapshot,
    neck: &ConvNeck,
    head: &MlpHead,
) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(feature.clone().insert_axis(Axis(0)));
    let t = teacher.forward(&mut g, f, neck);
    let (v, _) = neck.forward(&mut g, f, Mode::Eval);
    let s = head.forward(&mut g, v);
    let l = distill_loss_graph(&mut g, t, s);
    g.scalar(l)
}

/// Highest-scoring allowed class; ties go to the smallest id.
pub fn classify(h: &[f64], etf: &EtfPrototypes, allowed: &[usize]) -> Result<usize> {
    let mut sorted = allowed.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for c in sorted {
        let w = etf.column(c)?;
        let score: f64 = h.iter().zip(&w).map(|(a, b)| a * b).sum();
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((c, score));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Data("classification over an empty class set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::{check, random};

    fn cfg() -> HeadConfig {
        HeadConfig {
            neck_channels: 4,
            neck_stride: 2,
            d_neck: 8,
            d_cls: 6,
            gn_groups: 2,
        }
    }

    #[test]
    fn etf_gram_matches_closed_form() {
        for (k, d) in [(2, 1), (4, 3), (4, 8), (10, 16)] {
            let e = EtfPrototypes::new(k, d, 1).unwrap();
            let gram = e.w.t().dot(&e.w);
            for i in 0..k {
                for j in 0..k {
                    let expect =
                        k as f64 / (k - 1) as f64 * (f64::from(u8::from(i == j)) - 1.0 / k as f64);
                    assert!((gram[[i, j]] - expect).abs() < 1e-9);
                }
            }
        }
        assert!(EtfPrototypes::new(5, 3, 0).is_err());
    }

    #[test]
    fn dr_loss_analytic_cases() {
        let e = EtfPrototypes::new(4, 3, 0).unwrap();
        let w = e.column(2).unwrap();
        assert!(dr_loss(&w, 2, &e).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        assert!((dr_loss(&neg, 2, &e).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(dr_loss(&w, 4, &e), Err(Error::ClassId { .. })));
    }

    #[test]
    fn classify_picks_prototype_and_breaks_ties_low() {
        let e = EtfPrototypes::new(5, 4, 3).unwrap();
        assert_eq!(
            classify(&e.column(3).unwrap(), &e, &[0, 1, 2, 3, 4]).unwrap(),
            3
        );
        let zero = vec![0.0; 4];
        assert_eq!(classify(&zero, &e, &[4, 2, 3]).unwrap(), 2);
        assert!(classify(&zero, &e, &[]).is_err());
    }

    #[test]
    fn neck_zero_input_and_gradients() {
        let mut neck = ConvNeck::new(3, &cfg(), 0);
        neck.zero_biases();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(IxDyn(&[2, 3, 4, 4])));
        let (y, _) = neck.forward(&mut g, x, Mode::Eval);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        let neck = ConvNeck::new(3, &cfg(), 1);
        check(&[2, 3, 4, 4], 5, |g, x| {
            let (y, _) = neck.forward(g, x, Mode::Eval);
            let w = g.constant(random(g.shape(y), 6));
            let p = g.mul(y, w);
            g.sum(p)
        });
    }

    #[test]
    fn head_residual_norm_and_gradients() {
        let mut head = MlpHead::new(&cfg(), 0);
        let x0 = random(&[3, 8], 2);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = head.forward(&mut g, x);
        for row in g.value(y).axis_iter(Axis(0)) {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        check(&[3, 8], 3, |g, x| {
            let y = head.forward(g, x);
            let w = g.constant(random(g.shape(y), 4));
            let p = g.mul(y, w);
            g.sum(p)
        });
        head.zero_second_layer();
        let mut g = Graph::new();
        let x = g.constant(x0);
        let raw = head.forward_raw(&mut g, x);
        let direct = head.project(&mut g, x);
        assert_eq!(g.value(raw), g.value(direct));
    }

    #[test]
    fn distill_endpoints() {
        let neck = ConvNeck::new(3, &cfg(), 0);
        let head = MlpHead::new(&cfg(), 0);
        let teacher = TeacherSnapshot::take(&neck, &head, true);
        let f = random(&[3, 4, 4], 9);
        assert!(distill_loss(&f, &teacher, &neck, &head).abs() < 1e-7);
        let mut flipped = head.clone();
        flipped.negate_projection();
        assert!((distill_loss(&f, &teacher, &neck, &flipped) - 2.0).abs() < 1e-6);
    }
}
