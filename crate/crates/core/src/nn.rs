//! Parameter storage, layers and the AdamW optimizer used by every trainable
//! component (toy backbone, aggregator, neck, head, prompt embeddings).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{BatchStats, Gradients, Graph, Tensor, Var};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// An ordered, named collection of parameter tensors.
///
/// Every store carries a process-unique id so a [`Graph`] can tell which
/// stores are being trained. Cloning keeps the id; [`ParamStore::snapshot`]
/// issues a fresh one.
#[derive(Debug, Clone)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        self.tensors.len() - 1
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[index])
    }

    pub(crate) fn shared(&self, index: usize) -> Arc<Tensor> {
        Arc::clone(&self.tensors[index])
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars held.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    /// Deep copy under a new store id.
    pub fn snapshot(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Arc::new((**t).clone()))
                .collect(),
        }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "store layouts differ");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            *dst = Arc::new((**src).clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[fan_in, fan_out], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform(&[fan_out], bound, rng));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[cout, cin, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform(&[cout], bound, rng));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

fn channel_shape(ndim: usize, c: usize) -> Vec<usize> {
    let mut s = vec![1; ndim];
    s[1] = c;
    s
}

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Self {
        assert_eq!(
            channels % groups,
            0,
            "{name}: {channels} channels / {groups} groups"
        );
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[channels])));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[channels])));
        Self {
            gamma,
            beta,
            groups,
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let ndim = g.shape(x).len();
        let n = g.group_norm(x, self.groups, 1e-5);
        affine(g, store, n, self.gamma, self.beta, ndim, self.channels)
    }
}

fn affine(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    gamma: usize,
    beta: usize,
    ndim: usize,
    channels: usize,
) -> Var {
    let shape = channel_shape(ndim, channels);
    let gm = g.param(store, gamma);
    let gm = g.reshape(gm, &shape);
    let bt = g.param(store, beta);
    let bt = g.reshape(bt, &shape);
    let y = g.mul(x, gm);
    g.add(y, bt)
}

/// Batch normalization over `[n, c, h, w]` with running statistics kept as
/// non-trainable entries of the same store.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[channels]))),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[channels]))),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(IxDyn(&[channels])),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(IxDyn(&[channels])),
            ),
            channels,
            momentum: 0.1,
        }
    }

    /// Training-mode forward; returns the batch statistics so the caller can
    /// fold them into the running averages with [`BatchNorm2d::update_running`].
    pub fn forward_train(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, BatchStats) {
        let (n, stats) = g.batch_norm(x, BN_EPS);
        let y = affine(g, store, n, self.gamma, self.beta, 4, self.channels);
        (y, stats)
    }

    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let shape = channel_shape(4, self.channels);
        let mean = store
            .get(self.running_mean)
            .clone()
            .into_shape_with_order(IxDyn(&shape))
            .expect("bn shape");
        let inv = store
            .get(self.running_var)
            .mapv(|v| 1.0 / (v + BN_EPS).sqrt())
            .into_shape_with_order(IxDyn(&shape))
            .expect("bn shape");
        let m = g.constant(mean);
        let s = g.constant(inv);
        let c = g.sub(x, m);
        let n = g.mul(c, s);
        affine(g, store, n, self.gamma, self.beta, 4, self.channels)
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        self.blend(store, stats, self.momentum);
    }

    /// Replaces the running averages with `stats`.
    pub fn set_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        self.blend(store, stats, 1.0);
    }

    fn blend(&self, store: &mut ParamStore, stats: &BatchStats, m: f64) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let rm = store.get_mut(self.running_mean);
        for (r, v) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        let rv = store.get_mut(self.running_var);
        for (r, v) in rv.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` that has a gradient,
    /// with the learning rate multiplied by `lr_scale`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr_scale: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut updates: Vec<(usize, &Tensor)> = grads.for_store(store).collect();
        updates.sort_by_key(|(i, _)| *i);
        for (i, grad) in updates {
            let (m, v) = self.moments[i].get_or_insert_with(|| {
                (Tensor::zeros(grad.raw_dim()), Tensor::zeros(grad.raw_dim()))
            });
            let p = store.get_mut(i);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * self.weight_decay * *p;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn snapshot_is_independent() {
        let mut s = ParamStore::new();
        let i = s.add("w", Tensor::zeros(IxDyn(&[2])));
        let snap = s.snapshot();
        assert_ne!(s.uid(), snap.uid());
        s.get_mut(i)[[0]] = 1.0;
        assert_eq!(snap.get(i)[[0]], 0.0);
        assert_ne!(s.checksum(), snap.checksum());
    }

    #[test]
    fn frozen_store_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "l", 3, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(uniform(&[4, 3], 1.0, &mut rng));
        let y = lin.forward(&mut g, &s, x);
        let l = g.sum(y);
        assert!(g.backward(l).is_empty());
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut s = ParamStore::new();
        let i = s.add("x", Tensor::from_elem(IxDyn(&[3]), 2.0));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            g.train(&s);
            let x = g.param(&s, i);
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            let grads = g.backward(l);
            opt.step(&mut s, &grads, 1.0);
        }
        assert!(s.get(i).iter().all(|v| v.abs() < 1e-2), "{:?}", s.get(i));
    }

    #[test]
    fn batch_norm_eval_with_fresh_stats_is_identity_on_zero_mean() {
        let mut s = ParamStore::new();
        let bn = BatchNorm2d::new(&mut s, "bn", 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(IxDyn(&[1, 2, 2, 2])));
        let y = bn.forward_eval(&mut g, &s, x);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }
}
