//! Adaptive multi-scale aggregation: per-layer 1x1 projection, bilinear
//! resize to the largest tap resolution, softmax-weighted sum and L2
//! normalization of the whole map.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{BilinearPlan, Graph, Tensor, Var};
use crate::backbone::{MultiScaleTaps, TapBatch, TapInfo};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::rng::{self, Purpose};

pub const DEFAULT_AGG_CHANNELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Inv,
    Syn,
    Aug,
    Gen,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [Self::Inv, Self::Syn, Self::Aug, Self::Gen];

    pub fn name(self) -> &'static str {
        match self {
            Self::Inv => "inv",
            Self::Syn => "syn",
            Self::Aug => "aug",
            Self::Gen => "gen",
        }
    }
}

/// One fused feature map `[C_agg, H_agg, W_agg]` with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeature {
    pub data: Tensor,
    pub kind: FeatureKind,
}

/// Aggregator parameters: one projection and one logit per tapped layer.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub store: ParamStore,
    projections: Vec<Conv2d>,
    logits: usize,
    layers: Vec<TapInfo>,
    plans: Vec<Option<Arc<BilinearPlan>>>,
    pub channels: usize,
    pub target: (usize, usize),
}

impl Aggregator {
    /// Builds an aggregator for the given taps (contiguous layers). The
    /// logits start at zero, so all layers begin with equal weight.
    pub fn new(layers: &[TapInfo], channels: usize, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Data("aggregator needs at least one layer".into()));
        }
        if layers.windows(2).any(|w| w[1].layer != w[0].layer + 1) {
            return Err(Error::Data("aggregator layers must be contiguous".into()));
        }
        let mut r = rng::stream(seed, &[Purpose::Init as u64, 1]);
        let mut store = ParamStore::new();
        let projections = layers
            .iter()
            .map(|l| {
                Conv2d::new(
                    &mut store,
                    &format!("proj{}", l.layer),
                    l.channels,
                    channels,
                    1,
                    1,
                    &mut r,
                )
            })
            .collect();
        let logits = store.add("logits", Tensor::zeros(IxDyn(&[layers.len()])));
        let target = layers
            .iter()
            .map(|l| (l.height, l.width))
            .max_by_key(|(h, w)| h * w)
            .expect("non-empty");
        let plans = layers
            .iter()
            .map(|l| {
                ((l.height, l.width) != target)
                    .then(|| Arc::new(BilinearPlan::new(l.height, l.width, target.0, target.1)))
            })
            .collect();
        Ok(Self {
            store,
            projections,
            logits,
            layers: layers.to_vec(),
            plans,
            channels,
            target,
        })
    }

    pub fn range(&self) -> (usize, usize) {
        (
            self.layers[0].layer,
            self.layers[self.layers.len() - 1].layer,
        )
    }

    pub fn layers(&self) -> &[TapInfo] {
        &self.layers
    }

    pub fn logits_index(&self) -> usize {
        self.logits
    }

    /// Projection kernel and bias parameter indices of the `k`-th layer.
    pub fn projection(&self, k: usize) -> &Conv2d {
        &self.projections[k]
    }

    /// `beta_l = softmax(theta)_l`.
    pub fn layer_weights(&self) -> BTreeMap<usize, f64> {
        let theta = self.store.get(self.logits);
        let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = theta.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        self.layers
            .iter()
            .zip(e)
            .map(|(l, v)| (l.layer, v / z))
            .collect()
    }

    fn check(&self, taps: &TapBatch) -> Result<()> {
        let (lo, hi) = self.range();
        for layer in lo..=hi {
            if layer < taps.range.0 || layer > taps.range.1 {
                return Err(Error::Coverage(layer));
            }
        }
        for (k, info) in self.layers.iter().enumerate() {
            let m = &taps.maps[info.layer - taps.range.0];
            if m.shape()[1..] != [info.channels, info.height, info.width] {
                return Err(Error::Dimension(format!(
                    "layer {} tap {:?}, expected [{}, {}, {}]",
                    info.layer,
                    &m.shape()[1..],
                    info.channels,
                    info.height,
                    info.width
                )));
            }
            debug_assert_eq!(k + lo, info.layer);
        }
        Ok(())
    }

    /// Differentiable aggregation of a batch; returns `[N, C_agg, H, W]`.
    pub fn forward(&self, g: &mut Graph, taps: &TapBatch) -> Result<Var> {
        self.check(taps)?;
        let theta = g.param(&self.store, self.logits);
        let beta = g.softmax(theta);
        let mut acc = None;
        for (k, info) in self.layers.iter().enumerate() {
            let x = g.constant(taps.maps[info.layer - taps.range.0].clone());
            let p = self.projections[k].forward(g, &self.store, x);
            let p = match &self.plans[k] {
                Some(plan) => g.bilinear(p, plan.clone()),
                None => p,
            };
            let b = g.index(beta, k);
            let term = g.mul(p, b);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        Ok(g.l2_normalize_rows(acc.expect("at least one layer")))
    }

    /// Non-differentiable batch aggregation.
    pub fn aggregate_batch(
        &self,
        taps: &TapBatch,
        kind: FeatureKind,
    ) -> Result<Vec<AggregatedFeature>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, taps)?;
        Ok(g.value(y)
            .axis_iter(Axis(0))
            .map(|v| AggregatedFeature {
                data: v.to_owned(),
                kind,
            })
            .collect())
    }

    pub fn aggregate(&self, taps: &MultiScaleTaps, kind: FeatureKind) -> Result<AggregatedFeature> {
        let (lo, hi) = self.range();
        for layer in lo..=hi {
            if !taps.taps.contains_key(&layer) {
                return Err(Error::Coverage(layer));
            }
        }
        let batch = TapBatch::from_items(std::slice::from_ref(taps))?;
        Ok(self.aggregate_batch(&batch, kind)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::random;

    fn layers() -> Vec<TapInfo> {
        vec![
            TapInfo {
                layer: 4,
                channels: 3,
                height: 2,
                width: 2,
            },
            TapInfo {
                layer: 5,
                channels: 2,
                height: 1,
                width: 1,
            },
            TapInfo {
                layer: 6,
                channels: 3,
                height: 4,
                width: 4,
            },
        ]
    }

    fn taps(seed: u64) -> TapBatch {
        TapBatch {
            range: (4, 6),
            maps: layers()
                .iter()
                .enumerate()
                .map(|(k, l)| random(&[2, l.channels, l.height, l.width], seed + k as u64))
                .collect(),
        }
    }

    #[test]
    fn weights_start_uniform_and_saturate() {
        let mut a = Aggregator::new(&layers(), 5, 0).unwrap();
        let w = a.layer_weights();
        assert!(w.values().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let li = a.logits_index();
        a.store.get_mut(li)[[1]] = 40.0;
        assert!(a.layer_weights()[&5] >= 1.0 - 1e-12);
    }

    #[test]
    fn unit_norm_and_target_grid() {
        let a = Aggregator::new(&layers(), 5, 0).unwrap();
        assert_eq!(a.target, (4, 4));
        for f in a.aggregate_batch(&taps(1), FeatureKind::Syn).unwrap() {
            assert_eq!(f.data.shape(), [5, 4, 4]);
            let n = f.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_layer_is_reported() {
        let a = Aggregator::new(&layers(), 5, 0).unwrap();
        let mut t = taps(1);
        t.range = (5, 7);
        assert!(matches!(
            a.aggregate_batch(&t, FeatureKind::Inv),
            Err(Error::Coverage(4))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = Aggregator::new(&layers(), 3, 2).unwrap();
        let t = taps(5);
        let probe = |a: &Aggregator, g: &mut Graph| {
            let y = a.forward(g, &t).unwrap();
            let w = g.constant(random(g.shape(y), 77));
            let p = g.mul(y, w);
            g.sum(p)
        };
        let mut g = Graph::new();
        g.train(&a.store);
        let l = probe(&a, &mut g);
        let grads = g.backward(l);
        let checked = [
            a.logits_index(),
            a.projection(0).weight,
            a.projection(2).bias,
        ];
        for &pi in &checked {
            let analytic = grads
                .for_store(&a.store)
                .find(|(i, _)| *i == pi)
                .unwrap()
                .1
                .clone();
            for j in 0..analytic.len() {
                let eval = |d: f64| {
                    let mut b = a.clone();
                    b.store.get_mut(pi).as_slice_mut().unwrap()[j] += d;
                    let mut g = Graph::new();
                    let l = probe(&b, &mut g);
                    g.scalar(l)
                };
                let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                let an = analytic.as_slice().unwrap()[j];
                let rel = (num - an).abs() / num.abs().max(an.abs()).max(1e-4);
                assert!(rel < 1e-4, "param {pi}[{j}]: {an} vs {num}");
            }
        }
    }
}
