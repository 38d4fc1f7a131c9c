//! Frozen latent-diffusion backbone: latent encoding, forward noising, U-Net
//! evaluation with multi-scale feature taps, DDIM stepping and generation.
//!
//! [`Backbone`] is the raw model interface; [`BackboneHandle`] wraps a model
//! with the guidance scale, tap range and U-Net call counter and implements
//! the sampling machinery shared by every model.

pub mod mock;
pub mod toy;

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const NUM_TAPS: usize = 12;
pub const DEFAULT_TAP_RANGE: (usize, usize) = (4, 12);
pub const DEFAULT_GUIDANCE: f64 = 7.5;

/// A latent `[C, H, W]` tagged with the noise level it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor,
    pub timestep: usize,
}

impl LatentTensor {
    pub fn new(data: Tensor, timestep: usize) -> Self {
        Self { data, timestep }
    }
}

/// Linear beta schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Range(format!("schedule needs T >= 2, got {t_max}")));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect();
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Range("betas must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            t_max,
            betas,
            alpha_bars,
        })
    }

    /// The standard 1e-4 .. 2e-2 schedule over 1000 steps.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid schedule")
    }

    /// The standard schedule compressed to `t_max` steps. Betas are scaled by
    /// `1000 / t_max` so the terminal signal level stays close to that of the
    /// 1000-step schedule.
    pub fn compressed(t_max: usize) -> Result<Self> {
        let k = 1000.0 / t_max as f64;
        Self::linear(t_max, 1e-4 * k, 2e-2 * k)
    }

    /// Cumulative product up to step `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Null,
    ClassName,
    ClassSpecific,
}

/// Token embedding sequence `[L, d_txt]` fed to the U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub kind: PromptKind,
}

impl PromptEmbedding {
    /// The canonical null prompt: one all-zero token.
    pub fn null(d_txt: usize) -> Self {
        Self {
            tokens: Tensor::zeros(IxDyn(&[1, d_txt])),
            kind: PromptKind::Null,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Channels and spatial size of one U-Net tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapInfo {
    pub layer: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Feature maps `[C_l, H_l, W_l]` for a contiguous range of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleTaps {
    pub taps: BTreeMap<usize, Tensor>,
    pub range: (usize, usize),
}

impl MultiScaleTaps {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Taps of a batch: per layer, a `[N, C_l, H_l, W_l]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct TapBatch {
    pub range: (usize, usize),
    pub maps: Vec<Tensor>,
}

impl TapBatch {
    pub fn batch_size(&self) -> usize {
        self.maps.first().map_or(0, |m| m.shape()[0])
    }

    pub fn item(&self, i: usize) -> MultiScaleTaps {
        let taps = self
            .maps
            .iter()
            .enumerate()
            .map(|(k, m)| (self.range.0 + k, m.index_axis(Axis(0), i).to_owned()))
            .collect();
        MultiScaleTaps {
            taps,
            range: self.range,
        }
    }

    pub fn from_items(items: &[MultiScaleTaps]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("empty tap batch".into()))?;
        let range = first.range;
        let mut maps = Vec::new();
        for layer in range.0..=range.1 {
            let views = items
                .iter()
                .map(|it| {
                    it.taps
                        .get(&layer)
                        .map(|t| t.view().insert_axis(Axis(0)))
                        .ok_or(Error::Coverage(layer))
                })
                .collect::<Result<Vec<_>>>()?;
            let m = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::Dimension(format!("layer {layer}: {e}")))?;
            maps.push(m);
        }
        Ok(Self { range, maps })
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[TapBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("empty tap batch".into()))?;
        let maps = (0..first.maps.len())
            .map(|k| {
                let views: Vec<_> = parts.iter().map(|p| p.maps[k].view()).collect();
                ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            range: first.range,
            maps,
        })
    }

    /// Selects samples by index.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            range: self.range,
            maps: self.maps.iter().map(|m| m.select(Axis(0), idx)).collect(),
        }
    }
}

/// A raw diffusion model. Implementations are immutable after construction.
pub trait Backbone: Send + Sync {
    fn kind(&self) -> &'static str;
    /// `[C, H, W]` of input images.
    fn image_shape(&self) -> [usize; 3];
    /// `[C, H, W]` of latents.
    fn latent_shape(&self) -> [usize; 3];
    /// Geometry of all 12 taps, in layer order.
    fn tap_table(&self) -> &[TapInfo];
    fn schedule(&self) -> &NoiseSchedule;
    fn text_dim(&self) -> usize;
    /// Tokenizer embedding of a single word.
    fn token_embedding(&self, word: &str) -> Vec<f64>;
    /// Encodes `[N, C, H, W]` images to `[N, c, h, w]` latents.
    fn encode(&self, images: &Tensor) -> Tensor;
    /// One U-Net pass on a graph. `prompts` holds one `[L_i, d_txt]` node per
    /// sample. Returns the noise prediction `[N, c, h, w]` and the requested
    /// taps as `[N, C_l, H_l, W_l]` nodes.
    fn unet(
        &self,
        g: &mut Graph,
        z: Var,
        t: &[usize],
        prompts: &[Var],
        taps: Option<RangeInclusive<usize>>,
    ) -> (Var, Vec<Var>);
    /// SHA-256 over all parameters.
    fn checksum(&self) -> String;
}

/// Stacks `[C, H, W]` arrays into `[N, C, H, W]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let views: Vec<_> = items
        .iter()
        .map(|t| t.view().insert_axis(Axis(0)))
        .collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
}

/// A frozen backbone plus sampling configuration and a U-Net call counter.
///
/// One U-Net call is one noise prediction for one latent; the conditional and
/// unconditional branches of classifier-free guidance count as a single call.
#[derive(Clone)]
pub struct BackboneHandle {
    model: Arc<dyn Backbone>,
    pub guidance_scale: f64,
    pub layer_range: (usize, usize),
    calls: Arc<AtomicU64>,
}

impl std::fmt::Debug for BackboneHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackboneHandle")
            .field("kind", &self.model.kind())
            .field("guidance_scale", &self.guidance_scale)
            .field("layer_range", &self.layer_range)
            .finish()
    }
}

/// Largest batch pushed through one U-Net graph.
const CHUNK: usize = 32;

impl BackboneHandle {
    pub fn new(model: Arc<dyn Backbone>) -> Self {
        Self {
            model,
            guidance_scale: DEFAULT_GUIDANCE,
            layer_range: DEFAULT_TAP_RANGE,
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn with_layer_range(mut self, range: (usize, usize)) -> Result<Self> {
        if range.0 < 1 || range.1 > NUM_TAPS || range.0 > range.1 {
            return Err(Error::Range(format!(
                "tap range {range:?} must lie within [1, {NUM_TAPS}]"
            )));
        }
        self.layer_range = range;
        Ok(self)
    }

    pub fn model(&self) -> &dyn Backbone {
        &*self.model
    }

    /// Frozen backbones are the only kind this crate constructs.
    pub fn frozen(&self) -> bool {
        true
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.model.schedule()
    }

    pub fn t_max(&self) -> usize {
        self.model.schedule().t_max
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.model.latent_shape()
    }

    pub fn text_dim(&self) -> usize {
        self.model.text_dim()
    }

    pub fn null_prompt(&self) -> PromptEmbedding {
        PromptEmbedding::null(self.text_dim())
    }

    /// Geometry of the taps in the configured range.
    pub fn taps_in_range(&self) -> Vec<TapInfo> {
        self.model.tap_table()[self.layer_range.0 - 1..self.layer_range.1].to_vec()
    }

    pub fn unet_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn checksum(&self) -> String {
        self.model.checksum()
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<LatentTensor> {
        Ok(self.encode_images(&[image])?.remove(0))
    }

    pub fn encode_images(&self, images: &[&Tensor]) -> Result<Vec<LatentTensor>> {
        let expect = self.model.image_shape();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            for im in chunk {
                if im.shape() != expect {
                    return Err(Error::Dimension(format!(
                        "image shape {:?}, backbone expects {expect:?}",
                        im.shape()
                    )));
                }
                if im.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data("image contains non-finite values".into()));
                }
            }
            let z = self.model.encode(&stack(chunk)?);
            out.extend(
                z.axis_iter(Axis(0))
                    .map(|zi| LatentTensor::new(zi.to_owned(), 0)),
            );
        }
        Ok(out)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(Error::Dimension(format!(
                "latent shape {:?}, backbone declares {:?}",
                z.shape(),
                self.latent_shape()
            )));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// `sqrt(abar_t) z0 + sqrt(1 - abar_t) noise`.
    pub fn noise_to(&self, z0: &LatentTensor, t: usize, noise: &Tensor) -> Result<LatentTensor> {
        self.check_t(t)?;
        if noise.shape() != z0.data.shape() {
            return Err(Error::Dimension(format!(
                "noise shape {:?} vs latent {:?}",
                noise.shape(),
                z0.data.shape()
            )));
        }
        if t == 0 {
            return Ok(LatentTensor::new(z0.data.clone(), 0));
        }
        let ab = self.schedule().alpha_bar(t);
        let data = &z0.data * ab.sqrt() + noise * (1.0 - ab).sqrt();
        Ok(LatentTensor::new(data, t))
    }

    /// One deterministic DDIM update from `t` to `t_prev`.
    pub fn ddim_step(
        &self,
        z_t: &LatentTensor,
        eps: &Tensor,
        t: usize,
        t_prev: usize,
    ) -> Result<LatentTensor> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::Ordering(format!(
                "t_prev {t_prev} must be below t {t}"
            )));
        }
        let ab = self.schedule().alpha_bar(t);
        let ab_prev = self.schedule().alpha_bar(t_prev);
        let x0 = (&z_t.data - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
        let data = x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt();
        Ok(LatentTensor::new(data, t_prev))
    }

    /// Single-latent U-Net evaluation. Guidance applies when
    /// `guidance_scale != 1` and the prompt is not null; the taps always come
    /// from the conditional branch.
    pub fn unet_features(
        &self,
        z: &LatentTensor,
        t: usize,
        prompt: &PromptEmbedding,
        guidance_scale: f64,
    ) -> Result<(Tensor, MultiScaleTaps)> {
        let (mut eps, taps) = self.unet_features_batch(&[z], &[t], &[prompt], guidance_scale)?;
        Ok((eps.remove(0), taps.item(0)))
    }

    /// Batched [`BackboneHandle::unet_features`]; counts one call per latent.
    pub fn unet_features_batch(
        &self,
        zs: &[&LatentTensor],
        ts: &[usize],
        prompts: &[&PromptEmbedding],
        guidance_scale: f64,
    ) -> Result<(Vec<Tensor>, TapBatch)> {
        if zs.len() != ts.len() || zs.len() != prompts.len() || zs.is_empty() {
            return Err(Error::Dimension(format!(
                "batch of {} latents, {} timesteps, {} prompts",
                zs.len(),
                ts.len(),
                prompts.len()
            )));
        }
        for (z, &t) in zs.iter().zip(ts) {
            self.check_latent(&z.data)?;
            self.check_t(t)?;
            if z.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("latent contains non-finite values".into()));
            }
        }
        let d = self.text_dim();
        for p in prompts {
            if p.tokens.ndim() != 2 || p.tokens.shape()[1] != d || p.is_empty() {
                return Err(Error::Dimension(format!(
                    "prompt tokens {:?}, expected [L >= 1, {d}]",
                    p.tokens.shape()
                )));
            }
        }
        let null = self.null_prompt();
        let mut eps_all = Vec::with_capacity(zs.len());
        let mut tap_parts = Vec::new();
        let mut start = 0;
        while start < zs.len() {
            let end = (start + CHUNK).min(zs.len());
            let guided: Vec<usize> = (start..end)
                .filter(|&i| guidance_scale != 1.0 && prompts[i].kind != PromptKind::Null)
                .collect();
            let mut g = Graph::new();
            let mut lat: Vec<&Tensor> = zs[start..end].iter().map(|z| &z.data).collect();
            let mut times: Vec<usize> = ts[start..end].to_vec();
            let mut pv: Vec<Var> = prompts[start..end]
                .iter()
                .map(|p| g.constant(p.tokens.clone()))
                .collect();
            let null_var = g.constant(null.tokens.clone());
            for &i in &guided {
                lat.push(&zs[i].data);
                times.push(ts[i]);
                pv.push(null_var);
            }
            let zv = g.constant(stack(&lat)?);
            let range = self.layer_range.0..=self.layer_range.1;
            let (eps, taps) = self.model.unet(&mut g, zv, &times, &pv, Some(range));
            let eps = g.value(eps);
            let n = end - start;
            for (k, i) in (start..end).enumerate() {
                let cond = eps.index_axis(Axis(0), k).to_owned();
                let e = match guided.iter().position(|&j| j == i) {
                    Some(u) => {
                        let unc = eps.index_axis(Axis(0), n + u);
                        &unc + &((&cond - &unc) * guidance_scale)
                    }
                    None => cond,
                };
                eps_all.push(e);
            }
            let idx: Vec<usize> = (0..n).collect();
            tap_parts.push(TapBatch {
                range: self.layer_range,
                maps: taps
                    .iter()
                    .map(|v| g.value(*v).select(Axis(0), &idx))
                    .collect(),
            });
            self.calls.fetch_add(n as u64, Ordering::SeqCst);
            start = end;
        }
        Ok((eps_all, TapBatch::concat(&tap_parts)?))
    }

    /// Evenly spaced DDIM ladder `t_i = round(start_t (n - i) / n)`; the step
    /// count is capped at `start_t` so the ladder stays strictly decreasing.
    pub fn ladder(start_t: usize, num_steps: usize) -> Vec<usize> {
        let n = num_steps.min(start_t).max(1);
        (0..=n)
            .map(|i| ((start_t * (n - i)) as f64 / n as f64).round() as usize)
            .collect()
    }

    /// DDIM generation from `start` (at `start_t`) down to 0 with guidance at
    /// the handle's scale. Returns the final latent and the taps of the last
    /// U-Net evaluation.
    pub fn generate(
        &self,
        start: &LatentTensor,
        start_t: usize,
        prompt: &PromptEmbedding,
        num_steps: usize,
    ) -> Result<(LatentTensor, MultiScaleTaps)> {
        let (mut z, taps) = self.generate_batch(&[start], start_t, &[prompt], num_steps)?;
        Ok((z.remove(0), taps.item(0)))
    }

    /// Batched generation sharing one timestep ladder.
    pub fn generate_batch(
        &self,
        starts: &[&LatentTensor],
        start_t: usize,
        prompts: &[&PromptEmbedding],
        num_steps: usize,
    ) -> Result<(Vec<LatentTensor>, TapBatch)> {
        if start_t == 0 {
            return Err(Error::Degenerate("generation from t = 0".into()));
        }
        if num_steps == 0 {
            return Err(Error::Range("generation needs at least one step".into()));
        }
        self.check_t(start_t)?;
        for s in starts {
            if s.timestep != start_t {
                return Err(Error::Ordering(format!(
                    "start latent tagged t = {}, generation starts at {start_t}",
                    s.timestep
                )));
            }
        }
        let ladder = Self::ladder(start_t, num_steps);
        let mut z: Vec<LatentTensor> = starts.iter().map(|s| (*s).clone()).collect();
        let mut last_taps = None;
        for w in ladder.windows(2) {
            let (t, t_prev) = (w[0], w[1]);
            let refs: Vec<&LatentTensor> = z.iter().collect();
            let (eps, taps) =
                self.unet_features_batch(&refs, &vec![t; z.len()], prompts, self.guidance_scale)?;
            z = z
                .iter()
                .zip(&eps)
                .map(|(zi, e)| self.ddim_step(zi, e, t, t_prev))
                .collect::<Result<_>>()?;
            last_taps = Some(taps);
        }
        Ok((z, last_taps.expect("ladder has at least one step")))
    }
}

/// Sinusoidal timestep features `[N, dim]` (half sines, half cosines).
pub fn timestep_features(ts: &[usize], dim: usize, t_max: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_shape_fn(IxDyn(&[ts.len(), dim]), |ix| {
        let (n, j) = (ix[0], ix[1]);
        let x = ts[n] as f64 / t_max as f64 * 1000.0;
        let k = j % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        if j < half {
            (x * freq).sin()
        } else {
            (x * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use mock::MockBackbone;

    fn handle() -> BackboneHandle {
        BackboneHandle::new(Arc::new(MockBackbone::new(7)))
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::standard();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        for t in 1..s.t_max {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        let c = NoiseSchedule::compressed(100).unwrap();
        assert!(c.alpha_bar(100) < 1e-3 && c.alpha_bar(100) > 0.0);
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
    }

    #[test]
    fn noise_to_edge_cases() {
        let h = handle();
        let mut r = rng::stream(0, &[]);
        let z0 = LatentTensor::new(rng::standard_normal(&h.latent_shape(), &mut r), 0);
        let eps = rng::standard_normal(&h.latent_shape(), &mut r);
        assert_eq!(h.noise_to(&z0, 0, &eps).unwrap().data, z0.data);
        let zero = Tensor::zeros(z0.data.raw_dim());
        let t = 40;
        let out = h.noise_to(&z0, t, &zero).unwrap();
        assert_eq!(out.data, &z0.data * h.schedule().alpha_bar(t).sqrt());
        assert_eq!(out.timestep, t);
        assert!(matches!(
            h.noise_to(&z0, h.t_max() + 1, &eps),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn ddim_with_zero_eps_rescales() {
        let h = handle();
        let mut r = rng::stream(1, &[]);
        let z = LatentTensor::new(rng::standard_normal(&h.latent_shape(), &mut r), 30);
        let zero = Tensor::zeros(z.data.raw_dim());
        let out = h.ddim_step(&z, &zero, 30, 0).unwrap();
        let expect = &z.data / h.schedule().alpha_bar(30).sqrt();
        assert!(out
            .data
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(
            h.ddim_step(&z, &zero, 30, 30),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn ladder_is_even_and_strict() {
        assert_eq!(
            BackboneHandle::ladder(1000, 4),
            vec![1000, 750, 500, 250, 0]
        );
        assert_eq!(BackboneHandle::ladder(3, 10), vec![3, 2, 1, 0]);
        assert_eq!(BackboneHandle::ladder(7, 1), vec![7, 0]);
    }

    #[test]
    fn guidance_one_equals_conditional() {
        let h = handle();
        let mut r = rng::stream(2, &[]);
        let z = LatentTensor::new(rng::standard_normal(&h.latent_shape(), &mut r), 10);
        let p = PromptEmbedding {
            tokens: rng::standard_normal(&[2, h.text_dim()], &mut r),
            kind: PromptKind::ClassSpecific,
        };
        let (e1, t1) = h.unet_features(&z, 10, &p, 1.0).unwrap();
        let (e7, t7) = h.unet_features(&z, 10, &p, 7.5).unwrap();
        let (en, _) = h.unet_features(&z, 10, &h.null_prompt(), 1.0).unwrap();
        assert_eq!(t1, t7);
        let expect = &en + &((&e1 - &en) * 7.5);
        assert!(e7
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(h.unet_calls(), 3);
    }

    #[test]
    fn generate_requires_nonzero_start() {
        let h = handle();
        let z = LatentTensor::new(Tensor::zeros(IxDyn(&h.latent_shape())), 0);
        let p = h.null_prompt();
        assert!(matches!(
            h.generate(&z, 0, &p, 3),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tap_batch_round_trip() {
        let h = handle();
        let mut r = rng::stream(3, &[]);
        let zs: Vec<LatentTensor> = (0..3)
            .map(|_| LatentTensor::new(rng::standard_normal(&h.latent_shape(), &mut r), 0))
            .collect();
        let refs: Vec<&LatentTensor> = zs.iter().collect();
        let null = h.null_prompt();
        let (_, taps) = h
            .unet_features_batch(&refs, &[1, 1, 1], &[&null, &null, &null], 1.0)
            .unwrap();
        let items: Vec<_> = (0..3).map(|i| taps.item(i)).collect();
        assert_eq!(TapBatch::from_items(&items).unwrap(), taps);
        assert_eq!(items[0].len(), 9);
        let (_, single) = h.unet_features(&zs[1], 1, &null, 1.0).unwrap();
        assert_eq!(single, items[1]);
    }
}
