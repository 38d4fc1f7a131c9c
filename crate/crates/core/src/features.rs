//! The four feature types built from backbone taps:
//!
//! * inversion (`inv`): clean latent, null prompt, one U-Net call;
//! * synthetic (`syn`): latent noised to `t = 1`, class-name prompt, one call;
//! * augmented (`aug`): latent noised to a grid timestep `t`, then partial
//!   DDIM generation back to 0 under the class-specific prompt;
//! * generative (`gen`): full generation from pure noise under the
//!   class-specific prompt, used as latent replay.
//!
//! Extraction stops at taps ([`TapBatch`]); the aggregator, which is trained,
//! turns taps into [`AggregatedFeature`]s.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{AggregatedFeature, Aggregator, FeatureKind};
use crate::autograd::Tensor;
use crate::backbone::{
    BackboneHandle, LatentTensor, MultiScaleTaps, PromptEmbedding, PromptKind, TapBatch,
};
use crate::container::{Container, FEATURE_CACHE_HEADER};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_FULL_STEPS: usize = 25;
pub const DEFAULT_M: usize = 4;

/// Timesteps `{T/m, 2T/m, ..., T}` rounded to integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    pub m: usize,
    pub t_max: usize,
    pub values: Vec<usize>,
}

impl TimestepGrid {
    pub fn new(m: usize, t_max: usize) -> Result<Self> {
        if m <= 1 {
            return Err(Error::Grid(format!("m = {m}; the grid requires m > 1")));
        }
        let values: Vec<usize> = (1..=m)
            .map(|k| ((k * t_max) as f64 / m as f64).round() as usize)
            .collect();
        if values.windows(2).any(|w| w[1] <= w[0]) || values[0] <= 1 {
            return Err(Error::Grid(format!(
                "m = {m} is too fine for T = {t_max}: grid {values:?}"
            )));
        }
        Ok(Self { m, t_max, values })
    }

    /// Uniform draw over the grid values.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.values[rng.random_range(0..self.values.len())]
    }
}

/// Where augmentation timesteps come from.
#[derive(Debug, Clone, PartialEq)]
pub enum AugSchedule {
    Grid(TimestepGrid),
    /// A single fixed timestep.
    Single(usize),
}

impl AugSchedule {
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match self {
            Self::Grid(g) => g.sample(rng),
            Self::Single(t) => *t,
        }
    }
}

/// Standard-normal noise shaped like a latent, from a 64-bit seed.
pub fn seeded_noise(shape: &[usize], seed: u64) -> Tensor {
    rng::standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn require_kind(p: &PromptEmbedding, kind: PromptKind, what: &str) -> Result<()> {
    if p.kind != kind {
        return Err(Error::PromptKind(format!(
            "{what} needs a {kind:?} prompt, got {:?}",
            p.kind
        )));
    }
    Ok(())
}

/// Feature extraction against a frozen backbone.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub backbone: BackboneHandle,
    /// DDIM steps of a full generation from `T`.
    pub full_steps: usize,
}

impl Extractor {
    pub fn new(backbone: BackboneHandle, full_steps: usize) -> Self {
        Self {
            backbone,
            full_steps: full_steps.max(1),
        }
    }

    pub fn t_max(&self) -> usize {
        self.backbone.t_max()
    }

    /// Steps of a partial generation from `t`: `ceil(S_full * t / T)`.
    pub fn partial_steps(&self, t: usize) -> usize {
        (self.full_steps * t).div_ceil(self.t_max())
    }

    /// Inversion taps: each clean latent through the U-Net at the minimal
    /// timestep `t = 1` with `prompt` (the null prompt by default), no
    /// guidance.
    pub fn inv_taps(&self, z0: &[&LatentTensor], prompt: &PromptEmbedding) -> Result<TapBatch> {
        for z in z0 {
            if z.timestep != 0 {
                return Err(Error::Ordering(format!(
                    "inversion expects a clean latent, got t = {}",
                    z.timestep
                )));
            }
        }
        let prompts = vec![prompt; z0.len()];
        let (_, taps) = self
            .backbone
            .unet_features_batch(z0, &vec![1; z0.len()], &prompts, 1.0)?;
        Ok(taps)
    }

    /// Synthetic taps: `z1 = noise_to(z0, 1, eps(seed))`, one conditional call.
    pub fn syn_taps(
        &self,
        z0: &[&LatentTensor],
        prompts: &[&PromptEmbedding],
        seeds: &[u64],
    ) -> Result<TapBatch> {
        for p in prompts {
            require_kind(p, PromptKind::ClassName, "synthetic extraction")?;
        }
        let z1: Vec<LatentTensor> = z0
            .iter()
            .zip(seeds)
            .map(|(z, s)| {
                let eps = seeded_noise(
                    z.data.shape(),
                    rng::derive_seed(*s, &[Purpose::SynNoise as u64]),
                );
                self.backbone.noise_to(z, 1, &eps)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&LatentTensor> = z1.iter().collect();
        let (_, taps) =
            self.backbone
                .unet_features_batch(&refs, &vec![1; refs.len()], prompts, 1.0)?;
        Ok(taps)
    }

    /// Timestep and noise drawn for an augmentation with `seed`.
    pub fn aug_draw(&self, schedule: &AugSchedule, shape: &[usize], seed: u64) -> (usize, Tensor) {
        let mut r =
            ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, &[Purpose::AugTimestep as u64]));
        let t = schedule.sample(&mut r);
        let eps = seeded_noise(shape, rng::derive_seed(seed, &[Purpose::AugNoise as u64]));
        (t, eps)
    }

    /// Augmented taps with explicit timesteps and noise per item.
    pub fn aug_taps_at(
        &self,
        z0: &[&LatentTensor],
        prompts: &[&PromptEmbedding],
        ts: &[usize],
        noise: &[Tensor],
    ) -> Result<TapBatch> {
        for p in prompts {
            require_kind(p, PromptKind::ClassSpecific, "augmented extraction")?;
        }
        let starts: Vec<LatentTensor> = z0
            .iter()
            .zip(ts)
            .zip(noise)
            .map(|((z, &t), e)| {
                if t <= 1 {
                    return Err(Error::Range(format!(
                        "augmentation timestep {t} must exceed 1"
                    )));
                }
                self.backbone.noise_to(z, t, e)
            })
            .collect::<Result<_>>()?;
        self.generate_grouped(&starts, prompts)
    }

    /// Augmented taps: timestep from `schedule`, noise and timestep from the
    /// per-item seeds.
    pub fn aug_taps(
        &self,
        z0: &[&LatentTensor],
        prompts: &[&PromptEmbedding],
        schedule: &AugSchedule,
        seeds: &[u64],
    ) -> Result<TapBatch> {
        let (ts, noise): (Vec<usize>, Vec<Tensor>) = z0
            .iter()
            .zip(seeds)
            .map(|(z, s)| self.aug_draw(schedule, z.data.shape(), *s))
            .unzip();
        self.aug_taps_at(z0, prompts, &ts, &noise)
    }

    /// Starting latent `z_T` of a generative replay with `seed`.
    pub fn gen_start(&self, seed: u64) -> LatentTensor {
        let shape = self.backbone.latent_shape();
        let eps = seeded_noise(&shape, rng::derive_seed(seed, &[Purpose::GenNoise as u64]));
        LatentTensor::new(eps, self.t_max())
    }

    /// Generative taps from pure noise.
    pub fn gen_taps(&self, prompts: &[&PromptEmbedding], seeds: &[u64]) -> Result<TapBatch> {
        let starts: Vec<LatentTensor> = seeds.iter().map(|s| self.gen_start(*s)).collect();
        self.gen_taps_from(&starts, prompts)
    }

    /// Generative taps from given `z_T` latents.
    pub fn gen_taps_from(
        &self,
        starts: &[LatentTensor],
        prompts: &[&PromptEmbedding],
    ) -> Result<TapBatch> {
        for p in prompts {
            require_kind(p, PromptKind::ClassSpecific, "generative extraction")?;
        }
        if starts.iter().any(|s| s.timestep != self.t_max()) {
            return Err(Error::Ordering("generation must start at t = T".into()));
        }
        self.generate_grouped(starts, prompts)
    }

    /// Runs generation for latents grouped by their start timestep and
    /// reassembles the final taps in input order.
    fn generate_grouped(
        &self,
        starts: &[LatentTensor],
        prompts: &[&PromptEmbedding],
    ) -> Result<TapBatch> {
        if starts.len() != prompts.len() || starts.is_empty() {
            return Err(Error::Dimension(format!(
                "{} latents for {} prompts",
                starts.len(),
                prompts.len()
            )));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in starts.iter().enumerate() {
            groups.entry(s.timestep).or_default().push(i);
        }
        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (t, idx) in groups {
            let zs: Vec<&LatentTensor> = idx.iter().map(|&i| &starts[i]).collect();
            let ps: Vec<&PromptEmbedding> = idx.iter().map(|&i| prompts[i]).collect();
            let (_, taps) = self
                .backbone
                .generate_batch(&zs, t, &ps, self.partial_steps(t))?;
            parts.push(taps);
            order.extend(idx);
        }
        let all = TapBatch::concat(&parts)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        Ok(all.select(&inverse))
    }

    pub fn extract_inv(&self, z0: &LatentTensor, agg: &Aggregator) -> Result<AggregatedFeature> {
        let taps = self.inv_taps(&[z0], &self.backbone.null_prompt())?;
        Ok(agg.aggregate_batch(&taps, FeatureKind::Inv)?.remove(0))
    }

    pub fn extract_syn(
        &self,
        z0: &LatentTensor,
        prompt: &PromptEmbedding,
        seed: u64,
        agg: &Aggregator,
    ) -> Result<AggregatedFeature> {
        let taps = self.syn_taps(&[z0], &[prompt], &[seed])?;
        Ok(agg.aggregate_batch(&taps, FeatureKind::Syn)?.remove(0))
    }

    pub fn extract_aug(
        &self,
        z0: &LatentTensor,
        prompt: &PromptEmbedding,
        schedule: &AugSchedule,
        seed: u64,
        agg: &Aggregator,
    ) -> Result<AggregatedFeature> {
        let taps = self.aug_taps(&[z0], &[prompt], schedule, &[seed])?;
        Ok(agg.aggregate_batch(&taps, FeatureKind::Aug)?.remove(0))
    }

    pub fn extract_gen(
        &self,
        prompt: &PromptEmbedding,
        seed: u64,
        agg: &Aggregator,
    ) -> Result<AggregatedFeature> {
        let taps = self.gen_taps(&[prompt], &[seed])?;
        Ok(agg.aggregate_batch(&taps, FeatureKind::Gen)?.remove(0))
    }

    /// [`Extractor::extract_gen`] from an explicit `z_T`.
    pub fn extract_gen_from(
        &self,
        start: &LatentTensor,
        prompt: &PromptEmbedding,
        agg: &Aggregator,
    ) -> Result<AggregatedFeature> {
        let taps = self.gen_taps_from(std::slice::from_ref(start), &[prompt])?;
        Ok(agg.aggregate_batch(&taps, FeatureKind::Gen)?.remove(0))
    }
}

/// On-disk cache of taps keyed by (backbone checksum, sample id, kind, seed).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache rooted at `$DIFSCIL_CACHE`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os("DIFSCIL_CACHE").map(Self::new)
    }

    fn path(&self, backbone: &str, sample: u64, kind: FeatureKind, seed: u64) -> PathBuf {
        let short = &backbone[..backbone.len().min(16)];
        self.dir
            .join(short)
            .join(format!("{sample}-{}-{seed}.fc", kind.name()))
    }

    pub fn get(
        &self,
        backbone: &str,
        sample: u64,
        kind: FeatureKind,
        seed: u64,
    ) -> Option<MultiScaleTaps> {
        let c = Container::read(
            &self.path(backbone, sample, kind, seed),
            FEATURE_CACHE_HEADER,
        )
        .ok()?;
        if c.meta["backbone"] != backbone {
            return None;
        }
        let lo = c.meta["range"][0].as_u64()? as usize;
        let hi = c.meta["range"][1].as_u64()? as usize;
        let taps = (lo..=hi)
            .map(|l| Some((l, c.get(&format!("tap{l}")).ok()?.clone())))
            .collect::<Option<_>>()?;
        Some(MultiScaleTaps {
            taps,
            range: (lo, hi),
        })
    }

    pub fn put(
        &self,
        backbone: &str,
        sample: u64,
        kind: FeatureKind,
        seed: u64,
        taps: &MultiScaleTaps,
    ) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "backbone": backbone,
            "sample": sample,
            "kind": kind,
            "seed": seed,
            "range": [taps.range.0, taps.range.1],
        }));
        for (l, t) in &taps.taps {
            c.push(format!("tap{l}"), t.clone());
        }
        c.write(
            &self.path(backbone, sample, kind, seed),
            FEATURE_CACHE_HEADER,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::mock::MockBackbone;
    use std::sync::Arc;

    fn setup() -> (Extractor, Aggregator) {
        let h = BackboneHandle::new(Arc::new(MockBackbone::new(3)));
        let agg = Aggregator::new(&h.taps_in_range(), 6, 1).unwrap();
        (Extractor::new(h, 10), agg)
    }

    fn prompt(kind: PromptKind, fill: f64) -> PromptEmbedding {
        PromptEmbedding {
            tokens: Tensor::from_elem(ndarray::IxDyn(&[2, 8]), fill),
            kind,
        }
    }

    fn latent(seed: u64) -> LatentTensor {
        LatentTensor::new(seeded_noise(&[4, 4, 4], seed), 0)
    }

    #[test]
    fn grid_values_and_errors() {
        assert_eq!(
            TimestepGrid::new(4, 1000).unwrap().values,
            vec![250, 500, 750, 1000]
        );
        assert_eq!(TimestepGrid::new(2, 100).unwrap().values, vec![50, 100]);
        assert!(matches!(TimestepGrid::new(1, 100), Err(Error::Grid(_))));
    }

    #[test]
    fn inversion_is_deterministic_and_unit_norm() {
        let (x, agg) = setup();
        let z = latent(1);
        let a = x.extract_inv(&z, &agg).unwrap();
        let b = x.extract_inv(&z, &agg).unwrap();
        assert_eq!(a, b);
        let n = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        let (_, taps) = x
            .backbone
            .unet_features(&z, 1, &x.backbone.null_prompt(), 1.0)
            .unwrap();
        let manual = agg.aggregate(&taps, FeatureKind::Inv).unwrap();
        assert!(manual
            .data
            .iter()
            .zip(a.data.iter())
            .all(|(p, q)| (p - q).abs() < 1e-6));
    }

    #[test]
    fn synthetic_depends_on_prompt_and_seed() {
        let (x, agg) = setup();
        let z = latent(2);
        let p = prompt(PromptKind::ClassName, 0.4);
        let s1 = x.extract_syn(&z, &p, 5, &agg).unwrap();
        assert_eq!(s1, x.extract_syn(&z, &p, 5, &agg).unwrap());
        assert_ne!(s1.data, x.extract_syn(&z, &p, 6, &agg).unwrap().data);
        assert_ne!(s1.data, x.extract_inv(&z, &agg).unwrap().data);
        assert!(matches!(
            x.extract_syn(&z, &x.backbone.null_prompt(), 5, &agg),
            Err(Error::PromptKind(_))
        ));
    }

    #[test]
    fn generation_seeds_differ() {
        let (x, agg) = setup();
        let p = prompt(PromptKind::ClassSpecific, -0.2);
        let a = x.extract_gen(&p, 1, &agg).unwrap();
        assert_eq!(a, x.extract_gen(&p, 1, &agg).unwrap());
        assert_ne!(a.data, x.extract_gen(&p, 2, &agg).unwrap().data);
    }

    #[test]
    fn grouped_generation_preserves_order() {
        let (x, _) = setup();
        let p = prompt(PromptKind::ClassSpecific, 0.1);
        let zs = [latent(1), latent(2), latent(3)];
        let refs: Vec<&LatentTensor> = zs.iter().collect();
        let ts = [50, 100, 50];
        let noise: Vec<Tensor> = (0..3).map(|k| seeded_noise(&[4, 4, 4], 10 + k)).collect();
        let all = x.aug_taps_at(&refs, &[&p, &p, &p], &ts, &noise).unwrap();
        let one = x
            .aug_taps_at(&[&zs[1]], &[&p], &[100], &noise[1..2])
            .unwrap();
        assert_eq!(all.item(1), one.item(0));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let (x, _) = setup();
        let (_, taps) = x
            .backbone
            .unet_features(&latent(1), 1, &x.backbone.null_prompt(), 1.0)
            .unwrap();
        let key = x.backbone.checksum();
        assert!(cache.get(&key, 3, FeatureKind::Inv, 0).is_none());
        cache.put(&key, 3, FeatureKind::Inv, 0, &taps).unwrap();
        assert_eq!(cache.get(&key, 3, FeatureKind::Inv, 0).unwrap(), taps);
    }
}
