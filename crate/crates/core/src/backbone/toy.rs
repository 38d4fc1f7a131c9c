//! Toy latent-diffusion model: a small VAE (`3x32x32` images to `4x16x16`
//! latents) and a three-level U-Net with 12 tap points, conditioned on
//! frozen hash-seeded token embeddings through attention pooling.
//!
//! The model is trained once with the noise-prediction loss on captioned
//! synthetic images ([`train_toy_backbone`]) and then used frozen.

use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{stack, timestep_features, Backbone, NoiseSchedule, TapInfo};
use crate::autograd::{Graph, Tensor, Var};
use crate::container::{Container, BACKBONE_HEADER};
use crate::data::{caption_pool, Concept};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Conv2d, GroupNorm, Linear, ParamStore};
use crate::prompts::TEMPLATES;
use crate::rng::{self, Purpose};

pub const TOY_TEXT_DIM: usize = 32;
const TIME_DIM: usize = 32;
const EMB_DIM: usize = 64;
const QUERIES: usize = 4;
const IMAGE: [usize; 3] = [3, 32, 32];
const LATENT: [usize; 3] = [4, 16, 16];

/// The checkpoint shipped with the crate.
static BUNDLED: &[u8] = include_bytes!("../../assets/toy_backbone.bin");

const TAPS: [TapInfo; 12] = [
    TapInfo {
        layer: 1,
        channels: 16,
        height: 16,
        width: 16,
    },
    TapInfo {
        layer: 2,
        channels: 16,
        height: 16,
        width: 16,
    },
    TapInfo {
        layer: 3,
        channels: 32,
        height: 8,
        width: 8,
    },
    TapInfo {
        layer: 4,
        channels: 32,
        height: 8,
        width: 8,
    },
    TapInfo {
        layer: 5,
        channels: 32,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 6,
        channels: 32,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 7,
        channels: 32,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 8,
        channels: 32,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 9,
        channels: 32,
        height: 8,
        width: 8,
    },
    TapInfo {
        layer: 10,
        channels: 32,
        height: 8,
        width: 8,
    },
    TapInfo {
        layer: 11,
        channels: 16,
        height: 16,
        width: 16,
    },
    TapInfo {
        layer: 12,
        channels: 16,
        height: 16,
        width: 16,
    },
];

fn groups_for(c: usize) -> usize {
    if c.is_multiple_of(8) {
        8
    } else {
        1
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

impl ResBlock {
    fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, r: &mut impl Rng) -> Self {
        Self {
            gn1: GroupNorm::new(s, &format!("{name}.gn1"), groups_for(cin), cin),
            conv1: Conv2d::new(s, &format!("{name}.conv1"), cin, cout, 3, 1, r),
            emb: Linear::new(s, &format!("{name}.emb"), EMB_DIM, cout, r),
            gn2: GroupNorm::new(s, &format!("{name}.gn2"), groups_for(cout), cout),
            conv2: Conv2d::new(s, &format!("{name}.conv2"), cout, cout, 3, 1, r),
            skip: (cin != cout)
                .then(|| Conv2d::new(s, &format!("{name}.skip"), cin, cout, 1, 1, r)),
            cout,
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, emb: Var) -> Var {
        let n = g.shape(x)[0];
        let h = self.gn1.forward(g, s, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, s, h);
        let e = self.emb.forward(g, s, emb);
        let e = g.reshape(e, &[n, self.cout, 1, 1]);
        let h = g.add(h, e);
        let h = self.gn2.forward(g, s, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, s, x),
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Debug, Clone)]
struct Vae {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
}

impl Vae {
    fn new(s: &mut ParamStore, r: &mut impl Rng) -> Self {
        Self {
            e1: Conv2d::new(s, "vae.e1", 3, 16, 3, 1, r),
            e2: Conv2d::new(s, "vae.e2", 16, 32, 3, 2, r),
            e3: Conv2d::new(s, "vae.e3", 32, 2 * LATENT[0], 3, 1, r),
            d1: Conv2d::new(s, "vae.d1", LATENT[0], 32, 3, 1, r),
            d2: Conv2d::new(s, "vae.d2", 32, 16, 3, 1, r),
            d3: Conv2d::new(s, "vae.d3", 16, 3, 3, 1, r),
        }
    }

    /// Returns (mean, log-variance) of the unscaled latent.
    fn encode(&self, g: &mut Graph, s: &ParamStore, x: Var) -> (Var, Var) {
        let h = self.e1.forward(g, s, x);
        let h = g.silu(h);
        let h = self.e2.forward(g, s, h);
        let h = g.silu(h);
        let o = self.e3.forward(g, s, h);
        let c = LATENT[0];
        (g.slice(o, 1, 0, c), g.slice(o, 1, c, c))
    }

    fn decode(&self, g: &mut Graph, s: &ParamStore, z: Var) -> Var {
        let h = self.d1.forward(g, s, z);
        let h = g.silu(h);
        let h = g.upsample(h, 2);
        let h = self.d2.forward(g, s, h);
        let h = g.silu(h);
        self.d3.forward(g, s, h)
    }
}

#[derive(Debug, Clone)]
struct UNet {
    t1: Linear,
    t2: Linear,
    queries: usize,
    ctx: Linear,
    conv_in: Conv2d,
    rb2: ResBlock,
    down3: Conv2d,
    rb4: ResBlock,
    down5: Conv2d,
    rb6: ResBlock,
    rb7: ResBlock,
    rb8: ResBlock,
    up9: Conv2d,
    rb10: ResBlock,
    up11: Conv2d,
    rb12: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    fn new(s: &mut ParamStore, r: &mut impl Rng) -> Self {
        let bound = 1.0 / (TOY_TEXT_DIM as f64).sqrt();
        let queries = s.add(
            "unet.queries",
            crate::nn::uniform(&[TOY_TEXT_DIM, QUERIES], bound, r),
        );
        Self {
            t1: Linear::new(s, "unet.t1", TIME_DIM, EMB_DIM, r),
            t2: Linear::new(s, "unet.t2", EMB_DIM, EMB_DIM, r),
            queries,
            ctx: Linear::new(s, "unet.ctx", QUERIES * TOY_TEXT_DIM, EMB_DIM, r),
            conv_in: Conv2d::new(s, "unet.l1", LATENT[0], 16, 3, 1, r),
            rb2: ResBlock::new(s, "unet.l2", 16, 16, r),
            down3: Conv2d::new(s, "unet.l3", 16, 32, 3, 2, r),
            rb4: ResBlock::new(s, "unet.l4", 32, 32, r),
            down5: Conv2d::new(s, "unet.l5", 32, 32, 3, 2, r),
            rb6: ResBlock::new(s, "unet.l6", 32, 32, r),
            rb7: ResBlock::new(s, "unet.l7", 32, 32, r),
            rb8: ResBlock::new(s, "unet.l8", 64, 32, r),
            up9: Conv2d::new(s, "unet.l9", 32, 32, 3, 1, r),
            rb10: ResBlock::new(s, "unet.l10", 64, 32, r),
            up11: Conv2d::new(s, "unet.l11", 32, 16, 3, 1, r),
            rb12: ResBlock::new(s, "unet.l12", 32, 16, r),
            gn_out: GroupNorm::new(s, "unet.gn_out", 8, 16),
            conv_out: Conv2d::new(s, "unet.out", 16, LATENT[0], 3, 1, r),
        }
    }

    /// Attention pooling of one prompt `[L, d]` into `[1, QUERIES * d]`.
    fn pool_prompt(&self, g: &mut Graph, s: &ParamStore, p: Var) -> Var {
        let q = g.param(s, self.queries);
        let scores = g.matmul(p, q);
        let scores = g.scale(scores, 1.0 / (TOY_TEXT_DIM as f64).sqrt());
        let scores = g.transpose(scores);
        let attn = g.softmax(scores);
        let pooled = g.matmul(attn, p);
        g.reshape(pooled, &[1, QUERIES * TOY_TEXT_DIM])
    }

    fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        z: Var,
        t: &[usize],
        prompts: &[Var],
        t_max: usize,
    ) -> (Var, [Var; 12]) {
        let tf = g.constant(timestep_features(t, TIME_DIM, t_max));
        let te = self.t1.forward(g, s, tf);
        let te = g.silu(te);
        let te = self.t2.forward(g, s, te);
        let pooled: Vec<Var> = prompts.iter().map(|p| self.pool_prompt(g, s, *p)).collect();
        let pooled = g.concat(&pooled, 0);
        let ce = self.ctx.forward(g, s, pooled);
        let emb = g.add(te, ce);
        let emb = g.silu(emb);

        let l1 = self.conv_in.forward(g, s, z);
        let l2 = self.rb2.forward(g, s, l1, emb);
        let l3 = self.down3.forward(g, s, l2);
        let l4 = self.rb4.forward(g, s, l3, emb);
        let l5 = self.down5.forward(g, s, l4);
        let l6 = self.rb6.forward(g, s, l5, emb);
        let l7 = self.rb7.forward(g, s, l6, emb);
        let c8 = g.concat(&[l7, l6], 1);
        let l8 = self.rb8.forward(g, s, c8, emb);
        let u9 = g.upsample(l8, 2);
        let l9 = self.up9.forward(g, s, u9);
        let c10 = g.concat(&[l9, l4], 1);
        let l10 = self.rb10.forward(g, s, c10, emb);
        let u11 = g.upsample(l10, 2);
        let l11 = self.up11.forward(g, s, u11);
        let c12 = g.concat(&[l11, l2], 1);
        let l12 = self.rb12.forward(g, s, c12, emb);
        let h = self.gn_out.forward(g, s, l12);
        let h = g.silu(h);
        let eps = self.conv_out.forward(g, s, h);
        (eps, [l1, l2, l3, l4, l5, l6, l7, l8, l9, l10, l11, l12])
    }
}

/// Values recorded when the toy backbone was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMeta {
    pub seed: u64,
    pub t_max: usize,
    /// Multiplier applied to encoder means so latents have unit spread.
    pub latent_scale: f64,
    /// Upper bound for per-image reconstruction MSE on toy images.
    pub recon_threshold: f64,
    pub vae_final_loss: f64,
    pub unet_final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    store: ParamStore,
    vae: Vae,
    unet: UNet,
    schedule: NoiseSchedule,
    pub meta: ToyMeta,
}

/// Hyperparameters of the one-time backbone pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub seed: u64,
    pub t_max: usize,
    pub pool_size: usize,
    pub validation_size: usize,
    pub batch: usize,
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub kl_weight: f64,
    pub unet_steps: usize,
    pub unet_lr: f64,
    /// Probability of replacing a caption by the null prompt.
    pub null_prob: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_max: 100,
            pool_size: 4096,
            validation_size: 64,
            batch: 32,
            vae_steps: 1500,
            vae_lr: 2e-3,
            kl_weight: 1e-3,
            unet_steps: 4000,
            unet_lr: 1e-3,
            null_prob: 0.15,
        }
    }
}

impl ToyBackbone {
    /// Freshly initialized (untrained) model.
    pub fn init(seed: u64, t_max: usize) -> Result<Self> {
        let mut r = rng::stream(seed, &[Purpose::Backbone as u64]);
        let mut store = ParamStore::new();
        let vae = Vae::new(&mut store, &mut r);
        let unet = UNet::new(&mut store, &mut r);
        Ok(Self {
            store,
            vae,
            unet,
            schedule: NoiseSchedule::compressed(t_max)?,
            meta: ToyMeta {
                seed,
                t_max,
                latent_scale: 1.0,
                recon_threshold: f64::INFINITY,
                vae_final_loss: f64::NAN,
                unet_final_loss: f64::NAN,
            },
        })
    }

    /// The checkpoint bundled with the crate.
    pub fn bundled() -> Result<Self> {
        Self::from_container(&Container::from_bytes(BUNDLED, BACKBONE_HEADER)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, BACKBONE_HEADER)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, BACKBONE_HEADER)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "toy",
            "meta": self.meta,
            "schedule": {"t_max": self.schedule.t_max, "beta_start": self.schedule.betas[0],
                         "beta_end": self.schedule.betas[self.schedule.t_max - 1]},
            "taps": TAPS,
        }));
        c.push_store("params", &self.store);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != "toy" {
            return Err(Error::Format(format!(
                "not a toy backbone: {}",
                c.meta["kind"]
            )));
        }
        let meta: ToyMeta = serde_json::from_value(c.meta["meta"].clone())?;
        let mut m = Self::init(meta.seed, meta.t_max)?;
        c.load_store("params", &mut m.store)?;
        m.meta = meta;
        Ok(m)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Encoder mean (scaled) and decoder reconstruction of `[N, 3, 32, 32]`.
    pub fn reconstruct(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let (mean, _) = self.vae.encode(&mut g, &self.store, x);
        let y = self.vae.decode(&mut g, &self.store, mean);
        g.value(y).clone()
    }

    /// Decodes scaled latents `[N, 4, 16, 16]` to images.
    pub fn decode(&self, latents: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let z = g.constant(latents / self.meta.latent_scale);
        let y = self.vae.decode(&mut g, &self.store, z);
        g.value(y).clone()
    }

    /// Per-image reconstruction MSE.
    pub fn reconstruction_errors(&self, images: &Tensor) -> Vec<f64> {
        let rec = self.reconstruct(images);
        let per = images.len() / images.shape()[0];
        let d = &rec - images;
        d.axis_iter(Axis(0))
            .map(|x| x.iter().map(|v| v * v).sum::<f64>() / per as f64)
            .collect()
    }

    /// Token embeddings `[L, d_txt]` of a whitespace-separated caption.
    pub fn caption_tokens(&self, caption: &str) -> Tensor {
        caption_tokens(self, caption)
    }
}

/// Token embeddings `[L, d_txt]` of a whitespace-separated caption.
pub fn caption_tokens(model: &dyn Backbone, caption: &str) -> Tensor {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let d = model.text_dim();
    let mut out = Tensor::zeros(IxDyn(&[words.len().max(1), d]));
    for (i, w) in words.iter().enumerate() {
        for (j, v) in model.token_embedding(w).into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Hash-seeded token table shared by every toy model.
pub fn toy_token_embedding(word: &str) -> Vec<f64> {
    let mut r = rng::stream(0x7e87, &[rng::hash_str(word)]);
    let n = rng::standard_normal(&[TOY_TEXT_DIM], &mut r);
    n.iter().copied().collect()
}

impl Backbone for ToyBackbone {
    fn kind(&self) -> &'static str {
        "toy"
    }

    fn image_shape(&self) -> [usize; 3] {
        IMAGE
    }

    fn latent_shape(&self) -> [usize; 3] {
        LATENT
    }

    fn tap_table(&self) -> &[TapInfo] {
        &TAPS
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn text_dim(&self) -> usize {
        TOY_TEXT_DIM
    }

    fn token_embedding(&self, word: &str) -> Vec<f64> {
        toy_token_embedding(word)
    }

    fn encode(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let (mean, _) = self.vae.encode(&mut g, &self.store, x);
        g.value(mean) * self.meta.latent_scale
    }

    fn unet(
        &self,
        g: &mut Graph,
        z: Var,
        t: &[usize],
        prompts: &[Var],
        taps: Option<RangeInclusive<usize>>,
    ) -> (Var, Vec<Var>) {
        let (eps, all) = self
            .unet
            .forward(g, &self.store, z, t, prompts, self.schedule.t_max);
        let taps = taps
            .map(|r| r.map(|l| all[l - 1]).collect())
            .unwrap_or_default();
        (eps, taps)
    }

    fn checksum(&self) -> String {
        self.store.checksum()
    }
}

fn batch_images(pool: &[(Tensor, Concept, String)], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &pool[i].0).collect();
    stack(&refs)
}

/// Trains a toy backbone from scratch: first the VAE (reconstruction plus a
/// small KL term), then the U-Net on the noise-prediction loss over scaled
/// latents, with captions randomly dropped to the null prompt.
pub fn train_toy_backbone(
    cfg: &ToyTrainConfig,
    mut progress: impl FnMut(&str),
) -> Result<ToyBackbone> {
    let mut model = ToyBackbone::init(cfg.seed, cfg.t_max)?;
    let pool = caption_pool(cfg.pool_size, IMAGE[1], &TEMPLATES, cfg.seed);
    let val = caption_pool(cfg.validation_size, IMAGE[1], &TEMPLATES, cfg.seed ^ 0x5a5a);
    let mut r = rng::stream(cfg.seed, &[Purpose::Shuffle as u64]);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = pool.len();
    let mut next_batch = |r: &mut rand_chacha::ChaCha8Rng| {
        if cursor + cfg.batch > order.len() {
            order.shuffle(r);
            cursor = 0;
        }
        cursor += cfg.batch;
        order[cursor - cfg.batch..cursor].to_vec()
    };

    // VAE phase
    let mut opt = AdamW::new(cfg.vae_lr, 0.0);
    let mut running = 0.0;
    for step in 0..cfg.vae_steps {
        let idx = next_batch(&mut r);
        let x0 = batch_images(&pool, &idx)?;
        let mut g = Graph::new();
        g.train(&model.store);
        let x = g.constant(x0);
        let (mean, logvar) = model.vae.encode(&mut g, &model.store, x);
        let std = g.scale(logvar, 0.5);
        let std = g.exp(std);
        let eps = g.constant(rng::standard_normal(g.shape(mean), &mut r));
        let noise = g.mul(std, eps);
        let z = g.add(mean, noise);
        let y = model.vae.decode(&mut g, &model.store, z);
        let d = g.sub(y, x);
        let d2 = g.mul(d, d);
        let rec = g.mean(d2);
        // KL(q || N(0, 1)) = 0.5 * mean(mu^2 + exp(lv) - 1 - lv)
        let mu2 = g.mul(mean, mean);
        let var = g.exp(logvar);
        let k = g.add(mu2, var);
        let k = g.sub(k, logvar);
        let kl = g.mean(k);
        let kl = g.scale(kl, 0.5 * cfg.kl_weight);
        let loss = g.add(rec, kl);
        running = if step == 0 {
            g.scalar(rec)
        } else {
            0.98 * running + 0.02 * g.scalar(rec)
        };
        let grads = g.backward(loss);
        let lr_scale = if step > cfg.vae_steps * 3 / 4 {
            0.3
        } else {
            1.0
        };
        opt.step(&mut model.store, &grads, lr_scale);
        if step % 100 == 0 || step + 1 == cfg.vae_steps {
            progress(&format!("vae step {step}: recon {running:.5}"));
        }
    }
    model.meta.vae_final_loss = running;

    // latent scale from encoder means over the pool
    let mut latents = Vec::with_capacity(pool.len());
    for chunk in (0..pool.len()).collect::<Vec<_>>().chunks(64) {
        let x = batch_images(&pool, chunk)?;
        let z = model.encode(&x);
        latents.extend(z.axis_iter(Axis(0)).map(|v| v.to_owned()));
    }
    let n: usize = latents.iter().map(|z| z.len()).sum();
    let mean = latents.iter().map(|z| z.sum()).sum::<f64>() / n as f64;
    let var = latents
        .iter()
        .map(|z| z.iter().map(|v| (v - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    model.meta.latent_scale = 1.0 / var.sqrt();
    for z in &mut latents {
        *z *= model.meta.latent_scale;
    }
    let val_idx: Vec<usize> = (0..val.len()).collect();
    let val_x = batch_images(&val, &val_idx)?;
    let worst = model
        .reconstruction_errors(&val_x)
        .into_iter()
        .fold(0.0, f64::max);
    model.meta.recon_threshold = worst * 1.25;
    progress(&format!(
        "latent scale {:.4}, recon threshold {:.5}",
        model.meta.latent_scale, model.meta.recon_threshold
    ));

    // U-Net phase
    let null = Tensor::zeros(IxDyn(&[1, TOY_TEXT_DIM]));
    let captions: Vec<Tensor> = pool.iter().map(|p| model.caption_tokens(&p.2)).collect();
    let mut opt = AdamW::new(cfg.unet_lr, 0.0);
    let t_max = cfg.t_max;
    for step in 0..cfg.unet_steps {
        let idx = next_batch(&mut r);
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
        let z0 = stack(&refs)?;
        let ts: Vec<usize> = idx.iter().map(|_| r.random_range(1..=t_max)).collect();
        let eps = rng::standard_normal(z0.shape(), &mut r);
        let mut zt = z0.clone();
        for (k, &t) in ts.iter().enumerate() {
            let ab = model.schedule.alpha_bar(t);
            let mut row = zt.index_axis_mut(Axis(0), k);
            let e = eps.index_axis(Axis(0), k);
            ndarray::Zip::from(&mut row)
                .and(&e)
                .for_each(|z, &n| *z = ab.sqrt() * *z + (1.0 - ab).sqrt() * n);
        }
        let mut g = Graph::new();
        g.train(&model.store);
        let zv = g.constant(zt);
        let prompts: Vec<Var> = idx
            .iter()
            .map(|&i| {
                if r.random_bool(cfg.null_prob) {
                    g.constant(null.clone())
                } else {
                    g.constant(captions[i].clone())
                }
            })
            .collect();
        let (pred, _) = model
            .unet
            .forward(&mut g, &model.store, zv, &ts, &prompts, t_max);
        let target = g.constant(eps);
        let d = g.sub(pred, target);
        let d2 = g.mul(d, d);
        let loss = g.mean(d2);
        running = if step == 0 {
            g.scalar(loss)
        } else {
            0.98 * running + 0.02 * g.scalar(loss)
        };
        let grads = g.backward(loss);
        let frac = step as f64 / cfg.unet_steps as f64;
        let lr_scale = if frac > 0.85 {
            0.2
        } else if frac > 0.6 {
            0.5
        } else {
            1.0
        };
        opt.step(&mut model.store, &grads, lr_scale);
        if step % 100 == 0 || step + 1 == cfg.unet_steps {
            progress(&format!("unet step {step}: loss {running:.5}"));
        }
    }
    model.meta.unet_final_loss = running;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneHandle;
    use crate::data::render;
    use std::sync::Arc;

    #[test]
    fn bundled_checkpoint_loads_and_round_trips() {
        let m = ToyBackbone::bundled().unwrap();
        let c = m.to_container();
        let again = ToyBackbone::from_container(&c).unwrap();
        assert_eq!(again.checksum(), m.checksum());
        assert!(m.meta.recon_threshold.is_finite());
    }

    #[test]
    fn random_toy_image_reconstructs_below_threshold() {
        let m = ToyBackbone::bundled().unwrap();
        let mut r = rng::stream(99, &[]);
        let imgs: Vec<Tensor> = (0..4)
            .map(|k| {
                let c = Concept {
                    color: k * 2 % 8,
                    shape: (k * 3 + 1) % 8,
                };
                render(c, 32, &mut r)
            })
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let errs = m.reconstruction_errors(&stack(&refs).unwrap());
        assert!(errs.iter().all(|e| *e < m.meta.recon_threshold), "{errs:?}");
    }

    #[test]
    fn taps_match_declared_geometry() {
        let h = BackboneHandle::new(Arc::new(ToyBackbone::bundled().unwrap()))
            .with_layer_range((1, 12))
            .unwrap();
        let z = crate::backbone::LatentTensor::new(Tensor::zeros(IxDyn(&LATENT)), 0);
        let (eps, taps) = h.unet_features(&z, 1, &h.null_prompt(), 1.0).unwrap();
        assert_eq!(eps.shape(), LATENT);
        for info in TAPS {
            assert_eq!(
                taps.taps[&info.layer].shape(),
                [info.channels, info.height, info.width]
            );
        }
    }
}
