//! Deterministic mock backbone built from seeded affine maps.
//!
//! Images `[3, 8, 8]` map linearly (no bias) to latents `[4, 4, 4]`. Each tap
//! is an affine function of `u = [vec(z); timestep features; mean prompt
//! token]`, reshaped to the layer's geometry. The noise prediction is
//! `sqrt(1 - abar_t) z + sqrt(abar_t) (A u + b)`, which keeps DDIM chains
//! bounded at every noise level.

use std::ops::RangeInclusive;

use ndarray::{Array2, IxDyn};
use rand::Rng;

use super::{timestep_features, Backbone, NoiseSchedule, TapInfo};
use crate::autograd::{Graph, Tensor, Var};
use crate::nn::{hex, ParamStore};
use crate::rng;

const IMAGE: [usize; 3] = [3, 8, 8];
const LATENT: [usize; 3] = [4, 4, 4];
const TIME_DIM: usize = 8;
pub const MOCK_TEXT_DIM: usize = 8;

const TAPS: [TapInfo; 12] = [
    TapInfo {
        layer: 1,
        channels: 4,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 2,
        channels: 4,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 3,
        channels: 8,
        height: 2,
        width: 2,
    },
    TapInfo {
        layer: 4,
        channels: 8,
        height: 2,
        width: 2,
    },
    TapInfo {
        layer: 5,
        channels: 8,
        height: 1,
        width: 1,
    },
    TapInfo {
        layer: 6,
        channels: 8,
        height: 1,
        width: 1,
    },
    TapInfo {
        layer: 7,
        channels: 8,
        height: 1,
        width: 1,
    },
    TapInfo {
        layer: 8,
        channels: 8,
        height: 1,
        width: 1,
    },
    TapInfo {
        layer: 9,
        channels: 8,
        height: 2,
        width: 2,
    },
    TapInfo {
        layer: 10,
        channels: 8,
        height: 2,
        width: 2,
    },
    TapInfo {
        layer: 11,
        channels: 4,
        height: 4,
        width: 4,
    },
    TapInfo {
        layer: 12,
        channels: 4,
        height: 4,
        width: 4,
    },
];

#[derive(Debug, Clone)]
pub struct MockBackbone {
    seed: u64,
    store: ParamStore,
    encoder: Array2<f64>,
    schedule: NoiseSchedule,
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

impl MockBackbone {
    /// Mock with the compressed 100-step schedule.
    pub fn new(seed: u64) -> Self {
        Self::with_schedule(
            seed,
            NoiseSchedule::compressed(100).expect("valid schedule"),
        )
    }

    pub fn with_schedule(seed: u64, schedule: NoiseSchedule) -> Self {
        let mut r = rng::stream(seed, &[rng::Purpose::Backbone as u64]);
        let lin = numel(&LATENT);
        let u_dim = lin + TIME_DIM + MOCK_TEXT_DIM;
        let enc_scale = (3.0 / numel(&IMAGE) as f64).sqrt();
        let encoder = Array2::from_shape_fn((numel(&IMAGE), lin), |_| {
            r.random_range(-enc_scale..enc_scale) * 2.0
        });
        let mut store = ParamStore::new();
        let scale = (1.0 / u_dim as f64).sqrt();
        for tap in &TAPS {
            let out = tap.channels * tap.height * tap.width;
            store.add(
                format!("tap{}.weight", tap.layer),
                Tensor::from_shape_fn(IxDyn(&[u_dim, out]), |_| {
                    r.random_range(-scale..scale) * 1.7
                }),
            );
            store.add(
                format!("tap{}.bias", tap.layer),
                Tensor::from_shape_fn(IxDyn(&[out]), |_| r.random_range(-0.1..0.1)),
            );
        }
        store.add(
            "eps.weight",
            Tensor::from_shape_fn(IxDyn(&[u_dim, lin]), |_| r.random_range(-scale..scale)),
        );
        store.add(
            "eps.bias",
            Tensor::from_shape_fn(IxDyn(&[lin]), |_| r.random_range(-0.1..0.1)),
        );
        Self {
            seed,
            store,
            encoder,
            schedule,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Backbone for MockBackbone {
    fn kind(&self) -> &'static str {
        "mock"
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
        MOCK_TEXT_DIM
    }

    fn token_embedding(&self, word: &str) -> Vec<f64> {
        let mut r = rng::stream(self.seed, &[rng::hash_str(word)]);
        (0..MOCK_TEXT_DIM)
            .map(|_| r.random_range(-1.0..1.0))
            .collect()
    }

    fn encode(&self, images: &Tensor) -> Tensor {
        let n = images.shape()[0];
        let flat = images
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, numel(&IMAGE)))
            .expect("image batch");
        let z = flat.dot(&self.encoder);
        z.into_shape_with_order(IxDyn(&[n, LATENT[0], LATENT[1], LATENT[2]]))
            .expect("latent batch")
    }

    fn unet(
        &self,
        g: &mut Graph,
        z: Var,
        t: &[usize],
        prompts: &[Var],
        taps: Option<RangeInclusive<usize>>,
    ) -> (Var, Vec<Var>) {
        let n = t.len();
        let lin = numel(&LATENT);
        let zf = g.reshape(z, &[n, lin]);
        let tf = g.constant(timestep_features(t, TIME_DIM, self.schedule.t_max));
        let pooled: Vec<Var> = prompts
            .iter()
            .map(|p| {
                let m = g.mean_axis(*p, 0);
                g.reshape(m, &[1, MOCK_TEXT_DIM])
            })
            .collect();
        let pf = g.concat(&pooled, 0);
        let u = g.concat(&[zf, tf, pf], 1);

        let mut tap_vars = Vec::new();
        if let Some(range) = taps {
            for layer in range {
                let info = TAPS[layer - 1];
                let w = g.param(&self.store, 2 * (layer - 1));
                let b = g.param(&self.store, 2 * (layer - 1) + 1);
                let y = g.matmul(u, w);
                let y = g.add(y, b);
                tap_vars.push(g.reshape(y, &[n, info.channels, info.height, info.width]));
            }
        }

        let w = g.param(&self.store, 2 * TAPS.len());
        let b = g.param(&self.store, 2 * TAPS.len() + 1);
        let drift = g.matmul(u, w);
        let drift = g.add(drift, b);
        let keep: Vec<f64> = t
            .iter()
            .map(|&ti| (1.0 - self.schedule.alpha_bar(ti)).sqrt())
            .collect();
        let mix: Vec<f64> = t
            .iter()
            .map(|&ti| self.schedule.alpha_bar(ti).sqrt())
            .collect();
        let keep = g.constant(Tensor::from_shape_vec(IxDyn(&[n, 1]), keep).expect("column"));
        let mix = g.constant(Tensor::from_shape_vec(IxDyn(&[n, 1]), mix).expect("column"));
        let a = g.mul(zf, keep);
        let c = g.mul(drift, mix);
        let eps = g.add(a, c);
        let eps = g.reshape(eps, &[n, LATENT[0], LATENT[1], LATENT[2]]);
        (eps, tap_vars)
    }

    fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.store.checksum().as_bytes());
        for v in self.encoder.iter() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneHandle, LatentTensor, PromptEmbedding, PromptKind};
    use std::sync::Arc;

    #[test]
    fn zero_image_encodes_to_zero() {
        let h = BackboneHandle::new(Arc::new(MockBackbone::new(1)));
        let z = h.encode_image(&Tensor::zeros(IxDyn(&IMAGE))).unwrap();
        assert!(z.data.iter().all(|v| *v == 0.0));
        assert_eq!(z.timestep, 0);
        assert!(h.encode_image(&Tensor::zeros(IxDyn(&[3, 4, 4]))).is_err());
    }

    #[test]
    fn prompt_token_changes_taps() {
        let h = BackboneHandle::new(Arc::new(MockBackbone::new(1)));
        let z = LatentTensor::new(Tensor::from_elem(IxDyn(&LATENT), 0.3), 0);
        let mut a = PromptEmbedding {
            tokens: Tensor::zeros(IxDyn(&[2, MOCK_TEXT_DIM])),
            kind: PromptKind::ClassName,
        };
        let (_, ta) = h.unet_features(&z, 1, &a, 1.0).unwrap();
        let (_, ta2) = h.unet_features(&z, 1, &a, 1.0).unwrap();
        assert_eq!(ta, ta2);
        a.tokens[[1, 3]] = 0.5;
        let (_, tb) = h.unet_features(&z, 1, &a, 1.0).unwrap();
        assert_ne!(ta, tb);
    }

    #[test]
    fn tap_geometry_valleys() {
        let sizes: Vec<usize> = TAPS.iter().map(|t| t.height).collect();
        let bottom = sizes.iter().position(|&s| s == 1).unwrap();
        assert!(sizes[..=bottom].windows(2).all(|w| w[0] >= w[1]));
        let last_min = sizes.iter().rposition(|&s| s == 1).unwrap();
        assert!(sizes[last_min..].windows(2).all(|w| w[0] <= w[1]));
    }
}
