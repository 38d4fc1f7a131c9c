//! Synthetic shape/colour images and the toy FSCIL benchmark built from them.
//!
//! Each image is a jittered coloured shape on a noisy grey background, with
//! values in `[-1, 1]`. Class labels are colour/shape pairs; their raw names
//! ("red circle") are two words that the toy backbone has seen in captions,
//! while the normalized single-word labels ("red_circle") are tokens it has
//! never seen.

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::rng::{self, Purpose};

pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "ring", "cross", "diamond", "hbar", "vbar",
];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("orange", [1.0, 0.55, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub color: usize,
    pub shape: usize,
}

impl Concept {
    pub fn raw_label(&self) -> String {
        format!("{} {}", COLORS[self.color].0, SHAPES[self.shape])
    }

    pub fn by_name(color: &str, shape: &str) -> Option<Self> {
        Some(Self {
            color: COLORS.iter().position(|c| c.0 == color)?,
            shape: SHAPES.iter().position(|s| *s == shape)?,
        })
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match SHAPES[shape] {
        "circle" => d <= r,
        "square" => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        "triangle" => dy <= 0.8 * r && dy >= -r && dx.abs() <= (dy + r) * 0.55,
        "ring" => d <= r && d >= 0.55 * r,
        "cross" => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        "diamond" => dx.abs() + dy.abs() <= r,
        "hbar" => dx.abs() <= r && dy.abs() <= r / 3.0,
        "vbar" => dy.abs() <= r && dx.abs() <= r / 3.0,
        _ => false,
    }
}

/// Renders a concept on a `size` x `size` canvas with random placement,
/// scale, colour jitter and background noise.
pub fn render(concept: Concept, size: usize, rng: &mut impl Rng) -> Tensor {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let r = rng.random_range(0.22..0.34) * s;
    let base = COLORS[concept.color].1;
    let color: Vec<f64> = base
        .iter()
        .map(|c| (c + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0) * 2.0 - 1.0)
        .collect();
    let bg = rng.random_range(-0.75..-0.35);
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.08..0.08)).collect();
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let mut img = Tensor::zeros(IxDyn(&[3, size, size]));
    let sub = [0.25, 0.75];
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for sy in sub {
                for sx in sub {
                    let dx = x as f64 + sx - cx;
                    let dy = y as f64 + sy - cy;
                    if inside(concept.shape, dx, dy, r) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                let back = bg + tint[c] + noise.sample(rng);
                img[[c, y, x]] = ((1.0 - cover) * back + cover * color[c]).clamp(-1.0, 1.0);
            }
        }
    }
    img
}

/// Standard training augmentation: horizontal flip, small rotation, random
/// resized crop and brightness/contrast jitter.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let flip = rng.random_bool(0.5);
    let angle: f64 = rng.random_range(-15f64..15.0).to_radians();
    let zoom = rng.random_range(0.85..1.0);
    let (ox, oy) = (
        rng.random_range(-0.06..0.06) * w as f64,
        rng.random_range(-0.06..0.06) * h as f64,
    );
    let bright = rng.random_range(-0.1..0.1);
    let contrast = rng.random_range(0.85..1.15);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Tensor::zeros(image.raw_dim());
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let rx = (cos * px - sin * py) * zoom + cx + ox;
            let ry = (sin * px + cos * py) * zoom + cy + oy;
            let sx = (rx.floor() as isize).clamp(0, w as isize - 1) as usize;
            let sy = (ry.floor() as isize).clamp(0, h as isize - 1) as usize;
            let sx = if flip { w - 1 - sx } else { sx };
            for ch in 0..c {
                let v = image[[ch, sy, sx]];
                out[[ch, y, x]] = (v * contrast + bright).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub class_id: usize,
    pub image: Tensor,
}

/// Class split and per-class sample counts of a toy benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchmarkSpec {
    pub image_size: usize,
    pub base: Vec<(String, String)>,
    pub incremental: Vec<Vec<(String, String)>>,
    pub base_train_per_class: usize,
    pub shots: usize,
    pub test_per_class: usize,
}

impl ToyBenchmarkSpec {
    /// The bundled 10 + 2x2-way benchmark on 32x32 images. Incremental
    /// classes are new colour/shape combinations of attributes seen in the
    /// base session.
    pub fn standard() -> Self {
        let pairs = |v: &[(&str, &str)]| {
            v.iter()
                .map(|(c, s)| (c.to_string(), s.to_string()))
                .collect::<Vec<_>>()
        };
        Self {
            image_size: 32,
            base: pairs(&[
                ("red", "circle"),
                ("green", "square"),
                ("blue", "triangle"),
                ("yellow", "ring"),
                ("cyan", "cross"),
                ("magenta", "diamond"),
                ("orange", "hbar"),
                ("white", "vbar"),
                ("red", "square"),
                ("blue", "circle"),
            ]),
            incremental: vec![
                pairs(&[("orange", "circle"), ("green", "triangle")]),
                pairs(&[("magenta", "square"), ("yellow", "diamond")]),
            ],
            base_train_per_class: 16,
            shots: 5,
            test_per_class: 12,
        }
    }

    /// Same class split on 8x8 images, sized for the mock backbone.
    pub fn mock() -> Self {
        Self {
            image_size: 8,
            base_train_per_class: 6,
            test_per_class: 4,
            ..Self::standard()
        }
    }

    pub fn concepts(&self) -> Vec<Concept> {
        self.base
            .iter()
            .chain(self.incremental.iter().flatten())
            .map(|(c, s)| Concept::by_name(c, s).expect("known colour and shape"))
            .collect()
    }

    pub fn sessions(&self) -> Vec<usize> {
        std::iter::once(self.base.len())
            .chain(self.incremental.iter().map(Vec::len))
            .collect()
    }
}

/// Class-labelled train/test samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub raw_labels: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Renders a toy benchmark deterministically from `seed`. Train samples
    /// are listed class by class in dataset order.
    pub fn toy(spec: &ToyBenchmarkSpec, seed: u64) -> Self {
        let concepts = spec.concepts();
        let n_base = spec.base.len();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut next_id = 0u64;
        for (class_id, concept) in concepts.iter().enumerate() {
            let n_train = if class_id < n_base {
                spec.base_train_per_class
            } else {
                spec.shots
            };
            for split in 0..2 {
                let count = if split == 0 {
                    n_train
                } else {
                    spec.test_per_class
                };
                for k in 0..count {
                    let mut r = rng::stream(
                        seed,
                        &[Purpose::Dataset as u64, class_id as u64, split, k as u64],
                    );
                    let s = Sample {
                        id: next_id,
                        class_id,
                        image: render(*concept, spec.image_size, &mut r),
                    };
                    next_id += 1;
                    if split == 0 {
                        train.push(s);
                    } else {
                        test.push(s);
                    }
                }
            }
        }
        Self {
            raw_labels: concepts.iter().map(Concept::raw_label).collect(),
            train,
            test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.raw_labels.len()
    }

    pub fn train_of(&self, class_id: usize) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(move |s| s.class_id == class_id)
    }

    pub fn sample(&self, id: u64) -> Option<&Sample> {
        self.train.iter().chain(&self.test).find(|s| s.id == id)
    }
}

/// Random captioned images over all colour/shape combinations, used to
/// pretrain the toy backbone.
pub fn caption_pool(
    n: usize,
    size: usize,
    templates: &[&str],
    seed: u64,
) -> Vec<(Tensor, Concept, String)> {
    let mut r = rng::stream(seed, &[Purpose::Dataset as u64, u64::MAX]);
    let mut combos: Vec<Concept> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| Concept { color: c, shape: s }))
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        combos.shuffle(&mut r);
        for c in &combos {
            if out.len() == n {
                break;
            }
            let tpl = templates[r.random_range(0..templates.len())];
            let caption = tpl.replace("{}", &c.raw_label());
            out.push((render(*c, size, &mut r), *c, caption));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn render_is_bounded_and_colored() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let c = Concept::by_name("red", "square").unwrap();
        let img = render(c, 32, &mut r);
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
        // the centre pixel belongs to the object: red channel dominates
        assert!(img[[0, 16, 16]] > img[[2, 16, 16]] + 0.5);
        let a = augment(&img, &mut r);
        assert_eq!(a.shape(), img.shape());
    }

    #[test]
    fn toy_dataset_layout() {
        let spec = ToyBenchmarkSpec::standard();
        let d = Dataset::toy(&spec, 3);
        assert_eq!(d.num_classes(), 14);
        assert_eq!(spec.sessions(), vec![10, 2, 2]);
        assert_eq!(d.train_of(0).count(), 16);
        assert_eq!(d.train_of(12).count(), 5);
        assert_eq!(d.test.len(), 14 * 12);
        assert_eq!(d.raw_labels[0], "red circle");
        let again = Dataset::toy(&spec, 3);
        assert_eq!(again.train[17].image, d.train[17].image);
        assert!(d.sample(d.test[5].id).is_some());
    }
}
