//! Class prompts: label normalization, template rendering and learnable
//! class-specific token embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::{stack, Backbone, BackboneHandle, LatentTensor, PromptEmbedding, PromptKind};
use crate::container::{Container, PROMPT_HEADER};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamStore};
use crate::rng::{self, Purpose};

/// Prompt templates for embedding optimization.
pub const TEMPLATES: [&str; 27] = [
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a photo of my {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a photo of one {}",
    "a close-up photo of the {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a good photo of a {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "a photo of the large {}",
    "a photo of a cool {}",
    "a photo of a small {}",
];

/// Template used to turn a learned class embedding into a generation prompt.
pub const GENERATION_TEMPLATE: &str = "a photo of a {}";

/// Raw dataset label to single-word label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap {
    map: BTreeMap<String, String>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a TOML table of `"raw label" = "single_word"` entries.
    pub fn from_toml(text: &str) -> Result<Self> {
        let map: BTreeMap<String, String> =
            toml::from_str(text).map_err(|e| Error::Data(format!("label map: {e}")))?;
        let lm = Self { map };
        lm.validate()?;
        Ok(lm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.map).expect("string map serializes")
    }

    pub fn insert(&mut self, raw: impl Into<String>, word: impl Into<String>) -> Result<()> {
        self.map.insert(raw.into(), word.into());
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        for (raw, v) in &self.map {
            if v.is_empty() || v.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "label map value {v:?} for {raw:?} must be a single word"
                )));
            }
        }
        Ok(())
    }

    /// Joins the words of each label with underscores.
    pub fn underscored<'a>(labels: impl IntoIterator<Item = &'a String>) -> Self {
        Self {
            map: labels
                .into_iter()
                .map(|l| {
                    (
                        l.clone(),
                        l.split_whitespace().collect::<Vec<_>>().join("_"),
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Maps a raw label to its single-word form.
pub fn normalize_label(raw: &str, map: &LabelMap) -> Result<String> {
    if let Some(v) = map.map.get(raw) {
        return Ok(v.clone());
    }
    if !raw.is_empty() && !raw.contains(',') && !raw.chars().any(char::is_whitespace) {
        return Ok(raw.to_string());
    }
    Err(Error::Mapping(raw.to_string()))
}

fn split_template(template: &str) -> Result<(&str, &str)> {
    let parts: Vec<&str> = template.split("{}").collect();
    if parts.len() != 2 {
        return Err(Error::Template {
            template: template.to_string(),
            reason: format!("expected exactly one {{}} slot, found {}", parts.len() - 1),
        });
    }
    Ok((parts[0], parts[1]))
}

/// Non-empty list of single-slot templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<String>,
}

impl TemplateSet {
    /// Validates every template; an empty list falls back to the bare `{}`.
    pub fn new(templates: Vec<String>) -> Result<Self> {
        let templates = if templates.is_empty() {
            vec!["{}".to_string()]
        } else {
            templates
        };
        for t in &templates {
            split_template(t)?;
        }
        Ok(Self { templates })
    }

    pub fn standard() -> Self {
        Self::new(TEMPLATES.iter().map(|t| t.to_string()).collect()).expect("valid templates")
    }

    pub fn get(&self, i: usize) -> &str {
        &self.templates[i]
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Learnable token vectors `[n_vec, d_txt]` standing in for a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptEmbedding {
    pub class_id: usize,
    pub label: String,
    pub vectors: Tensor,
    pub frozen: bool,
}

impl ClassPromptEmbedding {
    pub fn n_vec(&self) -> usize {
        self.vectors.shape()[0]
    }
}

fn words_tokens(model: &dyn Backbone, text: &str) -> Option<Tensor> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let d = model.text_dim();
    let mut t = Tensor::zeros(IxDyn(&[words.len(), d]));
    for (i, w) in words.iter().enumerate() {
        for (j, v) in model.token_embedding(w).into_iter().enumerate() {
            t[[i, j]] = v;
        }
    }
    Some(t)
}

/// Tokenizes `template` filled with `label`. With `embedding`, the label
/// position holds the learnable vectors and the prompt is class-specific.
pub fn render_prompt(
    model: &dyn Backbone,
    template: &str,
    label: &str,
    embedding: Option<&ClassPromptEmbedding>,
) -> Result<PromptEmbedding> {
    let (pre, post) = split_template(template)?;
    let label_tokens = match embedding {
        Some(e) => e.vectors.clone(),
        None => {
            words_tokens(model, label).ok_or_else(|| Error::Data("empty class label".into()))?
        }
    };
    let parts: Vec<Tensor> = [
        words_tokens(model, pre),
        Some(label_tokens),
        words_tokens(model, post),
    ]
    .into_iter()
    .flatten()
    .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let tokens =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(PromptEmbedding {
        tokens,
        kind: if embedding.is_some() {
            PromptKind::ClassSpecific
        } else {
            PromptKind::ClassName
        },
    })
}

/// Graph version of [`render_prompt`] with the label replaced by `vectors`.
fn render_prompt_graph(
    g: &mut Graph,
    model: &dyn Backbone,
    template: &str,
    vectors: Var,
) -> Result<Var> {
    let (pre, post) = split_template(template)?;
    let mut parts = Vec::new();
    if let Some(t) = words_tokens(model, pre) {
        parts.push(g.constant(t));
    }
    parts.push(vectors);
    if let Some(t) = words_tokens(model, post) {
        parts.push(g.constant(t));
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 0)
    })
}

/// All `n_vec` vectors start at the tokenizer embedding of `label`.
pub fn init_embedding(
    model: &dyn Backbone,
    class_id: usize,
    label: &str,
    n_vec: usize,
) -> Result<ClassPromptEmbedding> {
    if label.is_empty() || label.chars().any(char::is_whitespace) {
        return Err(Error::Mapping(label.to_string()));
    }
    if n_vec == 0 {
        return Err(Error::Range("n_vec must be at least 1".into()));
    }
    let e = model.token_embedding(label);
    let d = e.len();
    let vectors = Tensor::from_shape_fn(IxDyn(&[n_vec, d]), |ix| e[ix[1]]);
    Ok(ClassPromptEmbedding {
        class_id,
        label: label.to_string(),
        vectors,
        frozen: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptOptConfig {
    pub lr: f64,
    pub warmup_iters: usize,
    pub iters: usize,
    pub batch: usize,
    pub n_vec: usize,
}

impl Default for PromptOptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_iters: 200,
            iters: 2000,
            batch: 1,
            n_vec: 7,
        }
    }
}

impl PromptOptConfig {
    /// Defaults with the per-dataset embedding size (5 for CUB-200, 7 for
    /// miniImageNet and CIFAR-100).
    pub fn for_dataset(dataset: &str) -> Self {
        Self {
            n_vec: if dataset.eq_ignore_ascii_case("cub200") {
                5
            } else {
                7
            },
            ..Self::default()
        }
    }
}

/// Learns the class vectors with the noise-prediction loss while the
/// backbone stays frozen. Returns the frozen embedding and the loss of every
/// iteration.
pub fn optimize_embedding(
    backbone: &BackboneHandle,
    emb: &ClassPromptEmbedding,
    latents: &[&LatentTensor],
    templates: &TemplateSet,
    cfg: &PromptOptConfig,
    seed: u64,
) -> Result<(ClassPromptEmbedding, Vec<f64>)> {
    if latents.is_empty() {
        return Err(Error::Data(format!("no images for class {}", emb.class_id)));
    }
    let model = backbone.model();
    let t_max = backbone.t_max();
    let mut store = ParamStore::new();
    let vid = store.add("vectors", emb.vectors.clone());
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut r = rng::stream(seed, &[Purpose::Prompt as u64, emb.class_id as u64]);
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut g = Graph::new();
        g.train(&store);
        let vectors = g.param(&store, vid);
        let b = cfg.batch.max(1);
        let mut zt = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        let mut prompts = Vec::with_capacity(b);
        for k in 0..b {
            let z0 = latents[r.random_range(0..latents.len())];
            let tpl = templates.get(r.random_range(0..templates.len()));
            // Stratified over the batch: item k draws from the k-th of b
            // equal slices of [1, T].
            let lo = 1 + k * t_max / b;
            let hi = ((k + 1) * t_max / b).max(lo);
            let t = r.random_range(lo..=hi);
            let eps = rng::standard_normal(z0.data.shape(), &mut r);
            zt.push(backbone.noise_to(z0, t, &eps)?.data);
            noise.push(eps);
            ts.push(t);
            prompts.push(render_prompt_graph(&mut g, model, tpl, vectors)?);
        }
        let z = g.constant(stack(&zt.iter().collect::<Vec<_>>())?);
        let target = g.constant(stack(&noise.iter().collect::<Vec<_>>())?);
        let (pred, _) = model.unet(&mut g, z, &ts, &prompts, None);
        let d = g.sub(pred, target);
        let d2 = g.mul(d, d);
        let loss = g.mean(d2);
        losses.push(g.scalar(loss));
        let grads = g.backward(loss);
        let warm = if cfg.warmup_iters == 0 {
            1.0
        } else {
            ((it + 1) as f64 / cfg.warmup_iters as f64).min(1.0)
        };
        opt.step(&mut store, &grads, warm);
    }
    Ok((
        ClassPromptEmbedding {
            vectors: store.get(vid).clone(),
            frozen: true,
            ..emb.clone()
        },
        losses,
    ))
}

/// Learned class embeddings keyed by class id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptStore {
    pub entries: BTreeMap<usize, ClassPromptEmbedding>,
    pub config_hash: String,
}

impl PromptStore {
    pub fn insert(&mut self, e: ClassPromptEmbedding) -> Result<()> {
        if self.entries.contains_key(&e.class_id) {
            return Err(Error::State(format!(
                "class {} already has a prompt",
                e.class_id
            )));
        }
        self.entries.insert(e.class_id, e);
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Result<&ClassPromptEmbedding> {
        self.entries
            .get(&class_id)
            .ok_or_else(|| Error::State(format!("no learned prompt for class {class_id}")))
    }

    pub fn to_container(&self) -> Container {
        let records: Vec<_> = self
            .entries
            .values()
            .map(|e| json!({"class_id": e.class_id, "label": e.label, "n_vec": e.n_vec()}))
            .collect();
        let mut c = Container::new(json!({"config_hash": self.config_hash, "records": records}));
        for e in self.entries.values() {
            c.push(format!("class{}", e.class_id), e.vectors.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut s = Self {
            config_hash: c.meta["config_hash"]
                .as_str()
                .unwrap_or_default()
                .to_string(),
            ..Self::default()
        };
        let records = c.meta["records"]
            .as_array()
            .ok_or_else(|| Error::Format("prompt store without records".into()))?;
        for r in records {
            let class_id = r["class_id"]
                .as_u64()
                .ok_or_else(|| Error::Format("record without class_id".into()))?
                as usize;
            s.insert(ClassPromptEmbedding {
                class_id,
                label: r["label"].as_str().unwrap_or_default().to_string(),
                vectors: c.get(&format!("class{class_id}"))?.clone(),
                frozen: true,
            })?;
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, PROMPT_HEADER)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, PROMPT_HEADER)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::mock::MockBackbone;
    use std::sync::Arc;

    #[test]
    fn label_normalization() {
        let map = LabelMap::from_toml(
            "\"ladybug, ladybeetle, lady beetle\" = \"ladybug\"\n\"red circle\" = \"red_circle\"\n",
        )
        .unwrap();
        assert_eq!(
            normalize_label("ladybug, ladybeetle, lady beetle", &map).unwrap(),
            "ladybug"
        );
        assert_eq!(normalize_label("cardinal", &map).unwrap(), "cardinal");
        assert!(
            matches!(normalize_label("snow leopard", &map), Err(Error::Mapping(s)) if s == "snow leopard")
        );
        assert!(LabelMap::from_toml("\"a b\" = \"two words\"").is_err());
        let again = LabelMap::from_toml(&map.to_toml()).unwrap();
        assert_eq!(again, map);
    }

    #[test]
    fn templates_are_verbatim_and_single_slot() {
        let t = TemplateSet::standard();
        assert_eq!(t.len(), 27);
        assert_eq!(t.get(0), "a photo of a {}");
        assert_eq!(TemplateSet::new(vec![]).unwrap().get(0), "{}");
        assert!(TemplateSet::new(vec!["no slot".into()]).is_err());
        assert!(TemplateSet::new(vec!["{} and {}".into()]).is_err());
    }

    #[test]
    fn rendering_places_label_tokens() {
        let m = MockBackbone::new(0);
        let p = render_prompt(&m, "a photo of a {}", "cardinal", None).unwrap();
        assert_eq!(p.kind, PromptKind::ClassName);
        assert_eq!(p.len(), 5);
        let card = m.token_embedding("cardinal");
        assert_eq!(
            p.tokens
                .index_axis(Axis(0), 4)
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            card
        );
        let bare = render_prompt(&m, "{}", "cardinal", None).unwrap();
        assert_eq!(bare.len(), 1);
        let e = init_embedding(&m, 0, "cardinal", 2).unwrap();
        let ps = render_prompt(&m, "a photo of a {}", "cardinal", Some(&e)).unwrap();
        assert_eq!(ps.kind, PromptKind::ClassSpecific);
        assert_eq!(ps.len(), p.len() + 1);
        assert!(init_embedding(&m, 0, "two words", 2).is_err());
    }

    #[test]
    fn zero_iterations_is_identity_and_backbone_untouched() {
        let h = BackboneHandle::new(Arc::new(MockBackbone::new(0)));
        let z = LatentTensor::new(Tensor::from_elem(IxDyn(&[4, 4, 4]), 0.2), 0);
        let e = init_embedding(h.model(), 3, "red_circle", 2).unwrap();
        let cfg = PromptOptConfig {
            iters: 0,
            ..Default::default()
        };
        let (out, losses) =
            optimize_embedding(&h, &e, &[&z], &TemplateSet::standard(), &cfg, 1).unwrap();
        assert!(losses.is_empty());
        assert_eq!(out.vectors, e.vectors);
        assert!(out.frozen);
        let before = h.checksum();
        let cfg = PromptOptConfig {
            iters: 20,
            lr: 1e-2,
            warmup_iters: 5,
            ..Default::default()
        };
        let (out, losses) =
            optimize_embedding(&h, &e, &[&z], &TemplateSet::standard(), &cfg, 1).unwrap();
        assert_eq!(losses.len(), 20);
        assert_ne!(out.vectors, e.vectors);
        assert_eq!(h.checksum(), before);
        assert!(optimize_embedding(&h, &e, &[], &TemplateSet::standard(), &cfg, 1).is_err());
    }

    #[test]
    fn store_round_trip() {
        let m = MockBackbone::new(0);
        let mut s = PromptStore {
            config_hash: "abc".into(),
            ..Default::default()
        };
        let mut e = init_embedding(&m, 4, "blue_ring", 3).unwrap();
        e.frozen = true;
        s.insert(e.clone()).unwrap();
        assert!(s.insert(e).is_err());
        let back = PromptStore::from_container(
            &Container::from_bytes(&s.to_container().to_bytes(PROMPT_HEADER), PROMPT_HEADER)
                .unwrap(),
        )
        .unwrap();
        assert_eq!(back, s);
    }
}
