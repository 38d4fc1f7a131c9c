//! Session protocol: class splits, exemplar memory, the distillation
//! schedule, base and incremental training, inference and checkpoints.
//!
//! The base session trains aggregator, neck and head on inversion and
//! synthetic features, adding augmented features in its final epochs, then
//! freezes aggregator and neck. Incremental sessions train only the head on
//! new-class features mixed with generative replay of earlier classes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregate::{Aggregator, DEFAULT_AGG_CHANNELS};
use crate::autograd::{Graph, Tensor};
use crate::backbone::{
    BackboneHandle, LatentTensor, PromptEmbedding, TapBatch, DEFAULT_GUIDANCE, DEFAULT_TAP_RANGE,
};
use crate::container::{Container, CHECKPOINT_HEADER};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::features::{AugSchedule, Extractor, TimestepGrid, DEFAULT_FULL_STEPS, DEFAULT_M};
use crate::heads::{
    classify, distill_loss_graph, dr_loss_graph, ConvNeck, EtfPrototypes, HeadConfig, MlpHead,
    Mode, TeacherSnapshot,
};
use crate::nn::AdamW;
use crate::prompts::{
    init_embedding, optimize_embedding, render_prompt, ClassPromptEmbedding, PromptOptConfig,
    PromptStore, TemplateSet, GENERATION_TEMPLATE,
};
use crate::rng::{self, Purpose};

/// Class counts of a benchmark split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLayout {
    pub base_classes: usize,
    pub ways: usize,
    pub incremental_sessions: usize,
    pub shots: usize,
}

impl DatasetLayout {
    pub fn cub200() -> Self {
        Self {
            base_classes: 100,
            ways: 10,
            incremental_sessions: 10,
            shots: 5,
        }
    }

    pub fn mini_imagenet() -> Self {
        Self {
            base_classes: 60,
            ways: 5,
            incremental_sessions: 8,
            shots: 5,
        }
    }

    pub fn cifar100() -> Self {
        Self::mini_imagenet()
    }

    /// 10 base classes, then two 2-way 5-shot sessions.
    pub fn toy() -> Self {
        Self {
            base_classes: 10,
            ways: 2,
            incremental_sessions: 2,
            shots: 5,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "cub200" => Ok(Self::cub200()),
            "mini_imagenet" => Ok(Self::mini_imagenet()),
            "cifar100" => Ok(Self::cifar100()),
            "toy" | "mock" => Ok(Self::toy()),
            other => Err(Error::Spec(format!("unknown dataset layout {other:?}"))),
        }
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.ways * self.incremental_sessions
    }
}

/// One session: its classes and the training samples it may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub index: usize,
    pub classes: Vec<usize>,
    /// Shots per class; `None` for the data-rich base session.
    pub shots: Option<usize>,
    /// Training sample ids, in dataset order.
    pub samples: Vec<u64>,
}

impl SessionSpec {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }
}

/// Consecutive class ids split into base and incremental sessions.
pub fn build_sessions(layout: &DatasetLayout) -> Result<Vec<SessionSpec>> {
    let mut lists = vec![(0..layout.base_classes).collect::<Vec<_>>()];
    for s in 0..layout.incremental_sessions {
        let start = layout.base_classes + s * layout.ways;
        lists.push((start..start + layout.ways).collect());
    }
    sessions_from_classes(lists, layout.shots)
}

/// Sessions from explicit class lists; the first list is the base session.
pub fn sessions_from_classes(lists: Vec<Vec<usize>>, shots: usize) -> Result<Vec<SessionSpec>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(lists.len());
    for (index, classes) in lists.into_iter().enumerate() {
        if classes.is_empty() {
            return Err(Error::Spec(format!("session {index} has no classes")));
        }
        for &c in &classes {
            if !seen.insert(c) {
                return Err(Error::Spec(format!(
                    "class {c} appears in more than one session"
                )));
            }
        }
        out.push(SessionSpec {
            index,
            classes,
            shots: (index > 0).then_some(shots),
            samples: Vec::new(),
        });
    }
    Ok(out)
}

/// Number of classes evaluated after each session, `|C^{0:s}|`.
pub fn cumulative_classes(sessions: &[SessionSpec]) -> Vec<usize> {
    sessions
        .iter()
        .scan(0, |acc, s| {
            *acc += s.ways();
            Some(*acc)
        })
        .collect()
}

/// Fills each session with its training samples: all of them in the base
/// session, the first `shots` per class afterwards.
pub fn attach_samples(sessions: &mut [SessionSpec], data: &Dataset) -> Result<()> {
    for s in sessions.iter_mut() {
        s.samples.clear();
        for &c in &s.classes {
            let mut ids: Vec<u64> = data.train_of(c).map(|x| x.id).collect();
            if let Some(k) = s.shots {
                if ids.len() < k {
                    return Err(Error::Data(format!(
                        "class {c} has {} samples, needs {k}",
                        ids.len()
                    )));
                }
                ids.truncate(k);
            }
            if ids.is_empty() {
                return Err(Error::Data(format!("class {c} has no training samples")));
            }
            s.samples.extend(ids);
        }
    }
    Ok(())
}

/// Linear distillation weight over incremental sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub beta_init: f64,
    /// Number of incremental sessions `S`.
    pub sessions: usize,
}

/// `beta^s = beta_init + (s / S)(1 - beta_init)` for `1 <= s <= S`.
pub fn beta_schedule(s: usize, sched: &DistillSchedule) -> Result<f64> {
    if s == 0 || s > sched.sessions {
        return Err(Error::Range(format!(
            "session {s} outside [1, {}]",
            sched.sessions
        )));
    }
    if !(0.0..=1.0).contains(&sched.beta_init) {
        return Err(Error::Range(format!(
            "beta_init {} outside [0, 1]",
            sched.beta_init
        )));
    }
    Ok(sched.beta_init + (s as f64 / sched.sessions as f64) * (1.0 - sched.beta_init))
}

/// One stored training sample per encountered class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub entries: BTreeMap<usize, u64>,
}

impl ExemplarMemory {
    pub fn add(&mut self, class_id: usize, sample: u64) -> Result<()> {
        if self.entries.contains_key(&class_id) {
            return Err(Error::Memory(format!(
                "class {class_id} already has an exemplar"
            )));
        }
        self.entries.insert(class_id, sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Adds the first sample (in dataset order) of every class of `session`.
pub fn update_memory(
    memory: &mut ExemplarMemory,
    session: &SessionSpec,
    data: &Dataset,
) -> Result<()> {
    for &c in &session.classes {
        let id = session
            .samples
            .iter()
            .copied()
            .find(|id| data.sample(*id).is_some_and(|s| s.class_id == c))
            .ok_or_else(|| {
                Error::Data(format!(
                    "session {} has no sample of class {c}",
                    session.index
                ))
            })?;
        memory.add(c, id)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureToggles {
    pub inv: bool,
    pub syn: bool,
    pub aug: bool,
    pub gen: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        Self {
            inv: true,
            syn: true,
            aug: true,
            gen: true,
        }
    }
}

impl FeatureToggles {
    /// Whether any enabled feature needs learned class prompts.
    pub fn needs_prompts(&self) -> bool {
        self.aug || self.gen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencyConfig {
    /// DDIM steps of a full generation, `S_full`.
    pub generation_steps: usize,
    /// Cap on optimizer steps per session.
    pub max_iters: Option<usize>,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        Self {
            generation_steps: DEFAULT_FULL_STEPS,
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_mlp: f64,
    pub lr_agg: f64,
    /// Neck learning rate; follows `lr_agg` when unset.
    pub lr_neck: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub inc_epochs: usize,
    /// Fraction of base epochs (at the end) that add augmented features.
    pub aug_final_fraction: f64,
    /// Replay items per new-class item in incremental sessions.
    pub replay_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_mlp: 3e-3,
            lr_agg: 1e-3,
            lr_neck: None,
            weight_decay: 1e-4,
            batch_size: 32,
            base_epochs: 10,
            inc_epochs: 10,
            aug_final_fraction: 0.2,
            replay_ratio: 1.0,
        }
    }
}

/// Everything the training protocol reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub features: FeatureToggles,
    /// Segments of the augmentation timestep grid.
    pub m: usize,
    /// Fixed augmentation timestep as a fraction of `T`; replaces the grid.
    pub single_t: Option<f64>,
    pub beta_init: f64,
    /// Distillation weight used in every session instead of the schedule.
    pub beta_override: Option<f64>,
    /// Whether the teacher snapshot holds the neck as well as the head.
    pub teacher_includes_neck: bool,
    /// Word for the inference prompt; the null prompt when unset.
    pub inference_prompt: Option<String>,
    pub guidance_scale: f64,
    pub layer_range: (usize, usize),
    pub agg_channels: usize,
    /// Standard image augmentation in the base session.
    pub base_augment: bool,
    pub head: HeadConfig,
    pub optim: OptimConfig,
    pub efficiency: EfficiencyConfig,
    pub prompt: PromptOptConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            features: FeatureToggles::default(),
            m: DEFAULT_M,
            single_t: None,
            beta_init: 0.1,
            beta_override: None,
            teacher_includes_neck: true,
            inference_prompt: None,
            guidance_scale: DEFAULT_GUIDANCE,
            layer_range: DEFAULT_TAP_RANGE,
            agg_channels: DEFAULT_AGG_CHANNELS,
            base_augment: true,
            head: HeadConfig::default(),
            optim: OptimConfig::default(),
            efficiency: EfficiencyConfig::default(),
            prompt: PromptOptConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn aug_schedule(&self, t_max: usize) -> Result<AugSchedule> {
        match self.single_t {
            Some(f) => {
                let t = (f * t_max as f64).round() as usize;
                if t <= 1 || t > t_max {
                    return Err(Error::Range(format!(
                        "single_t {f} gives timestep {t} outside (1, {t_max}]"
                    )));
                }
                Ok(AugSchedule::Single(t))
            }
            None => Ok(AugSchedule::Grid(TimestepGrid::new(self.m, t_max)?)),
        }
    }

    /// Distillation weight of incremental session `s`.
    pub fn beta(&self, s: usize, sessions: usize) -> Result<f64> {
        match self.beta_override {
            Some(b) => Ok(b),
            None => beta_schedule(
                s,
                &DistillSchedule {
                    beta_init: self.beta_init,
                    sessions,
                },
            ),
        }
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", rng::hash_str(&text))
    }
}

/// A benchmark: samples, normalized class labels and the session split.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub dataset: Dataset,
    /// Single-word label per class id.
    pub labels: Vec<String>,
    pub sessions: Vec<SessionSpec>,
}

impl Benchmark {
    pub fn new(
        dataset: Dataset,
        labels: Vec<String>,
        mut sessions: Vec<SessionSpec>,
    ) -> Result<Self> {
        if labels.len() != dataset.num_classes() {
            return Err(Error::Data(format!(
                "{} labels for {} classes",
                labels.len(),
                dataset.num_classes()
            )));
        }
        attach_samples(&mut sessions, &dataset)?;
        Ok(Self {
            dataset,
            labels,
            sessions,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Classes of sessions `0..=s`.
    pub fn classes_upto(&self, s: usize) -> Vec<usize> {
        self.sessions[..=s]
            .iter()
            .flat_map(|x| x.classes.iter().copied())
            .collect()
    }

    fn image(&self, id: u64) -> Result<&crate::data::Sample> {
        self.dataset
            .sample(id)
            .ok_or_else(|| Error::Data(format!("unknown sample {id}")))
    }
}

/// Which parameter groups changed during a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLedger {
    pub session: usize,
    pub aggregator_updated: bool,
    pub neck_updated: bool,
    pub head_updated: bool,
    pub backbone_checksum: String,
    /// Optimizer steps taken.
    pub iterations: usize,
    /// Classes that received augmented features.
    pub aug_classes: Vec<usize>,
    /// Classes that received generative replay features.
    pub replay_classes: Vec<usize>,
}

/// Loss terms of the last optimizer step of a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub dr: f64,
    pub distill: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Default)]
struct Sourcing {
    aug: std::collections::BTreeSet<usize>,
    replay: std::collections::BTreeSet<usize>,
}

/// Model, memory and bookkeeping carried across sessions.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub extractor: Extractor,
    pub cfg: ProtocolConfig,
    pub aggregator: Aggregator,
    pub neck: ConvNeck,
    pub head: MlpHead,
    pub etf: EtfPrototypes,
    pub teacher: Option<TeacherSnapshot>,
    pub prompts: PromptStore,
    pub memory: ExemplarMemory,
    /// Last trained session.
    pub session: Option<usize>,
    pub seed: u64,
    pub ledger: Vec<SessionLedger>,
    pub last_losses: Vec<StepLosses>,
    /// Worker threads for prompt learning.
    pub workers: usize,
}

fn cosine(it: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * it as f64 / total as f64).cos())
}

impl TrainState {
    pub fn new(
        backbone: BackboneHandle,
        cfg: ProtocolConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut backbone = backbone.with_layer_range(cfg.layer_range)?;
        backbone.guidance_scale = cfg.guidance_scale;
        let extractor = Extractor::new(backbone, cfg.efficiency.generation_steps);
        let init = rng::derive_seed(seed, &[Purpose::Init as u64]);
        let aggregator =
            Aggregator::new(&extractor.backbone.taps_in_range(), cfg.agg_channels, init)?;
        let neck = ConvNeck::new(cfg.agg_channels, &cfg.head, init);
        let head = MlpHead::new(&cfg.head, init);
        let etf = EtfPrototypes::new(num_classes, cfg.head.d_cls, seed)?;
        Ok(Self {
            extractor,
            prompts: PromptStore {
                config_hash: cfg.hash(),
                ..Default::default()
            },
            cfg,
            aggregator,
            neck,
            head,
            etf,
            teacher: None,
            memory: ExemplarMemory::default(),
            session: None,
            seed,
            ledger: Vec::new(),
            last_losses: Vec::new(),
            workers: 1,
        })
    }

    pub fn backbone(&self) -> &BackboneHandle {
        &self.extractor.backbone
    }

    fn class_name_prompt(&self, label: &str) -> Result<PromptEmbedding> {
        render_prompt(self.backbone().model(), "{}", label, None)
    }

    fn class_prompt(&self, class_id: usize) -> Result<PromptEmbedding> {
        let e = self.prompts.get(class_id)?;
        render_prompt(
            self.backbone().model(),
            GENERATION_TEMPLATE,
            &e.label,
            Some(e),
        )
    }

    fn inference_prompt(&self) -> Result<PromptEmbedding> {
        match &self.cfg.inference_prompt {
            Some(word) => self.class_name_prompt(word),
            None => Ok(self.backbone().null_prompt()),
        }
    }

    fn latents(&self, bench: &Benchmark, ids: &[u64]) -> Result<Vec<LatentTensor>> {
        let imgs: Vec<&Tensor> = ids
            .iter()
            .map(|id| bench.image(*id).map(|s| &s.image))
            .collect::<Result<_>>()?;
        self.backbone().encode_images(&imgs)
    }

    /// Learns class-specific prompts for the classes of `session` that have
    /// none yet, using that session's images only. Skipped when no enabled
    /// feature uses them.
    pub fn learn_prompts(&mut self, bench: &Benchmark, session: usize) -> Result<()> {
        if !self.cfg.features.needs_prompts() {
            return Ok(());
        }
        let spec = &bench.sessions[session];
        let todo: Vec<usize> = spec
            .classes
            .iter()
            .copied()
            .filter(|c| !self.prompts.entries.contains_key(c))
            .collect();
        let learned = learn_class_prompts(
            self.backbone(),
            bench,
            &spec.samples,
            &todo,
            &self.cfg.prompt,
            self.seed,
            self.workers,
        )?;
        for e in learned {
            self.prompts.insert(e)?;
        }
        Ok(())
    }

    fn check_session(&self, s: usize, bench: &Benchmark) -> Result<()> {
        if s >= bench.sessions.len() {
            return Err(Error::Ordering(format!("session {s} does not exist")));
        }
        let expected = self.session.map_or(0, |x| x + 1);
        if s != expected {
            return Err(match (s, self.session) {
                (0, Some(_)) => Error::State("base session already trained".into()),
                _ => Error::Ordering(format!("session {s} out of order; next is {expected}")),
            });
        }
        Ok(())
    }

    /// Base session: prompts, then aggregator, neck and head trained with the
    /// dot-regression loss on inversion and synthetic features, with
    /// augmented features added in the final epochs.
    pub fn train_base(&mut self, bench: &Benchmark) -> Result<()> {
        self.check_session(0, bench)?;
        self.learn_prompts(bench, 0)?;
        let before = self.checksums();
        let spec = bench.sessions[0].clone();
        let f = self.cfg.features;
        let o = self.cfg.optim.clone();
        let schedule = self.cfg.aug_schedule(self.extractor.t_max())?;
        let null = self.backbone().null_prompt();
        let name_prompts: Vec<PromptEmbedding> = bench
            .labels
            .iter()
            .map(|l| self.class_name_prompt(l))
            .collect::<Result<_>>()?;
        let class_prompts: BTreeMap<usize, PromptEmbedding> = if f.aug {
            spec.classes
                .iter()
                .map(|&c| Ok((c, self.class_prompt(c)?)))
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        let aug_epochs = if f.aug {
            ((o.base_epochs as f64 * o.aug_final_fraction).ceil() as usize)
                .clamp(1, o.base_epochs.max(1))
        } else {
            0
        };
        let batch = o.batch_size.max(1);
        let steps_per_epoch = spec.samples.len().div_ceil(batch);
        let mut total = o.base_epochs * steps_per_epoch;
        if let Some(cap) = self.cfg.efficiency.max_iters {
            total = total.min(cap);
        }
        let mut opt_agg = AdamW::new(o.lr_agg, o.weight_decay);
        let mut opt_neck = AdamW::new(o.lr_neck.unwrap_or(o.lr_agg), o.weight_decay);
        let mut opt_head = AdamW::new(o.lr_mlp, o.weight_decay);
        let mut it = 0;
        let mut last = StepLosses::default();
        let mut sourced = Sourcing::default();
        'epochs: for epoch in 0..o.base_epochs {
            let use_aug = epoch >= o.base_epochs - aug_epochs;
            let mut order = spec.samples.clone();
            order.shuffle(&mut rng::stream(
                self.seed,
                &[Purpose::Shuffle as u64, 0, epoch as u64],
            ));
            for ids in order.chunks(batch) {
                if it >= total {
                    break 'epochs;
                }
                let samples: Vec<&crate::data::Sample> = ids
                    .iter()
                    .map(|id| bench.image(*id))
                    .collect::<Result<_>>()?;
                let images: Vec<Tensor> = samples
                    .iter()
                    .map(|s| {
                        if self.cfg.base_augment {
                            augment(
                                &s.image,
                                &mut rng::sample_stream(
                                    self.seed,
                                    Purpose::Augment,
                                    s.id,
                                    epoch as u64,
                                ),
                            )
                        } else {
                            s.image.clone()
                        }
                    })
                    .collect();
                let z0 = self
                    .backbone()
                    .encode_images(&images.iter().collect::<Vec<_>>())?;
                let zr: Vec<&LatentTensor> = z0.iter().collect();
                let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
                let item_seeds: Vec<u64> = samples
                    .iter()
                    .map(|s| rng::derive_seed(self.seed, &[0, s.id, epoch as u64]))
                    .collect();
                let mut parts = Vec::new();
                let mut all_labels = Vec::new();
                if f.inv {
                    parts.push(self.extractor.inv_taps(&zr, &null)?);
                    all_labels.extend(&labels);
                }
                if f.syn {
                    let ps: Vec<&PromptEmbedding> =
                        labels.iter().map(|&c| &name_prompts[c]).collect();
                    parts.push(self.extractor.syn_taps(&zr, &ps, &item_seeds)?);
                    all_labels.extend(&labels);
                }
                if use_aug {
                    let ps: Vec<&PromptEmbedding> =
                        labels.iter().map(|c| &class_prompts[c]).collect();
                    parts.push(self.extractor.aug_taps(&zr, &ps, &schedule, &item_seeds)?);
                    all_labels.extend(&labels);
                    sourced.aug.extend(&labels);
                }
                let taps = TapBatch::concat(&parts)?;
                let mut g = Graph::new();
                g.train(&self.aggregator.store);
                g.train(&self.neck.store);
                g.train(&self.head.store);
                let feats = self.aggregator.forward(&mut g, &taps)?;
                let (v, stats) = self.neck.forward(&mut g, feats, Mode::Train);
                let h = self.head.forward(&mut g, v);
                let loss = dr_loss_graph(&mut g, h, &all_labels, &self.etf)?;
                let value = g.scalar(loss);
                let grads = g.backward(loss);
                let lr = cosine(it, total);
                opt_agg.step(&mut self.aggregator.store, &grads, lr);
                opt_neck.step(&mut self.neck.store, &grads, lr);
                opt_head.step(&mut self.head.store, &grads, lr);
                if let Some(s) = stats {
                    self.neck.update_running(&s);
                }
                last = StepLosses {
                    dr: value,
                    distill: 0.0,
                    beta: 0.0,
                    total: value,
                };
                it += 1;
            }
        }
        self.recalibrate_neck(bench, &spec.samples)?;
        self.finish_session(bench, 0, before, it, last, sourced)
    }

    /// Incremental session `s`: prompts for the new classes, then head-only
    /// training on new-class inversion, synthetic and augmented features,
    /// memory exemplars, and generative replay of earlier classes with
    /// distillation toward the teacher.
    pub fn train_incremental(&mut self, bench: &Benchmark, s: usize) -> Result<()> {
        if s == 0 {
            return Err(Error::Ordering("session 0 is the base session".into()));
        }
        self.check_session(s, bench)?;
        self.learn_prompts(bench, s)?;
        let before = self.checksums();
        let spec = bench.sessions[s].clone();
        let f = self.cfg.features;
        let o = self.cfg.optim.clone();
        let beta = self.cfg.beta(s, bench.sessions.len() - 1)?;
        let schedule = self.cfg.aug_schedule(self.extractor.t_max())?;
        let old_classes = bench.classes_upto(s - 1);
        let teacher = self
            .teacher
            .clone()
            .ok_or_else(|| Error::State("no teacher snapshot".into()))?;

        // Aggregator and neck are frozen, so fixed features reduce to neck
        // outputs computed once.
        let mem_ids: Vec<u64> = old_classes.iter().map(|c| self.memory.entries[c]).collect();
        let fixed_ids: Vec<u64> = spec.samples.iter().chain(&mem_ids).copied().collect();
        let fixed_labels: Vec<usize> = fixed_ids
            .iter()
            .map(|id| bench.image(*id).map(|x| x.class_id))
            .collect::<Result<_>>()?;
        let z_fixed = self.latents(bench, &fixed_ids)?;
        let zf: Vec<&LatentTensor> = z_fixed.iter().collect();
        let mut fixed_parts = Vec::new();
        let mut fixed_y = Vec::new();
        if f.inv {
            fixed_parts.push(
                self.extractor
                    .inv_taps(&zf, &self.backbone().null_prompt())?,
            );
            fixed_y.extend(&fixed_labels);
        }
        if f.syn {
            let name: Vec<PromptEmbedding> = fixed_labels
                .iter()
                .map(|&c| self.class_name_prompt(&bench.labels[c]))
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = fixed_ids
                .iter()
                .map(|id| rng::derive_seed(self.seed, &[s as u64, *id]))
                .collect();
            fixed_parts.push(self.extractor.syn_taps(
                &zf,
                &name.iter().collect::<Vec<_>>(),
                &seeds,
            )?);
            fixed_y.extend(&fixed_labels);
        }
        let fixed_v = self.embed(&TapBatch::concat(&fixed_parts)?)?;

        let z_new: Vec<LatentTensor> = z_fixed[..spec.samples.len()].to_vec();
        let new_labels = &fixed_labels[..spec.samples.len()];
        let new_prompts: BTreeMap<usize, PromptEmbedding> = if f.aug {
            spec.classes
                .iter()
                .map(|&c| Ok((c, self.class_prompt(c)?)))
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        let old_prompts: BTreeMap<usize, PromptEmbedding> = if f.gen {
            old_classes
                .iter()
                .map(|&c| Ok((c, self.class_prompt(c)?)))
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        let n_new = fixed_y.len() + if f.aug { z_new.len() } else { 0 };
        // Replay is sized against new-class rows only; exemplar rows are
        // already old-class data.
        let per_sample = f.inv as usize + f.syn as usize + f.aug as usize;
        let n_replay = if f.gen {
            (o.replay_ratio * (per_sample * spec.samples.len()) as f64).round() as usize
        } else {
            0
        };
        let batch = o.batch_size.max(1);
        let steps_per_epoch = n_new.div_ceil(batch);
        let mut total = o.inc_epochs * steps_per_epoch;
        if let Some(cap) = self.cfg.efficiency.max_iters {
            total = total.min(cap);
        }
        let mut opt = AdamW::new(o.lr_mlp, o.weight_decay);
        let mut it = 0;
        let mut last = StepLosses::default();
        let mut sourced = Sourcing::default();
        'epochs: for epoch in 0..o.inc_epochs {
            if it >= total {
                break;
            }
            let ep = epoch as u64;
            let mut new_v = vec![fixed_v.clone()];
            let mut new_y = fixed_y.clone();
            if f.aug {
                let zr: Vec<&LatentTensor> = z_new.iter().collect();
                let ps: Vec<&PromptEmbedding> =
                    new_labels.iter().map(|c| &new_prompts[c]).collect();
                let seeds: Vec<u64> = spec
                    .samples
                    .iter()
                    .map(|id| rng::derive_seed(self.seed, &[s as u64, *id, ep]))
                    .collect();
                new_v.push(self.embed(&self.extractor.aug_taps(&zr, &ps, &schedule, &seeds)?)?);
                new_y.extend(new_labels);
                sourced.aug.extend(new_labels);
            }
            let new_v = concat_rows(&new_v)?;
            let (replay_v, replay_y) = if n_replay > 0 {
                let y: Vec<usize> = (0..n_replay)
                    .map(|k| old_classes[(epoch * n_replay + k) % old_classes.len()])
                    .collect();
                sourced.replay.extend(&y);
                let ps: Vec<&PromptEmbedding> = y.iter().map(|c| &old_prompts[c]).collect();
                let seeds: Vec<u64> = (0..n_replay)
                    .map(|k| {
                        rng::derive_seed(
                            self.seed,
                            &[Purpose::GenNoise as u64, s as u64, ep, k as u64],
                        )
                    })
                    .collect();
                (Some(self.embed(&self.extractor.gen_taps(&ps, &seeds)?)?), y)
            } else {
                (None, Vec::new())
            };
            let mut order_new: Vec<usize> = (0..new_y.len()).collect();
            let mut order_rep: Vec<usize> = (0..replay_y.len()).collect();
            let mut sr = rng::stream(self.seed, &[Purpose::Shuffle as u64, s as u64, ep]);
            order_new.shuffle(&mut sr);
            order_rep.shuffle(&mut sr);
            for step in 0..steps_per_epoch {
                if it >= total {
                    break 'epochs;
                }
                let a = &order_new[step * batch..((step + 1) * batch).min(order_new.len())];
                let r0 = step * order_rep.len() / steps_per_epoch;
                let r1 = (step + 1) * order_rep.len() / steps_per_epoch;
                let b = &order_rep[r0..r1];
                let mut g = Graph::new();
                g.train(&self.head.store);
                let mut rows = vec![new_v.select(Axis(0), a)];
                let mut labels: Vec<usize> = a.iter().map(|&i| new_y[i]).collect();
                if let Some(rv) = &replay_v {
                    rows.push(rv.select(Axis(0), b));
                    labels.extend(b.iter().map(|&i| replay_y[i]));
                }
                let x = g.constant(concat_rows(&rows)?);
                let h = self.head.forward(&mut g, x);
                let dr = dr_loss_graph(&mut g, h, &labels, &self.etf)?;
                let mut loss = dr;
                let mut distill = 0.0;
                if !b.is_empty() && beta != 0.0 {
                    let rv = replay_v.as_ref().expect("replay present");
                    let xr = g.constant(rv.select(Axis(0), b));
                    let hs = g.slice(h, 0, a.len(), b.len());
                    let ht = teacher.head.forward(&mut g, xr);
                    let d = distill_loss_graph(&mut g, ht, hs);
                    distill = g.scalar(d);
                    let wd = g.scale(d, beta);
                    loss = g.add(dr, wd);
                }
                let total_value = g.scalar(loss);
                let dr_value = g.scalar(dr);
                let grads = g.backward(loss);
                opt.step(&mut self.head.store, &grads, cosine(it, total));
                last = StepLosses {
                    dr: dr_value,
                    distill,
                    beta,
                    total: total_value,
                };
                it += 1;
            }
        }
        self.finish_session(bench, s, before, it, last, sourced)
    }

    fn checksums(&self) -> [String; 4] {
        [
            self.aggregator.store.checksum(),
            self.neck.store.checksum(),
            self.head.store.checksum(),
            self.backbone().checksum(),
        ]
    }

    fn finish_session(
        &mut self,
        bench: &Benchmark,
        s: usize,
        before: [String; 4],
        iterations: usize,
        last: StepLosses,
        sourced: Sourcing,
    ) -> Result<()> {
        let after = self.checksums();
        if after[3] != before[3] {
            return Err(Error::State(
                "backbone parameters changed during training".into(),
            ));
        }
        if s > 0 && (after[0] != before[0] || after[1] != before[1]) {
            return Err(Error::State("frozen aggregator or neck changed".into()));
        }
        self.ledger.push(SessionLedger {
            session: s,
            aggregator_updated: after[0] != before[0],
            neck_updated: after[1] != before[1],
            head_updated: after[2] != before[2],
            backbone_checksum: after[3].clone(),
            iterations,
            aug_classes: sourced.aug.into_iter().collect(),
            replay_classes: sourced.replay.into_iter().collect(),
        });
        self.last_losses.push(last);
        update_memory(&mut self.memory, &bench.sessions[s], &bench.dataset)?;
        self.teacher = Some(TeacherSnapshot::take(
            &self.neck,
            &self.head,
            self.cfg.teacher_includes_neck,
        ));
        self.session = Some(s);
        Ok(())
    }

    /// Precise batch-norm statistics: the running averages are replaced by
    /// the exact statistics of the inversion features of `samples`, the
    /// features used at inference.
    fn recalibrate_neck(&mut self, bench: &Benchmark, samples: &[u64]) -> Result<()> {
        let null = self.backbone().null_prompt();
        let mut feats = Vec::new();
        for ids in samples.chunks(64) {
            let z = self.latents(bench, ids)?;
            let taps = self
                .extractor
                .inv_taps(&z.iter().collect::<Vec<_>>(), &null)?;
            let mut g = Graph::new();
            let f = self.aggregator.forward(&mut g, &taps)?;
            feats.push(g.value(f).clone());
        }
        self.neck.recalibrate(&concat_rows(&feats)?);
        Ok(())
    }

    /// Neck outputs `[N, d_neck]` of taps through the frozen aggregator.
    fn embed(&self, taps: &TapBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let feats = self.aggregator.forward(&mut g, taps)?;
        let (v, _) = self.neck.forward(&mut g, feats, Mode::Eval);
        Ok(g.value(v).clone())
    }

    /// Unit head outputs `[N, d_cls]` of images through the inference path.
    pub fn represent(&self, images: &[&Tensor]) -> Result<Tensor> {
        let z = self.backbone().encode_images(images)?;
        let zr: Vec<&LatentTensor> = z.iter().collect();
        let taps = self.extractor.inv_taps(&zr, &self.inference_prompt()?)?;
        let mut g = Graph::new();
        let feats = self.aggregator.forward(&mut g, &taps)?;
        let (v, _) = self.neck.forward(&mut g, feats, Mode::Eval);
        let h = self.head.forward(&mut g, v);
        Ok(g.value(h).clone())
    }

    /// Predicted class ids over every class seen so far.
    pub fn predict(&self, bench: &Benchmark, images: &[&Tensor]) -> Result<Vec<usize>> {
        let s = self
            .session
            .ok_or_else(|| Error::State("model is untrained".into()))?;
        let allowed = bench.classes_upto(s);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let h = self.represent(chunk)?;
            for row in h.axis_iter(Axis(0)) {
                out.push(classify(
                    row.as_slice().expect("contiguous"),
                    &self.etf,
                    &allowed,
                )?);
            }
        }
        Ok(out)
    }

    pub fn infer(&self, bench: &Benchmark, image: &Tensor) -> Result<usize> {
        Ok(self.predict(bench, &[image])?[0])
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "session": self.session,
            "seed": self.seed,
            "config_hash": self.cfg.hash(),
            "prompt_hash": self.prompts.config_hash,
            "memory": self.memory,
            "ledger": self.ledger,
            "teacher_neck": self.teacher.as_ref().map(|t| t.neck.is_some()),
        }));
        c.push_store("agg.", &self.aggregator.store);
        c.push_store("neck.", &self.neck.store);
        c.push_store("head.", &self.head.store);
        if let Some(t) = &self.teacher {
            if let Some(n) = &t.neck {
                c.push_store("teacher.neck.", &n.store);
            }
            c.push_store("teacher.head.", &t.head.store);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, CHECKPOINT_HEADER)
    }

    /// Restores a state saved with the same configuration; learned prompts
    /// are stored separately and passed in.
    pub fn load(
        path: &Path,
        backbone: BackboneHandle,
        cfg: ProtocolConfig,
        num_classes: usize,
        prompts: PromptStore,
    ) -> Result<Self> {
        let c = Container::read(path, CHECKPOINT_HEADER)?;
        if c.meta["config_hash"].as_str() != Some(cfg.hash().as_str()) {
            return Err(Error::Format(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let seed = c.meta["seed"]
            .as_u64()
            .ok_or_else(|| Error::Format("checkpoint without seed".into()))?;
        let mut st = Self::new(backbone, cfg, num_classes, seed)?;
        c.load_store("agg.", &mut st.aggregator.store)?;
        c.load_store("neck.", &mut st.neck.store)?;
        c.load_store("head.", &mut st.head.store)?;
        st.session = serde_json::from_value(c.meta["session"].clone())?;
        st.memory = serde_json::from_value(c.meta["memory"].clone())?;
        st.ledger = serde_json::from_value(c.meta["ledger"].clone())?;
        if let Some(with_neck) = c.meta["teacher_neck"].as_bool() {
            let mut t = TeacherSnapshot::take(&st.neck, &st.head, with_neck);
            if let Some(n) = t.neck.as_mut() {
                c.load_store("teacher.neck.", &mut n.store)?;
            }
            c.load_store("teacher.head.", &mut t.head.store)?;
            st.teacher = Some(t);
        }
        st.prompts = prompts;
        Ok(st)
    }
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
}

/// Learns prompts for `classes` from the images among `samples`, in
/// parallel over classes with `workers` threads; each class draws from its
/// own random stream, so results do not depend on the worker count.
pub fn learn_class_prompts(
    backbone: &BackboneHandle,
    bench: &Benchmark,
    samples: &[u64],
    classes: &[usize],
    cfg: &PromptOptConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<ClassPromptEmbedding>> {
    let templates = TemplateSet::standard();
    let job = |&c: &usize| -> Result<ClassPromptEmbedding> {
        let imgs: Vec<&Tensor> = samples
            .iter()
            .filter_map(|id| bench.dataset.sample(*id))
            .filter(|x| x.class_id == c)
            .map(|x| &x.image)
            .collect();
        let z = if imgs.is_empty() {
            Vec::new()
        } else {
            backbone.encode_images(&imgs)?
        };
        let init = init_embedding(backbone.model(), c, &bench.labels[c], cfg.n_vec)?;
        let zr: Vec<&LatentTensor> = z.iter().collect();
        Ok(optimize_embedding(backbone, &init, &zr, &templates, cfg, seed)?.0)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    pool.install(|| classes.par_iter().map(job).collect())
}
