//! End-to-end runs: backbone and benchmark construction, prompt learning,
//! session training, per-session evaluation and result emission.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backbone::mock::MockBackbone;
use crate::backbone::toy::ToyBackbone;
use crate::backbone::{Backbone, BackboneHandle};
use crate::config::RunConfig;
use crate::data::{Dataset, ToyBenchmarkSpec};
use crate::error::{Error, Result};
use crate::eval::{emit, evaluate_session, summarize, RunSummary, SessionResult};
use crate::prompts::{normalize_label, LabelMap, PromptStore};
use crate::protocol::{learn_class_prompts, sessions_from_classes, Benchmark, TrainState};

/// Seed of the mock backbone used by every mock run.
pub const MOCK_BACKBONE_SEED: u64 = 0;

pub fn load_backbone(spec: &str) -> Result<BackboneHandle> {
    let model: Arc<dyn Backbone> = match spec {
        "mock" => Arc::new(MockBackbone::new(MOCK_BACKBONE_SEED)),
        "toy" => Arc::new(ToyBackbone::bundled()?),
        path => Arc::new(ToyBackbone::load(Path::new(path))?),
    };
    Ok(BackboneHandle::new(model))
}

/// The rendered benchmark named by the configuration.
pub fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let spec = match cfg.dataset.as_str() {
        "toy" => ToyBenchmarkSpec::standard(),
        "mock" => ToyBenchmarkSpec::mock(),
        other => {
            return Err(Error::Data(format!(
                "dataset {other:?} defines a session layout only; its images are not bundled"
            )))
        }
    };
    let data = Dataset::toy(&spec, cfg.data_seed());
    let map = match &cfg.label_map {
        Some(p) => LabelMap::load(p)?,
        None => LabelMap::underscored(&data.raw_labels),
    };
    let labels = data
        .raw_labels
        .iter()
        .map(|l| normalize_label(l, &map))
        .collect::<Result<Vec<_>>>()?;
    let sizes = spec.sessions();
    let mut lists = Vec::new();
    let mut next = 0;
    for n in sizes {
        lists.push((next..next + n).collect());
        next += n;
    }
    let sessions = sessions_from_classes(lists, spec.shots)?;
    Benchmark::new(data, labels, sessions)
}

/// Fresh training state for a configuration.
pub fn new_state(
    cfg: &RunConfig,
    backbone: &BackboneHandle,
    bench: &Benchmark,
) -> Result<TrainState> {
    let mut st = TrainState::new(
        backbone.clone(),
        cfg.protocol.clone(),
        bench.num_classes(),
        cfg.seed,
    )?;
    st.workers = cfg.workers;
    if let Some(p) = &cfg.prompts {
        st.prompts = PromptStore::load(p)?;
    }
    Ok(st)
}

/// Learns class prompts for every session, each from its own images.
pub fn learn_all_prompts(
    cfg: &RunConfig,
    backbone: &BackboneHandle,
    bench: &Benchmark,
) -> Result<PromptStore> {
    let mut store = PromptStore {
        config_hash: format!(
            "{:016x}",
            crate::rng::hash_str(&serde_json::to_string(&cfg.protocol.prompt)?)
        ),
        ..Default::default()
    };
    for s in &bench.sessions {
        for e in learn_class_prompts(
            backbone,
            bench,
            &s.samples,
            &s.classes,
            &cfg.protocol.prompt,
            cfg.seed,
            cfg.workers,
        )? {
            store.insert(e)?;
        }
    }
    Ok(store)
}

pub fn checkpoint_path(out_dir: &Path, session: usize) -> PathBuf {
    out_dir.join(format!("session{session}.ck"))
}

/// Trains every session, calling `after` with the state after each one.
pub fn train_sessions(
    state: &mut TrainState,
    bench: &Benchmark,
    mut after: impl FnMut(&TrainState, usize) -> Result<()>,
) -> Result<()> {
    for s in 0..bench.sessions.len() {
        if s == 0 {
            state.train_base(bench)?;
        } else {
            state.train_incremental(bench, s)?;
        }
        after(state, s)?;
    }
    Ok(())
}

/// Runs the full protocol with an optional pre-learned prompt store and
/// returns the summary without writing files.
pub fn run_in_memory(
    cfg: &RunConfig,
    backbone: &BackboneHandle,
    bench: &Benchmark,
    prompts: Option<PromptStore>,
) -> Result<(RunSummary, TrainState)> {
    let mut st = new_state(cfg, backbone, bench)?;
    if let Some(p) = prompts {
        st.prompts = p;
    }
    let mut results: Vec<SessionResult> = Vec::new();
    train_sessions(&mut st, bench, |st, s| {
        results.push(evaluate_session(st, bench, s)?);
        Ok(())
    })?;
    let summary = summarize(
        &cfg.run_id,
        cfg.seed,
        results,
        &bench.sessions[0].classes,
        cfg.baseline_final,
    )?;
    Ok((summary, st))
}

/// Full run: trains, evaluates after each session and writes results, the
/// resolved configuration, learned prompts and per-session checkpoints.
pub fn run(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let backbone = load_backbone(&cfg.backbone)?;
    let bench = load_benchmark(cfg)?;
    progress(&format!(
        "backbone {} ({}), {} classes in {} sessions",
        cfg.backbone,
        backbone.model().kind(),
        bench.num_classes(),
        bench.sessions.len()
    ));
    let mut st = new_state(cfg, &backbone, &bench)?;
    let mut results = Vec::new();
    train_sessions(&mut st, &bench, |st, s| {
        let r = evaluate_session(st, &bench, s)?;
        progress(&format!(
            "session {s}: {} classes, acc {:.1}",
            r.num_classes, r.acc
        ));
        results.push(r);
        if cfg.save_checkpoints {
            st.save(&checkpoint_path(&cfg.out_dir, s))?;
        }
        Ok(())
    })?;
    if !st.prompts.entries.is_empty() {
        st.prompts.save(&cfg.out_dir.join("prompts.pe"))?;
    }
    let summary = summarize(
        &cfg.run_id,
        cfg.seed,
        results,
        &bench.sessions[0].classes,
        cfg.baseline_final,
    )?;
    emit(&summary, &cfg.out_dir)?;
    Ok(summary)
}

/// Evaluates saved per-session checkpoints and writes results.
pub fn evaluate_checkpoints(cfg: &RunConfig, ckpt_dir: &Path) -> Result<RunSummary> {
    let backbone = load_backbone(&cfg.backbone)?;
    let bench = load_benchmark(cfg)?;
    let prompts = match &cfg.prompts {
        Some(p) => PromptStore::load(p)?,
        None => {
            let p = ckpt_dir.join("prompts.pe");
            if p.exists() {
                PromptStore::load(&p)?
            } else {
                PromptStore::default()
            }
        }
    };
    let mut results = Vec::new();
    for s in 0..bench.sessions.len() {
        let path = checkpoint_path(ckpt_dir, s);
        if !path.exists() {
            break;
        }
        let st = TrainState::load(
            &path,
            backbone.clone(),
            cfg.protocol.clone(),
            bench.num_classes(),
            prompts.clone(),
        )?;
        results.push(evaluate_session(&st, &bench, s)?);
    }
    let summary = summarize(
        &cfg.run_id,
        cfg.seed,
        results,
        &bench.sessions[0].classes,
        cfg.baseline_final,
    )?;
    emit(&summary, &cfg.out_dir)?;
    Ok(summary)
}
