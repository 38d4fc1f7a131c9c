//! Run configuration: a TOML tree with defaults, dotted-key overrides,
//! field-level validation and the ablation presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PromptOptConfig;
use crate::protocol::{
    DatasetLayout, EfficiencyConfig, FeatureToggles, OptimConfig, ProtocolConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    /// `toy`, `mock`, or a layout name (`cub200`, `mini_imagenet`, `cifar100`).
    pub dataset: String,
    /// `mock`, `toy` (bundled checkpoint) or a path to a backbone file.
    pub backbone: String,
    pub seed: u64,
    /// Seed of the rendered toy dataset; follows `seed` when unset.
    pub data_seed: Option<u64>,
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Raw-label to single-word map; labels are joined with underscores
    /// when unset.
    pub label_map: Option<PathBuf>,
    /// Previously learned prompts to reuse.
    pub prompts: Option<PathBuf>,
    /// Final accuracy of a comparison run, for the FI metric.
    pub baseline_final: Option<f64>,
    pub save_checkpoints: bool,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults for the toy benchmark.
    fn default() -> Self {
        let base = ProtocolConfig::default();
        let protocol = ProtocolConfig {
            agg_channels: 32,
            efficiency: EfficiencyConfig {
                generation_steps: 10,
                ..base.efficiency.clone()
            },
            optim: OptimConfig {
                base_epochs: 5,
                inc_epochs: 5,
                batch_size: 32,
                ..base.optim.clone()
            },
            prompt: PromptOptConfig {
                iters: 100,
                warmup_iters: 10,
                lr: 5e-3,
                batch: 2,
                ..base.prompt.clone()
            },
            ..base
        };
        Self {
            run_id: "run".into(),
            dataset: "toy".into(),
            backbone: "toy".into(),
            seed: 0,
            data_seed: None,
            workers: 1,
            out_dir: PathBuf::from("runs/default"),
            label_map: None,
            prompts: None,
            baseline_final: None,
            save_checkpoints: true,
            protocol,
        }
    }
}

/// Ablation presets applied on top of a base configuration.
pub const PRESETS: [&str; 16] = [
    "ablation_a",
    "ablation_b",
    "ablation_c",
    "ablation_d",
    "no_distill",
    "beta_init_00",
    "beta_init_01",
    "beta_init_05",
    "beta_init_07",
    "m2",
    "m4",
    "m6",
    "single_t_03",
    "single_t_05",
    "single_t_07",
    "efficient",
];

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("{path}: {k} is not inside a table")]))?;
        if i + 1 == keys.len() {
            table.insert(k.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides with dotted keys,
    /// and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(vec![format!("parse: {}", e.message())]))?;
        // Partial tables fall back to the run defaults, not to the nested
        // types' own defaults.
        let mut root = toml::Value::try_from(Self::default()).expect("config serializes");
        merge(&mut root, user);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(vec![format!("override {o:?} is not key=value")]))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text, overrides)
    }

    /// Resolved configuration with every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn layout(&self) -> Result<DatasetLayout> {
        DatasetLayout::named(&self.dataset)
    }

    /// Every violated constraint, one diagnostic per field.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        let p = &self.protocol;
        if !p.features.inv {
            d.push("protocol.features.inv: feature toggles must include inv".into());
        }
        match p.single_t {
            Some(f) if !(f > 0.0 && f <= 1.0) => {
                d.push(format!("protocol.single_t: must lie in (0, 1], got {f}"));
            }
            None if p.m <= 1 => d.push(format!(
                "protocol.m: the timestep grid requires m > 1 (got {}) unless protocol.single_t is set",
                p.m
            )),
            _ => {}
        }
        if !(0.0..=1.0).contains(&p.beta_init) {
            d.push(format!(
                "protocol.beta_init: must lie in [0, 1], got {}",
                p.beta_init
            ));
        }
        if let Some(b) = p.beta_override {
            if !(0.0..=1.0).contains(&b) {
                d.push(format!(
                    "protocol.beta_override: must lie in [0, 1], got {b}"
                ));
            }
        }
        let (lo, hi) = p.layer_range;
        if lo == 0 || lo > hi || hi > crate::backbone::NUM_TAPS {
            d.push(format!(
                "protocol.layer_range: need 1 <= lo <= hi <= {}, got ({lo}, {hi})",
                crate::backbone::NUM_TAPS
            ));
        }
        for (name, v) in [
            ("protocol.agg_channels", p.agg_channels),
            (
                "protocol.efficiency.generation_steps",
                p.efficiency.generation_steps,
            ),
            ("protocol.optim.batch_size", p.optim.batch_size),
            ("protocol.prompt.n_vec", p.prompt.n_vec),
            ("protocol.prompt.batch", p.prompt.batch),
            ("protocol.head.d_cls", p.head.d_cls),
            ("protocol.head.neck_stride", p.head.neck_stride),
            ("workers", self.workers),
        ] {
            if v == 0 {
                d.push(format!("{name}: must be at least 1"));
            }
        }
        if p.head.gn_groups == 0 || !p.head.d_neck.is_multiple_of(p.head.gn_groups) {
            d.push(format!(
                "protocol.head.gn_groups: must divide head.d_neck = {}, got {}",
                p.head.d_neck, p.head.gn_groups
            ));
        }
        if !(0.0..=1.0).contains(&p.optim.aug_final_fraction) {
            d.push("protocol.optim.aug_final_fraction: must lie in [0, 1]".into());
        }
        if p.optim.replay_ratio < 0.0 {
            d.push("protocol.optim.replay_ratio: must be non-negative".into());
        }
        match self.layout() {
            Ok(l) => {
                if p.head.d_cls + 1 < l.total_classes() {
                    d.push(format!(
                        "protocol.head.d_cls: prototypes for {} classes need d_cls >= {}",
                        l.total_classes(),
                        l.total_classes() - 1
                    ));
                }
            }
            Err(e) => d.push(format!("dataset: {e}")),
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d))
        }
    }

    /// Applies an ablation preset and tags the run id with its name.
    pub fn with_preset(&self, preset: &str) -> Result<Self> {
        let mut c = self.clone();
        let p = &mut c.protocol;
        let toggles = |syn, gen, aug| FeatureToggles {
            inv: true,
            syn,
            aug,
            gen,
        };
        match preset {
            "ablation_a" => p.features = toggles(false, false, false),
            "ablation_b" => p.features = toggles(true, false, false),
            "ablation_c" => p.features = toggles(true, true, false),
            "ablation_d" => p.features = toggles(true, true, true),
            "no_distill" => p.beta_override = Some(0.0),
            "beta_init_00" => p.beta_init = 0.0,
            "beta_init_01" => p.beta_init = 0.1,
            "beta_init_05" => p.beta_init = 0.5,
            "beta_init_07" => p.beta_init = 0.7,
            "m2" | "m4" | "m6" => {
                p.m = preset[1..].parse().expect("digit");
                p.single_t = None;
            }
            "single_t_03" | "single_t_05" | "single_t_07" => {
                p.single_t =
                    Some(preset["single_t_0".len()..].parse::<f64>().expect("digit") / 10.0);
            }
            "efficient" => {
                p.efficiency.generation_steps = (p.efficiency.generation_steps / 2).max(1);
                p.efficiency.max_iters = Some(p.efficiency.max_iters.unwrap_or(200).min(200));
            }
            other => {
                return Err(Error::Config(vec![format!(
                    "preset: unknown preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )]))
            }
        }
        c.run_id = format!("{}_{preset}", self.run_id);
        c.out_dir = self.out_dir.join(preset);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_diagnostics() {
        let c = RunConfig::from_toml("seed = 3\n", &["protocol.m=6".into(), "run_id=abc".into()])
            .unwrap();
        assert_eq!((c.seed, c.protocol.m, c.run_id.as_str()), (3, 6, "abc"));
        let err = RunConfig::from_toml("[protocol]\nm = 1\nbeta_init = 2.0\n", &[]).unwrap_err();
        let Error::Config(d) = err else {
            panic!("expected config error")
        };
        assert!(d
            .iter()
            .any(|x| x.starts_with("protocol.m") && x.contains("m > 1")));
        assert!(d.iter().any(|x| x.starts_with("protocol.beta_init")));
        assert!(RunConfig::from_toml("[protocol]\nm = 1\nsingle_t = 0.5\n", &[]).is_ok());
        assert!(RunConfig::from_toml("[protocol.features]\ninv = false\n", &[]).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn partial_tables_keep_run_defaults() {
        let c = RunConfig::from_toml(
            "[protocol.optim]\nreplay_ratio = 0.5\n",
            &["protocol.m=6".into()],
        )
        .unwrap();
        let mut expect = RunConfig::default();
        expect.protocol.optim.replay_ratio = 0.5;
        expect.protocol.m = 6;
        assert_eq!(c, expect);
    }

    #[test]
    fn presets_change_only_their_axis() {
        let base = RunConfig::default();
        let a = base.with_preset("ablation_a").unwrap();
        let d = base.with_preset("ablation_d").unwrap();
        let mut a2 = a.protocol.clone();
        a2.features = d.protocol.features;
        assert_eq!(a2, d.protocol);
        assert!(!a.protocol.features.syn && d.protocol.features.aug);
        assert_eq!(
            base.with_preset("single_t_03").unwrap().protocol.single_t,
            Some(0.3)
        );
        assert_eq!(
            base.with_preset("no_distill")
                .unwrap()
                .protocol
                .beta_override,
            Some(0.0)
        );
        for p in PRESETS {
            base.with_preset(p).unwrap();
        }
        assert!(base.with_preset("nope").is_err());
    }
}
