//! `difscil` command-line driver.
//!
//! Exit codes: 0 on success, 2 for invalid configuration or arguments, 1
//! for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use difscil::backbone::toy::{train_toy_backbone, ToyTrainConfig};
use difscil::config::{RunConfig, PRESETS};
use difscil::eval::RunSummary;
use difscil::runner;
use difscil::Error;

#[derive(Parser)]
#[command(
    name = "difscil",
    version,
    about = "Diffusion-feature few-shot class-incremental learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for prompt learning.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set protocol.m=6`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy diffusion backbone and write it to a file.
    PrepareBackbone {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        unet_steps: Option<usize>,
        #[arg(long)]
        vae_steps: Option<usize>,
    },
    /// Learn class-specific prompts for every class; writes `prompts.pe`.
    LearnPrompts(RunArgs),
    /// Train all sessions; writes per-session checkpoints.
    Train(RunArgs),
    /// Evaluate saved checkpoints and write result files.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding the checkpoints; defaults to the output directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Train, evaluate each session and write result files.
    Run(RunArgs),
    /// Run an ablation preset on top of the configuration.
    Ablate {
        /// One of the preset names (see `--help`).
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(w) = args.workers {
        sets.push(format!("workers={w}"));
    }
    if let Some(o) = &args.out {
        sets.push(format!("out_dir={}", toml_string(&o.display().to_string())));
    }
    match &args.config {
        Some(p) => RunConfig::load(p, &sets),
        None => RunConfig::from_toml("", &sets),
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn echo(cfg: &RunConfig) {
    eprintln!("# resolved configuration (seed {})", cfg.seed);
    eprint!("{}", cfg.to_toml());
}

fn report(s: &RunSummary) {
    let accs: Vec<String> = s.sessions.iter().map(|r| format!("{:.1}", r.acc)).collect();
    println!("sessions: {}", accs.join(" "));
    println!(
        "AA {:.1}  Acc {:.1}  Base {:.1}  Inc {}",
        s.aa,
        s.acc,
        s.base,
        s.inc.map_or("-".into(), |v| format!("{v:.1}"))
    );
    if let Some(fi) = s.fi {
        println!("FI {fi:+.1}");
    }
}

fn progress(start: Instant) -> impl FnMut(&str) {
    move |m| eprintln!("[{:>7.1}s] {m}", start.elapsed().as_secs_f64())
}

fn execute(cmd: Cmd) -> anyhow::Result<()> {
    let start = Instant::now();
    match cmd {
        Cmd::PrepareBackbone {
            out,
            seed,
            unet_steps,
            vae_steps,
        } => {
            let mut cfg = ToyTrainConfig {
                seed,
                ..Default::default()
            };
            if let Some(s) = unet_steps {
                cfg.unet_steps = s;
            }
            if let Some(s) = vae_steps {
                cfg.vae_steps = s;
            }
            let m = train_toy_backbone(&cfg, progress(start))?;
            m.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("backbone written to {}", out.display());
        }
        Cmd::LearnPrompts(args) => {
            let cfg = resolve(&args)?;
            echo(&cfg);
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
            let backbone = runner::load_backbone(&cfg.backbone)?;
            let bench = runner::load_benchmark(&cfg)?;
            let store = runner::learn_all_prompts(&cfg, &backbone, &bench)?;
            let path = cfg.out_dir.join("prompts.pe");
            store.save(&path)?;
            eprintln!(
                "{} prompts written to {}",
                store.entries.len(),
                path.display()
            );
        }
        Cmd::Train(args) => {
            let mut cfg = resolve(&args)?;
            cfg.save_checkpoints = true;
            echo(&cfg);
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
            let backbone = runner::load_backbone(&cfg.backbone)?;
            let bench = runner::load_benchmark(&cfg)?;
            let mut st = runner::new_state(&cfg, &backbone, &bench)?;
            let mut log = progress(start);
            runner::train_sessions(&mut st, &bench, |st, s| {
                st.save(&runner::checkpoint_path(&cfg.out_dir, s))?;
                log(&format!("session {s} trained"));
                Ok(())
            })?;
            if !st.prompts.entries.is_empty() {
                st.prompts.save(&cfg.out_dir.join("prompts.pe"))?;
            }
        }
        Cmd::Eval { run, checkpoints } => {
            let cfg = resolve(&run)?;
            echo(&cfg);
            let dir = checkpoints.unwrap_or_else(|| cfg.out_dir.clone());
            let s = runner::evaluate_checkpoints(&cfg, &dir)?;
            report(&s);
        }
        Cmd::Run(args) => {
            let cfg = resolve(&args)?;
            echo(&cfg);
            report(&runner::run(&cfg, progress(start))?);
        }
        Cmd::Ablate { preset, run } => {
            let cfg = resolve(&run)?.with_preset(&preset)?;
            echo(&cfg);
            report(&runner::run(&cfg, progress(start))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Error>() {
            Some(Error::Config(diags)) => {
                eprintln!("invalid configuration:");
                for d in diags {
                    eprintln!("  {d}");
                }
                ExitCode::from(2)
            }
            _ => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
