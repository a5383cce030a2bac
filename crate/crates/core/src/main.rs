use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssl_desk::augment::RngStream;
use ssl_desk::data::load;
use ssl_desk::eval::linear_probe;
use ssl_desk::harness::{run_experiment, run_grid, selftest, ExperimentConfig, GridKind};
use ssl_desk::nn::{checkpoint, Tower};
use ssl_desk::{Error, Method, Result};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "ssl-desk", version, about = "Desk-scale joint-embedding self-supervised learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Output directory, replacing the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path config patch, e.g. `probe.epochs=5`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(Common),
    /// Replicate an ablation table over presets.
    Grid {
        #[arg(long)]
        kind: GridKind,
        /// Comma-separated method presets.
        #[arg(long, value_delimiter = ',', default_value = "simclr,byol,mocov2,swav,dino,mocov3")]
        presets: Vec<Method>,
        #[command(flatten)]
        common: Common,
    },
    /// Probe an existing checkpoint of the configured tower.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write augmented views of the first pretraining images as PPM files.
    AugmentDump {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

/// Config from `--config`, or the desk defaults for `fallback` when no file is given.
fn resolve_config(common: &Common, fallback: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seeds) = &common.seed_list {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    if let Some(out) = &common.out {
        overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    match (&common.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path, &overrides),
        (None, Some(default)) => ExperimentConfig::parse(&default.to_toml()?, &overrides),
        (None, None) => Err(Error::Config("--config is required".into())),
    }
}

fn run(common: &Common) -> Result<u8> {
    let cfg = resolve_config(common, None)?;
    let row = run_experiment(&cfg)?;
    for t in &row.trials {
        let top1 = t.top1.map_or("diverged".to_string(), |v| format!("{:.4}", v));
        println!("seed {}: top1 {top1} collapsed {}", t.seed, t.collapsed);
    }
    println!("{} [{}]: {}", cfg.preset, row.augmentation, row.cell_text());
    println!("results written to {}", cfg.out.display());
    Ok(if row.all_diverged() { EXIT_DIVERGED } else { 0 })
}

fn grid(kind: GridKind, presets: &[Method], common: &Common) -> Result<u8> {
    let default = ExperimentConfig::new(Method::SimClr, vec![0, 1, 2], 20, 256, "runs/grid");
    let cfg = resolve_config(common, Some(default))?;
    let result = run_grid(&cfg, kind, presets)?;
    print!("{}", result.table_markdown());
    println!("tables written to {}", cfg.out.display());
    let failed = result.failures().count();
    let diverged_only = result.cells.iter().flatten().all(|c| c.as_ref().is_ok_and(|r| r.all_diverged()));
    Ok(match (failed, diverged_only) {
        (0, true) => EXIT_DIVERGED,
        (0, false) => 0,
        _ => EXIT_OTHER,
    })
}

fn probe(checkpoint_path: &Path, common: &Common) -> Result<u8> {
    let cfg = resolve_config(common, None)?;
    let seed = cfg.seeds[0];
    let train_cfg = cfg.train_config(seed)?;
    let (tower, layout) = Tower::build(&train_cfg.tower, 0)?;
    let weights = checkpoint::load_matching(checkpoint_path, &layout)?;
    let (train, test) = (load(&cfg.data.probe_train)?, load(&cfg.data.probe_test)?);
    let top1 = linear_probe(&tower, &weights, &train, &test, &cfg.probe, seed)?;
    println!("top1 {top1:.4}");
    Ok(0)
}

fn augment_dump(count: usize, common: &Common) -> Result<u8> {
    let cfg = resolve_config(common, None)?;
    let strategy = cfg.train_config(cfg.seeds[0])?.strategy;
    let data = load(&cfg.data.pretrain)?;
    std::fs::create_dir_all(&cfg.out)?;
    let root = RngStream::new(cfg.seeds[0]).child(0xA0C);
    for i in 0..count.min(data.len()) {
        let image = data.image(i);
        std::fs::write(cfg.out.join(format!("image{i}.ppm")), image.to_ppm())?;
        for (v, view) in strategy.apply(&image, root.derive(&[0, i as u64])).iter().enumerate() {
            std::fs::write(cfg.out.join(format!("image{i}-view{v}.ppm")), view.to_ppm())?;
        }
    }
    println!("wrote {} images with {} views each to {}", count.min(data.len()), strategy.view_count(), cfg.out.display());
    Ok(0)
}

fn selftest_command() -> u8 {
    let mut failed = 0;
    for check in selftest::run() {
        match &check.outcome {
            Ok(()) => println!("PASS {}", check.name),
            Err(e) => {
                failed += 1;
                println!("FAIL {}: {e}", check.name);
            }
        }
    }
    if failed == 0 {
        0
    } else {
        EXIT_OTHER
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(common) => run(common),
        Command::Grid { kind, presets, common } => grid(*kind, presets, common),
        Command::Probe { checkpoint, common } => probe(checkpoint, common),
        Command::AugmentDump { count, common } => augment_dump(*count, common),
        Command::Selftest => Ok(selftest_command()),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                e if e.is_config() => EXIT_CONFIG,
                e if e.is_divergence() => EXIT_DIVERGED,
                _ => EXIT_OTHER,
            })
        }
    }
}
