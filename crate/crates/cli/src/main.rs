use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use regda_core::checkpoint::Checkpoint;
use regda_core::data::{make_dataset, Dataset, DatasetSpec};
use regda_core::eval::{pck, DEFAULT_ALPHA};
use regda_core::losses::LOG_EPS;
use regda_core::model::{Model, ModelConfig};
use regda_core::selftest::{run_selftest, SelftestOptions};
use regda_core::train::{predict_dataset, run_training, TrainConfig, TrainData};

mod manifest;
mod plot;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "regda", version, about = "Keypoint heatmap training with regressive domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset described by a TOML spec.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain on source, then adapt to target.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train this seed only, instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// PCK threshold as a fraction of the heatmap size.
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curves and a comparison table from report files.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Gradient checks, distribution invariants and KL oracles.
    Selftest {
        /// Log clamp used by the losses under test.
        #[arg(long, default_value_t = LOG_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Print config defaults.
    Config {
        #[arg(long)]
        dump_defaults: bool,
        #[arg(long, value_enum, default_value_t = ConfigKind::Train)]
        kind: ConfigKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Train,
    Data,
}

/// Exit status for a failed command: 2 for numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<regda_core::Error>(),
            Some(regda_core::Error::NonFinite(_) | regda_core::Error::NonFiniteLoss { .. })
        )
    });
    if numeric {
        2
    } else {
        1
    }
}

fn threads() -> usize {
    std::env::var("REGDA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let started = SystemTime::now();
    let mut spec: DatasetSpec = read_toml(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    create_dir(out)?;
    let n = threads();
    let data = make_dataset(&spec, n)?;
    data.save(out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let mut m = RunManifest::new("gen-data", serde_json::to_value(&spec)?, vec![spec.seed], n, started);
    m.artifacts = vec![out.join("annotations.csv"), out.join("spec.json"), out.join("images")];
    m.write(out)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

/// Makes relative dataset paths relative to the config file.
fn anchor_paths(cfg: &mut TrainConfig, base: &Path) {
    for src in [&mut cfg.source, &mut cfg.target] {
        if let Some(p) = src.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn train(config: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let started = SystemTime::now();
    let mut cfg: TrainConfig = read_toml(config)?;
    anchor_paths(&mut cfg, config.parent().unwrap_or(Path::new(".")));
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    if resume.is_some() && cfg.seeds.len() != 1 {
        bail!("--resume needs a single seed; pass --seed");
    }
    let n = threads();
    let data = TrainData::load(&cfg, n)?;
    create_dir(out)?;
    let multi = cfg.seeds.len() > 1;
    let mut top = RunManifest::new("train", serde_json::to_value(&cfg)?, cfg.seeds.clone(), n, started);
    for &s in &cfg.seeds {
        let seed_started = SystemTime::now();
        let dir = if multi { out.join(format!("seed-{s}")) } else { out.to_path_buf() };
        let (report, art) = run_training::<f32>(&cfg, s, &data, &dir, resume)?;
        if let Some(f) = &report.final_metrics {
            println!(
                "{} seed {s}: final target MAE {:.4} ({}), PCK {:.3}",
                cfg.method, f.target_mae_f, report.mae_unit, f.target_pck_f
            );
        }
        let artifacts = vec![art.report_csv, art.report_json, art.checkpoint];
        if multi {
            let mut seed_cfg = cfg.clone();
            seed_cfg.seeds = vec![s];
            let mut m = RunManifest::new("train", serde_json::to_value(&seed_cfg)?, vec![s], n, seed_started);
            m.artifacts = artifacts.clone();
            m.write(&dir)?;
        }
        top.artifacts.extend(artifacts);
    }
    top.write(out)
}

fn eval(checkpoint: &Path, data_dir: &Path, alpha: f64, out: Option<&Path>) -> Result<()> {
    let started = SystemTime::now();
    if !(alpha > 0.0) {
        bail!("--alpha must be positive");
    }
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let cfg: ModelConfig = serde_json::from_value(ckpt.architecture.clone()).context("checkpoint architecture")?;
    let mut model = Model::<f32>::new(cfg.clone(), 0)?;
    model.load_named(&ckpt.arrays)?;
    let data = Dataset::load(data_dir)?;
    if data.grid != cfg.grid()? || data.image_size != cfg.image_size {
        bail!(
            "dataset ({}px, {}x{} grid) does not match the model ({}px, {}x{} grid)",
            data.image_size,
            data.grid.height,
            data.grid.width,
            cfg.image_size,
            cfg.grid()?.height,
            cfg.grid()?.width
        );
    }
    let (f, adv) = predict_dataset(&model, &data, 64)?;
    let gts: Vec<_> = data.samples.iter().map(|s| s.keypoints.clone()).collect();
    let report = pck(&f, &gts, alpha, data.grid)?;
    let diag = regda_core::eval::diagnostics(&f, &adv, &gts, alpha, data.grid)?;
    let json = serde_json::json!({ "metrics": report, "diagnostics": diag });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(out) = out {
        create_dir(out)?;
        let path = out.join("metrics.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&json)?)?;
        let config = serde_json::json!({
            "checkpoint": checkpoint,
            "data": data_dir,
            "alpha": alpha,
        });
        let mut m = RunManifest::new("eval", config, Vec::new(), 1, started);
        m.artifacts = vec![path];
        m.write(out)?;
    }
    Ok(())
}

fn plot_cmd(reports: &[PathBuf], out: &Path) -> Result<()> {
    let started = SystemTime::now();
    let runs = reports.iter().map(|p| plot::load_run(p)).collect::<Result<Vec<_>>>()?;
    let written = plot::write_all(&runs, out)?;
    print!("{}", plot::table_text(&plot::table_rows(&runs)));
    let mut m = RunManifest::new("plot", serde_json::json!({ "reports": reports }), Vec::new(), 1, started);
    m.artifacts = written;
    m.write(out)
}

fn selftest(eps: f64, seed: u64, cases: usize) -> Result<bool> {
    let report = run_selftest(&SelftestOptions { eps, seed, cases });
    for c in &report.checks {
        println!(
            "{} {:<32} max error {:.3e} (tolerance {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", report.checks.len());
    Ok(failed == 0)
}

fn dump_defaults(kind: ConfigKind) -> Result<String> {
    Ok(match kind {
        ConfigKind::Train => toml::to_string_pretty(&TrainConfig::default())?,
        ConfigKind::Data => toml::to_string_pretty(&DatasetSpec::default())?,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed)?,
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => train(&config, &out, seed, resume.as_deref())?,
        Command::Eval {
            checkpoint,
            data,
            alpha,
            out,
        } => eval(&checkpoint, &data, alpha, out.as_deref())?,
        Command::Plot { out, reports } => plot_cmd(&reports, &out)?,
        Command::Selftest { eps, seed, cases } => return selftest(eps, seed, cases),
        Command::Config { dump_defaults: dump, kind } => {
            if !dump {
                bail!("nothing to do; pass --dump-defaults");
            }
            print!("{}", dump_defaults(kind)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_failures_exit_with_two() {
        let e = anyhow::Error::new(regda_core::Error::NonFiniteLoss {
            objective: "source",
            step: 3,
            batch_ids: vec![1],
        })
        .context("training");
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::Error::new(regda_core::Error::Config("x".into()));
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let t: TrainConfig = toml::from_str(&dump_defaults(ConfigKind::Train).unwrap()).unwrap();
        assert_eq!(t, TrainConfig::default());
        let d: DatasetSpec = toml::from_str(&dump_defaults(ConfigKind::Data).unwrap()).unwrap();
        assert_eq!(d, DatasetSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<TrainConfig>("etaa = 1.0").unwrap_err().to_string();
        assert!(err.contains("etaa"), "{err}");
        let err = toml::from_str::<TrainConfig>("[model]\nwidth = 3").unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }
}
