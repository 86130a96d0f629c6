use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nriqa_core::data::{self, generate_dataset, load_images, ppm, DatasetManifest, SynthConfig};
use nriqa_core::harness::gradcheck::TOLERANCE;
use nriqa_core::harness::train::write_log;
use nriqa_core::harness::{evaluate, gradcheck, restore, score_image, Checkpoint, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "nriqa", version, about = "No-reference image quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic distortion dataset with a CSV manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        sources: usize,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "model.adtr")]
        out: PathBuf,
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
        /// Part of the source-level split to train on.
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
        /// Continue from this checkpoint instead of initialising.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
        /// Write per-image predictions as CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        #[arg(long)]
        patch_edge: Option<usize>,
        #[arg(long)]
        n_patch: Option<usize>,
    },
    /// Compare autodiff gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict the quality of one PPM image.
    Score {
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_patch: Option<usize>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Part {
    All,
    Train,
    Test,
}

/// Run-configuration overrides; each flag mirrors a config key.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    convs_per_stage: Option<String>,
    #[arg(long)]
    kernel_size: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    eps_norm: Option<String>,
    #[arg(long)]
    hamming_len: Option<String>,
    #[arg(long)]
    pool_stride: Option<String>,
    #[arg(long)]
    num_layers: Option<String>,
    #[arg(long)]
    num_heads: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    ffn_hidden: Option<String>,
    #[arg(long)]
    query_stride: Option<String>,
    #[arg(long)]
    conv_dim: Option<String>,
    #[arg(long)]
    head_hidden: Option<String>,
    #[arg(long)]
    theta1: Option<String>,
    #[arg(long)]
    theta2: Option<String>,
    #[arg(long)]
    theta3: Option<String>,
    #[arg(long)]
    patch_edge: Option<String>,
    #[arg(long)]
    n_patch: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    split_ratio: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("channels", &self.channels),
            ("convs_per_stage", &self.convs_per_stage),
            ("kernel_size", &self.kernel_size),
            ("dropout", &self.dropout),
            ("eps_norm", &self.eps_norm),
            ("hamming_len", &self.hamming_len),
            ("pool_stride", &self.pool_stride),
            ("num_layers", &self.num_layers),
            ("num_heads", &self.num_heads),
            ("d_model", &self.d_model),
            ("ffn_hidden", &self.ffn_hidden),
            ("query_stride", &self.query_stride),
            ("conv_dim", &self.conv_dim),
            ("head_hidden", &self.head_hidden),
            ("theta1", &self.theta1),
            ("theta2", &self.theta2),
            ("theta3", &self.theta3),
            ("patch_edge", &self.patch_edge),
            ("n_patch", &self.n_patch),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr_decay", &self.lr_decay),
            ("weight_decay", &self.weight_decay),
            ("momentum", &self.momentum),
            ("split_ratio", &self.split_ratio),
        ]
    }

    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        Ok(cfg)
    }
}

fn select(manifest: &DatasetManifest, part: Part, cfg: &RunConfig, seed: u64) -> Result<DatasetManifest> {
    Ok(match part {
        Part::All => manifest.clone(),
        Part::Train => data::split(manifest, cfg.split_ratio, seed)?.0,
        Part::Test => data::split(manifest, cfg.split_ratio, seed)?.1,
    })
}

fn write_scores(path: &Path, manifest: &DatasetManifest, predictions: &[f64]) -> Result<()> {
    let mut text = String::from("path,score,predicted\n");
    for (r, p) in manifest.records.iter().zip(predictions) {
        text.push_str(&format!("{},{:.10},{:.10}\n", r.path, r.score, p));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            sources,
            levels,
            size,
            seed,
        } => {
            let m = generate_dataset(&SynthConfig { sources, levels, size, seed }, &out)?;
            println!("wrote {} images and manifest.csv to {}", m.len(), out.display());
        }
        Command::Train {
            manifest,
            seed,
            out,
            log,
            split,
            resume,
            cfg,
        } => {
            let m = DatasetManifest::read(&manifest)?;
            let mut trainer = match &resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let run_cfg = cfg.resolve(ckpt.config.clone())?;
                    let part = select(&m, split, &run_cfg, seed)?;
                    let images = load_images(&part)?;
                    let mut ckpt = ckpt;
                    ckpt.config = run_cfg;
                    Trainer::from_checkpoint(&ckpt, images, part.scores())?
                }
                None => {
                    let mut run_cfg = cfg.resolve(RunConfig::default())?;
                    run_cfg.seed = Some(seed);
                    let part = select(&m, split, &run_cfg, seed)?;
                    Trainer::new(&run_cfg, load_images(&part)?, part.scores())?
                }
            };
            println!("{}", nriqa_core::harness::EpochLog::HEADER);
            let mut logs = Vec::new();
            while trainer.epoch() < trainer.config().epochs {
                let entry = trainer.run_epoch()?;
                println!("{}", entry.csv_row());
                logs.push(entry);
            }
            write_log(&log, &logs)?;
            trainer.checkpoint().save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            seed,
            split,
            scores_out,
            patch_edge,
            n_patch,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (model, store) = restore(&ckpt)?;
            let m = DatasetManifest::read(&manifest)?;
            let part = select(&m, split, &ckpt.config, ckpt.config.seed.unwrap_or(seed))?;
            let mut spec = ckpt.config.patch;
            spec.edge = patch_edge.unwrap_or(spec.edge);
            spec.n_patch = n_patch.unwrap_or(spec.n_patch);
            let report = evaluate(&model, &store, &load_images(&part)?, &part.scores(), &spec, seed)?;
            println!("images {}", part.len());
            println!("plcc {:.6}", report.plcc);
            println!("srocc {:.6}", report.srocc);
            if let Some(path) = scores_out {
                write_scores(&path, &part, &report.predictions)?;
            }
        }
        Command::Gradcheck { coords, seed, cfg } => {
            let run_cfg = cfg.resolve(RunConfig::tiny())?;
            let report = gradcheck(&run_cfg, coords, seed)?;
            for e in &report.entries {
                println!(
                    "{:<48} {:>6}  analytic {:+.6e}  numeric {:+.6e}  rel {:.2e}",
                    e.name, e.index, e.analytic, e.numeric, e.rel_err
                );
            }
            println!(
                "max relative error {:.3e} over {} coordinates ({} redrawn at kinks)",
                report.max_rel_err(),
                report.entries.len(),
                report.resampled
            );
            report.check(TOLERANCE)?;
        }
        Command::Score {
            image,
            checkpoint,
            seed,
            n_patch,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (model, store) = restore(&ckpt)?;
            let img = ppm::read(&image)?;
            let mut spec = ckpt.config.patch;
            spec.n_patch = n_patch.unwrap_or(spec.n_patch);
            let s = img.shape();
            if spec.edge > s[1] || spec.edge > s[2] {
                bail!("image {}x{} is smaller than the {}-pixel patch", s[2], s[1], spec.edge);
            }
            println!("{:.6}", score_image(&model, &store, &img, &spec, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
