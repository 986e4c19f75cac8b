//! `cranio`: runs the phantom cohort through synthesis, segmentation,
//! evaluation and statistics.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 missing or
//! inconsistent state on disk, 4 runtime failure (including a NaN abort).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cranio_core::pipeline::{self, ExperimentConfig, RunLayout};
use cranio_core::volume::{load_volume, save_labels, save_volume};
use cranio_core::{Error, ErrorKind, Result};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "cranio", version, about = "MRI-to-CT synthesis and cranial bone/suture segmentation on skull phantoms")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment and network seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs (overrides `out_dir`). Give it before
    /// the subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    device: Device,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Device {
    Cpu,
    Gpu,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom cohort.
    Phantom {
        #[arg(long)]
        n: Option<usize>,
        /// Cubic grid edge.
        #[arg(long)]
        grid: Option<usize>,
        /// Cohort directory (defaults to `data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bed removal, bias correction and registration; fixes the split when
    /// writing into the run directory.
    Preprocess {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Registration reference and atlas subject.
        #[arg(long)]
        reference: Option<String>,
        /// Output directory (defaults to the run's `preprocessed/`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the MRI-to-CT synthesis network.
    TrainSynth,
    /// Train the base segmentation network on real CT.
    TrainSeg,
    /// Fine-tune the segmentation network on synthetic CT.
    FinetuneSeg,
    /// Predict sCTs and segmentations for the test split, or for one MRI.
    Infer {
        /// A single preprocessed MRI volume instead of the test split.
        #[arg(long, requires = "dest")]
        mri: Option<PathBuf>,
        /// Output directory for `--mri`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Metrics on the test split (metrics.json, metrics.csv).
    Evaluate,
    /// Wilcoxon and TOST panel from metrics.csv (stats.json, stats.txt).
    Stats,
    /// Figures and report.md.
    Report,
    /// Every stage in order, skipping trained checkpoints.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    if cli.device == Device::Gpu {
        return Err(Error::Config("this build has no GPU backend; use --device cpu".into()));
    }
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.network.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Phantom { n, grid, out } => {
            if let Some(n) = n {
                cfg.n_subjects = n;
            }
            if let Some(g) = grid {
                cfg.grid = [g; 3];
            }
            if let Some(o) = out {
                cfg.data_dir = o;
            }
            cfg.validate()?;
            let c = pipeline::generate_phantoms(&cfg)?;
            println!("{} subjects in {}", c.subjects.len(), cfg.data_dir.display());
        }
        Command::Preprocess { input, reference, out } => {
            if let Some(i) = input {
                cfg.data_dir = i;
            }
            if reference.is_some() {
                cfg.atlas_subject = reference;
            }
            cfg.validate()?;
            match out {
                Some(dir) => {
                    let idx = pipeline::preprocess_cohort(&cfg.data_dir, &dir, cfg.atlas_subject.as_deref(), cfg.bias_order)?;
                    println!("{} subjects preprocessed into {} (reference {})", idx.subjects.len(), dir.display(), idx.reference);
                }
                None => {
                    let layout = RunLayout::for_config(&cfg);
                    let split = pipeline::preprocess(&cfg, &layout)?;
                    let [tr, va, te] = split.counts();
                    println!("preprocessed into {} (split {tr}/{va}/{te})", layout.preprocessed().display());
                }
            }
        }
        Command::TrainSynth => {
            cfg.validate()?;
            let m = pipeline::train_synthesis(&cfg, &RunLayout::for_config(&cfg))?;
            println!("synthesis checkpoint: epoch {} ({})", m.epoch, &m.blob_sha256[..12]);
        }
        Command::TrainSeg => {
            cfg.validate()?;
            let m = pipeline::train_segmentation(&cfg, &RunLayout::for_config(&cfg))?;
            println!("segmentation checkpoint: epoch {} ({})", m.epoch, &m.blob_sha256[..12]);
        }
        Command::FinetuneSeg => {
            cfg.validate()?;
            let m = pipeline::finetune_segmentation(&cfg, &RunLayout::for_config(&cfg))?;
            println!("fine-tuned checkpoint: epoch {} ({})", m.epoch, &m.blob_sha256[..12]);
        }
        Command::Infer { mri, dest } => {
            cfg.validate()?;
            let layout = RunLayout::for_config(&cfg);
            match (mri, dest) {
                (Some(mri), Some(dest)) => {
                    let (synth, _) = pipeline::load_synthesis(&layout)?;
                    let (seg, _) = pipeline::load_segmentation(&layout, pipeline::FINETUNED_CKPT)?;
                    let ds = pipeline::Dataset::load(&layout.preprocessed())?;
                    let v = load_volume(&mri)?;
                    let out = pipeline::infer_one(&synth, &seg, &v, &ds.atlas, cfg.suture_threshold)?;
                    save_volume(&out.sct, dest.join("sct"))?;
                    save_labels(&out.labels, dest.join("labels"))?;
                    save_volume(&pipeline::heatmap_volume(&out.probabilities)?, dest.join("suture_heatmap"))?;
                    println!("wrote sct, labels and suture_heatmap to {}", dest.display());
                }
                _ => {
                    let ids = pipeline::infer(&cfg, &layout)?;
                    println!("{} test subjects in {}", ids.len(), layout.predictions().display());
                }
            }
        }
        Command::Evaluate => {
            cfg.validate()?;
            let layout = RunLayout::for_config(&cfg);
            let r = pipeline::evaluate(&cfg, &layout)?;
            for key in ["ssim", "sct_ft.mean_bone_dice", "sct_ft.suture_dice"] {
                if let Some(v) = r.mean(key) {
                    println!("{key}: {v:.4}");
                }
            }
            println!("wrote {}", layout.metrics_json().display());
        }
        Command::Stats => {
            cfg.validate()?;
            let layout = RunLayout::for_config(&cfg);
            let s = pipeline::stats(&cfg, &layout)?;
            print!("{}", s.text());
        }
        Command::Report => {
            cfg.validate()?;
            let p = pipeline::report(&cfg, &RunLayout::for_config(&cfg))?;
            println!("wrote {}", p.display());
        }
        Command::Run => {
            cfg.validate()?;
            let (layout, m, s) = pipeline::run_all(&cfg)?;
            info!("run directory {}", layout.root.display());
            for key in ["ssim", "ct.mean_bone_dice", "sct.suture_dice", "sct_ft.mean_bone_dice", "sct_ft.suture_dice"] {
                if let Some(v) = m.mean(key) {
                    println!("{key}: {v:.4}");
                }
            }
            print!("{}", s.text());
            println!("outputs in {}", layout.root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::State => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
