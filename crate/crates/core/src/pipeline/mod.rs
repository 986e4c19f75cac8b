//! Orchestration of the full experiment: cohort generation, preprocessing,
//! splitting, the training stages, evaluation, statistics and figures.
//!
//! Every run lives in `out_dir/run-<config hash>`, so changing any setting
//! that affects results starts a fresh directory.

mod config;
mod data;
mod evaluate;
mod render;
mod split;
mod train;

use std::fs;
use std::path::PathBuf;

use log::info;

pub use config::ExperimentConfig;
pub use data::{
    ensure_split, load_subject, preprocess_cohort, read_cohort, read_preprocessed, read_split, write_cohort,
    CohortIndex, Dataset, PreprocessIndex, RunLayout, SubjectTransforms,
};
pub use evaluate::{
    csv_columns, evaluate, heatmap_volume, infer, infer_one, panel_table, read_metrics_csv, stats, write_metrics_csv,
    Inference, StatsReport,
};
pub use render::{render_heatmaps, render_labels, render_slices};
pub use split::{select_atlas, select_atlas_id, split_dataset, Partition, SplitAssignment, SubjectInfo, MIN_COHORT};
pub use train::{
    finetune_segmentation, load_segmentation, load_synthesis, synthesize, train_segmentation, train_synthesis,
    FINETUNED_CKPT, SEGMENTATION_CKPT, SYNTHESIS_CKPT,
};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::volume::{load_labels, load_volume};

/// Evaluation arms: base network on real CT, base network on sCT, and the
/// fine-tuned network on sCT.
pub const ARMS: [&str; 3] = ["ct", "sct", "sct_ft"];

/// Writes the phantom cohort of `cfg` into its data directory.
pub fn generate_phantoms(cfg: &ExperimentConfig) -> Result<CohortIndex> {
    write_cohort(&cfg.data_dir, cfg.n_subjects, cfg.seed, cfg.grid)
}

/// Preprocesses the cohort into the run directory and fixes the split.
/// The registration reference is the atlas subject.
pub fn preprocess(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<SplitAssignment> {
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let cfg_path = layout.config();
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let cohort = read_cohort(&cfg.data_dir)?;
    if cohort.grid != cfg.grid || cohort.subjects.len() != cfg.n_subjects || cohort.seed != cfg.seed {
        return Err(Error::State(format!(
            "cohort in {} was generated with different settings; run phantom again",
            cfg.data_dir.display()
        )));
    }
    let reference = select_atlas_id(&cohort.infos(), cfg.atlas_subject.as_deref())?;
    let index = preprocess_cohort(&cfg.data_dir, &layout.preprocessed(), Some(&reference), cfg.bias_order)?;
    let split = ensure_split(layout, cfg, &index)?;
    let [tr, va, te] = split.counts();
    info!("split {tr}/{va}/{te} (atlas {} held out)", index.reference);
    Ok(split)
}

/// Slice grids, label maps and suture heatmap overlays for every test
/// subject, plus `report.md`.
pub fn report(_cfg: &ExperimentConfig, layout: &RunLayout) -> Result<PathBuf> {
    let ids = read_split(layout)?.ids(Partition::Test);
    let ds = Dataset::load(&layout.preprocessed())?;
    let fig = layout.figures();
    for id in &ids {
        let r = ds.get(id)?;
        let dir = layout.predictions().join(id);
        if !dir.exists() {
            return Err(Error::State(format!("no predictions for {id}; run infer first")));
        }
        let sct = load_volume(dir.join("sct"))?;
        render_slices(&r.mri, &r.ct, &sct, &fig.join(format!("{id}_slices.png")))?;
        let mut labels = vec![r.bones_sutures.clone()];
        let mut heat = Vec::new();
        for arm in ARMS {
            labels.push(load_labels(dir.join(format!("seg_{arm}")))?);
            heat.push(load_volume(dir.join(format!("heatmap_{arm}")))?);
        }
        render_labels(&labels.iter().collect::<Vec<_>>(), &fig.join(format!("{id}_labels.png")))?;
        let pairs = [(&r.ct, &heat[0]), (&sct, &heat[1]), (&sct, &heat[2])];
        render_heatmaps(&pairs, &fig.join(format!("{id}_suture_heatmap.png")))?;
    }
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!("Run directory: `{}`\n\n", layout.root.display()));
    if layout.metrics_json().exists() {
        let text = fs::read_to_string(layout.metrics_json()).map_err(|e| Error::io(layout.metrics_json(), e))?;
        let m: MetricsReport = serde_json::from_str(&text)?;
        md.push_str("## Test-split metrics (mean ± sd)\n\n| metric | mean | sd | n |\n|---|---|---|---|\n");
        for (k, v) in &m.aggregate {
            if k.contains(".dice.") || k.contains(".hd95_mm.") {
                continue;
            }
            md.push_str(&format!("| {k} | {:.4} | {:.4} | {} |\n", v.mean, v.std, v.n));
        }
        md.push('\n');
    }
    if layout.stats_txt().exists() {
        let text = fs::read_to_string(layout.stats_txt()).map_err(|e| Error::io(layout.stats_txt(), e))?;
        md.push_str("## Statistics\n\n```\n");
        md.push_str(&text);
        md.push_str("```\n\n");
    }
    md.push_str("## Figures\n\n");
    for id in &ids {
        for kind in ["slices", "labels", "suture_heatmap"] {
            md.push_str(&format!("- [{id} {kind}](figures/{id}_{kind}.png)\n"));
        }
    }
    let path = layout.root.join("report.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Inference, metrics, statistics and figures on the test split.
pub fn run_full_evaluation(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<(MetricsReport, StatsReport)> {
    infer(cfg, layout)?;
    let metrics = evaluate(cfg, layout)?;
    let stats = stats(cfg, layout)?;
    report(cfg, layout)?;
    Ok((metrics, stats))
}

/// Every stage in order. Stages whose checkpoint already exists in the run
/// directory are not retrained.
pub fn run_all(cfg: &ExperimentConfig) -> Result<(RunLayout, MetricsReport, StatsReport)> {
    let layout = RunLayout::for_config(cfg);
    generate_phantoms(cfg)?;
    preprocess(cfg, &layout)?;
    let done = |name: &str| layout.checkpoints().join(format!("{name}.json")).exists();
    if done(SYNTHESIS_CKPT) {
        info!("synthesis checkpoint present; skipping");
    } else {
        train_synthesis(cfg, &layout)?;
    }
    if done(SEGMENTATION_CKPT) {
        info!("segmentation checkpoint present; skipping");
    } else {
        train_segmentation(cfg, &layout)?;
    }
    if done(FINETUNED_CKPT) {
        info!("fine-tuned checkpoint present; skipping");
    } else {
        finetune_segmentation(cfg, &layout)?;
    }
    let (m, s) = run_full_evaluation(cfg, &layout)?;
    Ok((layout, m, s))
}
