//! Inference on the test split, metric tables and the statistics panel.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::data::{read_split, write_json, Dataset, RunLayout};
use super::split::Partition;
use super::train::{load_segmentation, load_synthesis, synthesize, FINETUNED_CKPT, SEGMENTATION_CKPT};
use super::{ExperimentConfig, ARMS};
use crate::error::{Error, Result};
use crate::metrics::{segmentation_metrics, synthesis_metrics, MetricsReport, SubjectMetrics};
use crate::models::{heatmap_to_segmentation, FeatureStack, ProbabilityMap, SegmentationModel};
use crate::stats::{run_region_panel, PairedSample, PanelReport};
use crate::volume::{load_labels, load_volume, save_labels, save_volume, LabelMap, Modality, Volume, LABEL_NAMES};

/// Which image each arm segments, and with which network.
fn arm_setup(arm: &str) -> (bool, &'static str) {
    match arm {
        "ct" => (false, SEGMENTATION_CKPT),
        "sct" => (true, SEGMENTATION_CKPT),
        _ => (true, FINETUNED_CKPT),
    }
}

fn test_ids(layout: &RunLayout) -> Result<Vec<String>> {
    let ids = read_split(layout)?.ids(Partition::Test);
    if ids.is_empty() {
        return Err(Error::State("the test partition is empty".into()));
    }
    Ok(ids)
}

/// Suture probability as a volume on the sCT grid.
pub fn heatmap_volume(p: &ProbabilityMap) -> Result<Volume> {
    Volume::new(p.suture_heatmap().to_vec(), p.shape(), p.spacing_mm, Modality::Sct)
}

/// Synthesis and segmentation of one MRI with trained networks.
pub struct Inference {
    pub sct: Volume,
    pub probabilities: ProbabilityMap,
    pub labels: LabelMap,
}

pub fn infer_one(
    synth: &crate::models::SynthesisModel,
    seg: &SegmentationModel,
    mri: &Volume,
    atlas: &LabelMap,
    threshold: Option<f64>,
) -> Result<Inference> {
    let sct = synthesize(synth, mri)?;
    let probabilities = seg.segment(&sct, atlas)?;
    let labels = heatmap_to_segmentation(&probabilities, threshold)?;
    Ok(Inference {
        sct,
        probabilities,
        labels,
    })
}

/// Writes, per test subject, the sCT and for every arm the label map and
/// suture heatmap under `predictions/<id>/`.
pub fn infer(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Vec<String>> {
    let ids = test_ids(layout)?;
    let ds = Dataset::load(&layout.preprocessed())?;
    let (synth, _) = load_synthesis(layout)?;
    let mut nets: BTreeMap<&str, SegmentationModel> = BTreeMap::new();
    for name in [SEGMENTATION_CKPT, FINETUNED_CKPT] {
        nets.insert(name, load_segmentation(layout, name)?.0);
    }
    for id in &ids {
        let r = ds.get(id)?;
        let sct = synthesize(&synth, &r.mri)?;
        let dir = layout.predictions().join(id);
        save_volume(&sct, dir.join("sct"))?;
        for arm in ARMS {
            let (on_sct, net) = arm_setup(arm);
            let image = if on_sct { &sct } else { &r.ct };
            let p = nets[net].segment(image, &ds.atlas)?;
            save_labels(&heatmap_to_segmentation(&p, cfg.suture_threshold)?, dir.join(format!("seg_{arm}")))?;
            save_volume(&heatmap_volume(&p)?, dir.join(format!("heatmap_{arm}")))?;
        }
        info!("inferred {id}");
    }
    Ok(ids)
}

/// Metrics of every test subject against its preprocessed ground truth.
pub fn evaluate(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<MetricsReport> {
    let ids = test_ids(layout)?;
    let ds = Dataset::load(&layout.preprocessed())?;
    let stack = FeatureStack::new(cfg.network.feature_seed);
    let mut subjects = Vec::new();
    for id in &ids {
        let r = ds.get(id)?;
        let dir = layout.predictions().join(id);
        if !dir.exists() {
            return Err(Error::State(format!("no predictions for {id}; run infer first")));
        }
        let sct = load_volume(dir.join("sct"))?;
        let mut segmentation = BTreeMap::new();
        for arm in ARMS {
            let pred = load_labels(dir.join(format!("seg_{arm}")))?;
            segmentation.insert(arm.to_string(), segmentation_metrics(&pred, &r.bones_sutures)?);
        }
        subjects.push(SubjectMetrics {
            subject_id: id.clone(),
            age_days: r.age_days,
            synthesis: synthesis_metrics(&sct, &r.ct, &stack)?,
            segmentation,
        });
    }
    let report = MetricsReport::new(subjects);
    write_json(&layout.metrics_json(), &report)?;
    write_metrics_csv(&layout.metrics_csv(), &report)?;
    Ok(report)
}

/// Column names of `metrics.csv`, in order.
pub fn csv_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["subject_id", "age_days", "ssim", "psnr_db", "mae", "fid", "lpips_proxy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for arm in ARMS {
        for m in ["mean_bone_dice", "suture_dice", "mean_dice", "mean_hd95_mm"] {
            cols.push(format!("{arm}_{m}"));
        }
        for metric in ["dice", "hd95_mm"] {
            for label in &LABEL_NAMES[1..] {
                cols.push(format!("{arm}_{metric}_{label}"));
            }
        }
    }
    cols
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per subject; undefined values (infinite PSNR, HD95 of an empty
/// label) are empty cells.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(csv_columns()).map_err(|e| csv_error(path, e))?;
    for s in &report.subjects {
        let y = &s.synthesis;
        let mut row = vec![
            s.subject_id.clone(),
            s.age_days.to_string(),
            cell(Some(y.ssim)),
            cell(y.psnr_db),
            cell(Some(y.mae)),
            cell(Some(y.fid)),
            cell(Some(y.lpips_proxy)),
        ];
        for arm in ARMS {
            let m = s.segmentation.get(arm);
            row.push(cell(m.map(|m| m.mean_bone_dice)));
            row.push(cell(m.map(|m| m.suture_dice)));
            row.push(cell(m.map(|m| m.mean_dice)));
            row.push(cell(m.and_then(|m| m.mean_hd95_mm)));
            for label in &LABEL_NAMES[1..] {
                row.push(cell(m.and_then(|m| m.dice.get(*label).copied())));
            }
            for label in &LABEL_NAMES[1..] {
                row.push(cell(m.and_then(|m| m.hd95_mm.get(*label).copied())));
            }
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::State(format!("{}: {e}", path.display()))
}

/// `metrics.csv` as columns of optional values, keyed by header.
pub fn read_metrics_csv(path: &Path) -> Result<BTreeMap<String, Vec<Option<f64>>>> {
    if !path.exists() {
        return Err(Error::State(format!("{} not found; run evaluate first", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let mut cols: BTreeMap<String, Vec<Option<f64>>> = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (h, v) in headers.iter().zip(rec.iter()) {
            if h == "subject_id" {
                continue;
            }
            let parsed = if v.is_empty() {
                None
            } else {
                Some(v.parse::<f64>().map_err(|e| Error::State(format!("{}: bad value '{v}' in {h}: {e}", path.display())))?)
            };
            cols.get_mut(h).expect("header column").push(parsed);
        }
    }
    Ok(cols)
}

/// Paired per-region samples of two arms; a subject enters a region's
/// sample only when both values are defined.
pub fn panel_table(
    cols: &BTreeMap<String, Vec<Option<f64>>>,
    arms: [&str; 2],
) -> Result<BTreeMap<String, Vec<PairedSample>>> {
    let mut table = BTreeMap::new();
    for metric in ["dice", "hd95_mm"] {
        let mut samples = Vec::new();
        for label in &LABEL_NAMES[1..] {
            let col = |arm: &str| {
                let key = format!("{arm}_{metric}_{label}");
                cols.get(&key).ok_or_else(|| Error::State(format!("metrics.csv lacks column {key}")))
            };
            let (a, b) = (col(arms[0])?, col(arms[1])?);
            let (values_a, values_b): (Vec<f64>, Vec<f64>) =
                a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip();
            // built directly so an undersized sample is reported by the panel
            samples.push(PairedSample {
                label: label.to_string(),
                values_a,
                values_b,
            });
        }
        table.insert(metric.to_string(), samples);
    }
    Ok(table)
}

/// Statistics output: the compared arms and the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub arms: [String; 2],
    pub n_subjects: usize,
    pub panel: PanelReport,
}

impl StatsReport {
    pub fn text(&self) -> String {
        let mut out = format!(
            "Paired comparison of {} vs {} segmentation over {} test subjects\n\
             alpha = {}, equivalence bounds: {}\n\n",
            self.arms[0],
            self.arms[1],
            self.n_subjects,
            self.panel.alpha,
            self.panel.bounds.iter().map(|(k, v)| format!("{k} ±{v}")).collect::<Vec<_>>().join(", "),
        );
        out.push_str(&self.panel.table());
        out.push('\n');
        for (metric, regions) in &self.panel.equivalent {
            let others: Vec<&str> = LABEL_NAMES[1..].iter().copied().filter(|l| !regions.iter().any(|r| r == l)).collect();
            if others.is_empty() {
                out.push_str(&format!("{metric}: equivalent in all regions\n"));
            } else {
                out.push_str(&format!(
                    "{metric}: equivalent in {}/8 regions; not shown equivalent: {}\n",
                    regions.len(),
                    others.join(", ")
                ));
            }
        }
        for (metric, regions) in &self.panel.significant {
            out.push_str(&format!(
                "{metric}: significant differences in {}\n",
                if regions.is_empty() { "no region".to_string() } else { regions.join(", ") }
            ));
        }
        out
    }
}

/// Wilcoxon and TOST panel between the configured arms, from `metrics.csv`.
pub fn stats(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<StatsReport> {
    let cols = read_metrics_csv(&layout.metrics_csv())?;
    let arms = [cfg.panel_arms[0].as_str(), cfg.panel_arms[1].as_str()];
    let table = panel_table(&cols, arms)?;
    let bounds: BTreeMap<String, f64> =
        table.keys().map(|k| (k.clone(), cfg.equivalence_bounds[k])).collect();
    let panel = run_region_panel(&table, &bounds, cfg.alpha)?;
    let report = StatsReport {
        arms: cfg.panel_arms.clone(),
        n_subjects: cols.get("age_days").map_or(0, Vec::len),
        panel,
    };
    write_json(&layout.stats_json(), &report)?;
    let txt = layout.stats_txt();
    fs::write(&txt, report.text()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}
