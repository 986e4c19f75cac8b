//! On-disk layout of cohorts and runs, and cohort preprocessing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::split::{select_atlas_id, split_dataset, SplitAssignment, SubjectInfo};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::phantom::{generate_subject_detailed, plan_cohort, CohortEntry};
use crate::preprocess::{
    apply_transform, correct_bias, register, register_from, remove_bed, RegistrationMode, RegistrationResult,
    SimilarityMetric, SimilarityTransform,
};
use crate::volume::{load_labels, load_volume, save_labels, save_volume, LabelMap, SubjectRecord};

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::State(format!("{what} not found at {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::State(format!("unreadable {what} {}: {e}", path.display())))
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        RunLayout::new(cfg.run_dir())
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn stats_json(&self) -> PathBuf {
        self.root.join("stats.json")
    }
    pub fn stats_txt(&self) -> PathBuf {
        self.root.join("stats.txt")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

/// `cohort.json` in a raw cohort directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortIndex {
    pub seed: u64,
    pub grid: [usize; 3],
    pub subjects: Vec<CohortEntry>,
}

impl CohortIndex {
    pub fn infos(&self) -> Vec<SubjectInfo> {
        self.subjects
            .iter()
            .map(|e| SubjectInfo {
                subject_id: e.subject_id.clone(),
                age_days: e.age_days,
                sex: e.sex,
            })
            .collect()
    }
}

fn save_subject(dir: &Path, r: &SubjectRecord) -> Result<()> {
    let d = dir.join(&r.subject_id);
    save_volume(&r.mri, d.join("mri"))?;
    save_volume(&r.ct, d.join("ct"))?;
    save_labels(&r.bones_sutures, d.join("labels"))
}

pub fn load_subject(dir: &Path, info: &SubjectInfo) -> Result<SubjectRecord> {
    let d = dir.join(&info.subject_id);
    let r = SubjectRecord {
        subject_id: info.subject_id.clone(),
        age_days: info.age_days,
        sex: info.sex,
        mri: load_volume(d.join("mri"))?,
        ct: load_volume(d.join("ct"))?,
        bones_sutures: load_labels(d.join("labels"))?,
    };
    r.validate()?;
    Ok(r)
}

/// Generates the phantom cohort into `data_dir` unless an identical one is
/// already there.
pub fn write_cohort(data_dir: &Path, n: usize, seed: u64, grid: [usize; 3]) -> Result<CohortIndex> {
    let plan = plan_cohort(n, seed, grid)?;
    let index = CohortIndex {
        seed,
        grid,
        subjects: plan,
    };
    let path = data_dir.join("cohort.json");
    if path.exists() {
        let existing: CohortIndex = read_json(&path, "cohort index")?;
        if existing == index {
            info!("cohort in {} is up to date", data_dir.display());
            return Ok(existing);
        }
        return Err(Error::State(format!(
            "{} holds a different cohort; choose another data_dir",
            data_dir.display()
        )));
    }
    for e in &index.subjects {
        let g = generate_subject_detailed(&e.spec, &e.subject_id)?;
        save_subject(data_dir, &g.record)?;
        write_json(&data_dir.join(&e.subject_id).join("subject.json"), e)?;
    }
    // written last: its presence marks a complete cohort
    write_json(&path, &index)?;
    info!("generated {} phantom subjects in {}", n, data_dir.display());
    Ok(index)
}

pub fn read_cohort(data_dir: &Path) -> Result<CohortIndex> {
    read_json(&data_dir.join("cohort.json"), "cohort index")
}

/// Transforms estimated for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTransforms {
    pub ct_to_reference: RegistrationResult,
    pub mri_to_ct: RegistrationResult,
}

/// `index.json` of a preprocessed cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessIndex {
    pub reference: String,
    pub bias_order: usize,
    pub subjects: Vec<SubjectInfo>,
}

fn identity_result(mode: RegistrationMode, metric: SimilarityMetric) -> RegistrationResult {
    RegistrationResult {
        transform: SimilarityTransform::identity(),
        mode,
        metric,
        converged: true,
        cost: 0.0,
    }
}

/// Bed removal, rigid CT alignment to the reference CT, MRI bias
/// correction and 9-DOF MRI-to-CT registration for every subject.
///
/// The MRI is registered to its own CT after that CT has been aligned to
/// the reference, starting from the CT's transform, so every volume is
/// resampled exactly once.
pub fn preprocess_cohort(
    data_dir: &Path,
    out: &Path,
    reference: Option<&str>,
    bias_order: usize,
) -> Result<PreprocessIndex> {
    let cohort = read_cohort(data_dir)?;
    let infos = cohort.infos();
    let reference = select_atlas_id(&infos, reference)?;
    let index = PreprocessIndex {
        reference: reference.clone(),
        bias_order,
        subjects: infos.clone(),
    };
    let index_path = out.join("index.json");
    if index_path.exists() {
        let existing: PreprocessIndex = read_json(&index_path, "preprocessing index")?;
        if existing == index {
            info!("preprocessed cohort in {} is up to date", out.display());
            return Ok(existing);
        }
        return Err(Error::State(format!("{} holds a different preprocessing run", out.display())));
    }
    let ref_info = infos.iter().find(|s| s.subject_id == reference).expect("reference is in the cohort");
    let ref_ct = remove_bed(&load_subject(data_dir, ref_info)?.ct)?;
    for info in &infos {
        let raw = load_subject(data_dir, info)?;
        let ct = remove_bed(&raw.ct)?;
        let to_ref = if info.subject_id == reference {
            identity_result(RegistrationMode::Rigid6, SimilarityMetric::Mse)
        } else {
            register(&ct, &ref_ct, RegistrationMode::Rigid6, SimilarityMetric::Mse)?
        };
        let ct_aligned = apply_transform(&ct, &to_ref.transform);
        let labels: LabelMap = apply_transform(&raw.bones_sutures, &to_ref.transform);
        let mri = correct_bias(&raw.mri, bias_order)?;
        let mri_to_ct = register_from(
            &mri,
            &ct_aligned,
            RegistrationMode::Similarity9,
            SimilarityMetric::MutualInformation,
            &to_ref.transform,
        )?;
        let mri_aligned = apply_transform(&mri, &mri_to_ct.transform);
        if !(to_ref.converged && mri_to_ct.converged) {
            log::warn!("{}: registration hit its budget without improving", info.subject_id);
        }
        let rec = SubjectRecord {
            subject_id: info.subject_id.clone(),
            age_days: info.age_days,
            sex: info.sex,
            mri: mri_aligned,
            ct: ct_aligned,
            bones_sutures: labels,
        };
        save_subject(out, &rec)?;
        write_json(
            &out.join(&info.subject_id).join("transforms.json"),
            &SubjectTransforms {
                ct_to_reference: to_ref,
                mri_to_ct,
            },
        )?;
        info!("preprocessed {}", info.subject_id);
    }
    write_json(&index_path, &index)?;
    Ok(index)
}

pub fn read_preprocessed(dir: &Path) -> Result<PreprocessIndex> {
    read_json(&dir.join("index.json"), "preprocessing index")
}

/// Split over every preprocessed subject except the atlas subject, whose
/// labels condition the segmentation network.
pub fn ensure_split(layout: &RunLayout, cfg: &ExperimentConfig, index: &PreprocessIndex) -> Result<SplitAssignment> {
    let pool: Vec<SubjectInfo> = index.subjects.iter().filter(|s| s.subject_id != index.reference).cloned().collect();
    let fractions = [cfg.train_fraction, cfg.val_fraction, cfg.test_fraction];
    let split = split_dataset(&pool, fractions, cfg.seed)?;
    let path = layout.split();
    if path.exists() {
        let existing: SplitAssignment = read_json(&path, "split")?;
        if existing != split {
            return Err(Error::State(format!("{} does not match this configuration", path.display())));
        }
    } else {
        write_json(&path, &split)?;
    }
    Ok(split)
}

pub fn read_split(layout: &RunLayout) -> Result<SplitAssignment> {
    read_json(&layout.split(), "split")
}

/// Preprocessed subjects held in memory, plus the atlas.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: BTreeMap<String, SubjectRecord>,
    pub atlas_id: String,
    pub atlas: LabelMap,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let index = read_preprocessed(dir)?;
        let mut subjects = BTreeMap::new();
        for info in &index.subjects {
            subjects.insert(info.subject_id.clone(), load_subject(dir, info)?);
        }
        let atlas = subjects[&index.reference].bones_sutures.clone();
        Ok(Dataset {
            subjects,
            atlas_id: index.reference,
            atlas,
        })
    }

    pub fn get(&self, id: &str) -> Result<&SubjectRecord> {
        self.subjects
            .get(id)
            .ok_or_else(|| Error::State(format!("subject '{id}' is not in the preprocessed cohort")))
    }
}
