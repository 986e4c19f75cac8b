use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::NetworkConfig;
use crate::phantom::{MAX_GRID, MIN_GRID};
use crate::stats::{default_bounds, DEFAULT_ALPHA};

/// Everything a run depends on. Serialized as TOML; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Raw phantom cohort (written by `phantom`, read by `preprocess`).
    pub data_dir: PathBuf,
    /// Root for run directories; each run lives in `out_dir/run-<hash>`.
    pub out_dir: PathBuf,
    pub n_subjects: usize,
    pub grid: [usize; 3],
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Epochs of both base training stages.
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_segmenter: f64,
    /// Fine-tuning learning rate as a fraction of `lr_segmenter`.
    pub finetune_lr_factor: f64,
    pub batch_size: usize,
    /// Edge of the cubic training crops; 0 trains on whole volumes.
    pub crop: usize,
    /// Validate every this many epochs (and after the last one).
    pub val_interval: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Explicit atlas subject; the youngest subject otherwise.
    pub atlas_subject: Option<String>,
    /// Force voxels with at least this suture probability to suture.
    pub suture_threshold: Option<f64>,
    /// Polynomial degree of the MRI bias-field model.
    pub bias_order: usize,
    pub alpha: f64,
    pub equivalence_bounds: BTreeMap<String, f64>,
    /// Arms compared by the statistics panel (reference first).
    pub panel_arms: [String; 2],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            n_subjects: 32,
            grid: [48; 3],
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            epochs: 200,
            finetune_epochs: 50,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            lr_segmenter: 2e-4,
            finetune_lr_factor: 0.1,
            batch_size: 1,
            crop: 24,
            val_interval: 5,
            seed: 0,
            network: NetworkConfig::default(),
            atlas_subject: None,
            suture_threshold: None,
            bias_order: 3,
            alpha: DEFAULT_ALPHA,
            equivalence_bounds: default_bounds(),
            panel_arms: ["ct".to_string(), "sct_ft".to_string()],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.network.validate()?;
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must be non-negative and sum to 1"));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.n_subjects < 10 {
            return bad(format!("n_subjects must be at least 10, got {}", self.n_subjects));
        }
        let div = 1usize << self.network.downsampling_levels;
        for &g in &self.grid {
            if !(MIN_GRID..=MAX_GRID).contains(&g) || g % div != 0 {
                return bad(format!(
                    "grid {:?} must lie in {MIN_GRID}..={MAX_GRID} and be divisible by {div}",
                    self.grid
                ));
            }
        }
        if self.crop != 0 && (self.crop % div != 0 || self.crop < div || self.grid.iter().any(|&g| self.crop > g)) {
            return bad(format!("crop {} must be a multiple of {div} no larger than the grid", self.crop));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_segmenter", self.lr_segmenter),
            ("finetune_lr_factor", self.finetune_lr_factor),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.val_interval < 1 {
            return bad("val_interval must be at least 1".into());
        }
        if let Some(t) = self.suture_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("suture_threshold {t} outside [0, 1]"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        for key in ["dice", "hd95_mm"] {
            match self.equivalence_bounds.get(key) {
                Some(b) if b.is_finite() && *b > 0.0 => {}
                _ => return bad(format!("equivalence_bounds.{key} must be a positive number")),
            }
        }
        for arm in &self.panel_arms {
            if !super::ARMS.contains(&arm.as_str()) {
                return bad(format!("unknown panel arm '{arm}' (known: {:?})", super::ARMS));
            }
        }
        Ok(())
    }

    /// Hash of every setting that affects results (paths excluded).
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = PathBuf::new();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.content_hash()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("epochz = 3"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[network]\nbase_channel = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let r = ExperimentConfig::from_toml_str("train_fraction = 0.7\nval_fraction = 0.1\ntest_fraction = 0.1");
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("epochs = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.data_dir = "d2".into();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
