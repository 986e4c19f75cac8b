//! Synthesis and segmentation networks, their losses and checkpoints.

mod checkpoint;
mod discriminator;
mod features;
pub mod losses;
mod segmentation;
mod synthesis;
mod vae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume::{LabelMap, NUM_CLASSES, SUTURE};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, Manifest, ModelKind, CHECKPOINT_VERSION};
pub use discriminator::PatchDiscriminator;
pub use features::{FeatureStack, FEATURE_SEED};
pub use losses::{kl_divergence, segmentation_loss, synthesis_loss, SegmentationBreakdown, SynthesisBreakdown};
pub use segmentation::{seg_input, SegStepStats, SegmentationModel, SEG_INPUT_CHANNELS};
pub use synthesis::{SynthStepStats, SynthesisModel};
pub use vae::{Vae, VaePass, VaeShape, LOGVAR_MAX, LOGVAR_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub downsampling_levels: usize,
    pub discriminator_levels: usize,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_kl: f64,
    pub lambda_perc: f64,
    pub lambda_dicefocal: f64,
    pub lambda_hd: f64,
    pub focal_gamma: f64,
    pub seed: u64,
    /// Feed the network input to the full-resolution output head.
    pub input_skip: bool,
    /// Seed of the frozen perceptual feature stack.
    pub feature_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 8,
            latent_channels: 4,
            downsampling_levels: 2,
            discriminator_levels: 2,
            lambda_rec: 1.0,
            lambda_adv: 0.05,
            lambda_kl: 1e-4,
            lambda_perc: 0.1,
            lambda_dicefocal: 1.0,
            lambda_hd: 0.1,
            focal_gamma: 2.0,
            seed: 0,
            input_skip: true,
            feature_seed: FEATURE_SEED,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsampling_levels < 2 {
            return Err(Error::Config("downsampling_levels must be at least 2".into()));
        }
        if self.discriminator_levels < 1 {
            return Err(Error::Config("discriminator_levels must be at least 1".into()));
        }
        if self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let lambdas = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
            ("lambda_kl", self.lambda_kl),
            ("lambda_perc", self.lambda_perc),
            ("lambda_dicefocal", self.lambda_dicefocal),
            ("lambda_hd", self.lambda_hd),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.lambda_rec <= 0.0 {
            return Err(Error::Config("lambda_rec must be positive".into()));
        }
        Ok(())
    }
}

/// Latent mean and clamped log-variance, `[C, d, h, w]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f32>,
    pub log_variance: Vec<f32>,
    pub shape: [usize; 4],
}

impl LatentCode {
    pub fn new(mean: Vec<f32>, log_variance: Vec<f32>, shape: [usize; 4]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if mean.len() != n || log_variance.len() != n {
            return Err(Error::Shape(format!(
                "latent buffers ({}, {}) do not match shape {shape:?}",
                mean.len(),
                log_variance.len()
            )));
        }
        let log_variance = log_variance.into_iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        Ok(LatentCode { mean, log_variance, shape })
    }

    pub fn from_tensors(mean: &Tensor, log_variance: &Tensor) -> Result<Self> {
        LatentCode::new(mean.data().to_vec(), log_variance.data().to_vec(), mean.shape())
    }

    /// `mean + exp(log_variance / 2) · eps`.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Tensor {
        let data = self
            .mean
            .iter()
            .zip(&self.log_variance)
            .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect();
        Tensor::from_vec(self.shape, data)
    }

    pub fn mean_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.mean.clone())
    }
}

/// Per-voxel class probabilities `[9, D, H, W]`; channel 8 is the suture
/// heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub probs: Tensor,
    pub spacing_mm: [f64; 3],
}

impl ProbabilityMap {
    pub fn new(probs: Tensor, spacing_mm: [f64; 3]) -> Result<Self> {
        if probs.channels() != NUM_CLASSES {
            return Err(Error::Shape(format!("expected {NUM_CLASSES} channels, got {}", probs.channels())));
        }
        let n = probs.voxels();
        for i in 0..n {
            let s: f64 = (0..NUM_CLASSES).map(|k| probs.channel(k)[i] as f64).sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::Domain(format!("probabilities at voxel {i} sum to {s}")));
            }
        }
        Ok(ProbabilityMap { probs, spacing_mm })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.probs.spatial()
    }

    pub fn suture_heatmap(&self) -> &[f32] {
        self.probs.channel(SUTURE as usize)
    }
}

/// Argmax labels with ties resolved toward the lowest code; when
/// `suture_threshold` is given, voxels whose suture probability reaches it
/// become suture regardless of the argmax.
pub fn heatmap_to_segmentation(p: &ProbabilityMap, suture_threshold: Option<f64>) -> Result<LabelMap> {
    if let Some(t) = suture_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument(format!("suture threshold {t} outside [0, 1]")));
        }
    }
    let n = p.probs.voxels();
    let data = (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut bv = p.probs.channel(0)[i];
            for k in 1..NUM_CLASSES {
                let v = p.probs.channel(k)[i];
                if v > bv {
                    best = k;
                    bv = v;
                }
            }
            if let Some(t) = suture_threshold {
                if p.probs.channel(SUTURE as usize)[i] as f64 >= t {
                    return SUTURE;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(data, p.shape(), p.spacing_mm)
}
