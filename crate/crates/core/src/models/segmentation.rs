use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{self, SegmentationBreakdown};
use super::vae::{flatten_params, load_params, Vae, VaeShape};
use super::{NetworkConfig, ProbabilityMap};
use crate::error::{Error, Result};
use crate::nn::{Adam, Tensor};
use crate::volume::{LabelMap, Volume, NUM_CLASSES};

/// sCT intensity plus the nine one-hot atlas channels.
pub const SEG_INPUT_CHANNELS: usize = 1 + NUM_CLASSES;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegStepStats {
    pub total: f64,
    pub terms: SegmentationBreakdown,
}

/// Atlas-conditioned segmentation VAE (no discriminator, latent mean only).
#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub cfg: NetworkConfig,
    pub vae: Vae,
    trained: bool,
}

/// Builds the `[10, D, H, W]` network input.
pub fn seg_input(ct: &[f32], atlas_one_hot: &[f32], spatial: [usize; 3]) -> Tensor {
    let mut data = Vec::with_capacity(ct.len() * SEG_INPUT_CHANNELS);
    data.extend_from_slice(ct);
    data.extend_from_slice(atlas_one_hot);
    Tensor::from_vec([SEG_INPUT_CHANNELS, spatial[0], spatial[1], spatial[2]], data)
}

impl SegmentationModel {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        // distinct stream from the synthesis network built from the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E65_u64.rotate_left(32));
        let shape = VaeShape {
            in_channels: SEG_INPUT_CHANNELS,
            out_channels: NUM_CLASSES,
            skip_channels: usize::from(cfg.input_skip),
            base_channels: cfg.base_channels,
            latent_channels: cfg.latent_channels,
            levels: cfg.downsampling_levels,
            stem_kernel: 1,
        };
        Ok(SegmentationModel {
            cfg: cfg.clone(),
            vae: Vae::new(shape, &mut rng),
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn skip_of(&self, x: &Tensor) -> Option<Tensor> {
        self.cfg.input_skip.then(|| x.split_channels(&[1, NUM_CLASSES]).swap_remove(0))
    }

    /// Class probabilities for a CT-like volume and an atlas on its grid.
    pub fn segment(&self, sct: &Volume, atlas: &LabelMap) -> Result<ProbabilityMap> {
        if !self.trained {
            return Err(Error::State("segmentation weights are not trained or loaded".into()));
        }
        if sct.shape() != atlas.shape() {
            return Err(Error::Argument(format!(
                "sCT grid {:?} differs from atlas grid {:?}",
                sct.shape(),
                atlas.shape()
            )));
        }
        let x = seg_input(sct.data(), &atlas.one_hot(), sct.shape());
        let (m, _) = self.vae.encode(&x)?;
        let skip = self.skip_of(&x);
        let logits = self.vae.decode_logits(&m, skip.as_ref())?;
        ProbabilityMap::new(losses::softmax(&logits), sct.spacing_mm())
    }

    /// One deterministic update over a batch of `(input, one_hot,
    /// dt_gt_sq)` crops, with gradients averaged over the batch.
    pub fn train_batch(&mut self, batch: &[(&Tensor, &[f32], &[f32])], opt: &mut Adam) -> Result<SegStepStats> {
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let mut stats = SegStepStats::default();
        for (input, one_hot, dt) in batch {
            let skip = self.skip_of(input);
            let pass = self.vae.forward_train::<ChaCha8Rng>(input, skip.as_ref(), None)?;
            let probs = losses::softmax(&pass.logits);
            let loss = losses::segmentation_loss(&probs, one_hot, dt, &self.cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "segmentation",
                    epoch: 0,
                    batch: String::new(),
                });
            }
            let d_logits = losses::softmax_backward(&probs, &loss.d_probs);
            self.vae.backward(&pass, &d_logits, None, None);
            stats.total += loss.total;
            stats.terms.dice += loss.terms.dice;
            stats.terms.focal += loss.terms.focal;
            stats.terms.hausdorff += loss.terms.hausdorff;
        }
        opt.step(self.vae.params_mut(), batch.len() as f32);
        let k = batch.len() as f64;
        stats.total /= k;
        stats.terms.dice /= k;
        stats.terms.focal /= k;
        stats.terms.hausdorff /= k;
        Ok(stats)
    }

    pub fn train_step(&mut self, input: &Tensor, one_hot: &[f32], dt_gt_sq: &[f32], opt: &mut Adam) -> Result<SegStepStats> {
        self.train_batch(&[(input, one_hot, dt_gt_sq)], opt)
    }

    pub fn weights(&self) -> Vec<f32> {
        flatten_params(&self.vae.params())
    }

    pub fn load_weights(&mut self, flat: &[f32]) -> Result<()> {
        load_params(self.vae.params_mut(), flat)?;
        self.trained = true;
        Ok(())
    }
}
