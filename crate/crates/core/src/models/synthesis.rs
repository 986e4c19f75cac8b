use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{self, sigmoid, SynthesisBreakdown};
use super::vae::{flatten_params, load_params, Vae, VaeShape};
use super::{FeatureStack, LatentCode, NetworkConfig, PatchDiscriminator};
use crate::error::{Error, Result};
use crate::metrics::volume_tensor;
use crate::nn::{Adam, Param, Tensor};
use crate::volume::{Modality, Volume};

/// Loss summary of one synthesis training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStepStats {
    pub generator: f64,
    pub terms: SynthesisBreakdown,
    pub discriminator: f64,
}

/// MRI→sCT VAE with its patch discriminator and frozen feature stack.
#[derive(Clone, Debug)]
pub struct SynthesisModel {
    pub cfg: NetworkConfig,
    pub vae: Vae,
    pub disc: PatchDiscriminator,
    pub features: FeatureStack,
    trained: bool,
}

impl SynthesisModel {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = VaeShape {
            in_channels: 1,
            out_channels: 1,
            skip_channels: usize::from(cfg.input_skip),
            base_channels: cfg.base_channels,
            latent_channels: cfg.latent_channels,
            levels: cfg.downsampling_levels,
            stem_kernel: 3,
        };
        let vae = Vae::new(shape, &mut rng);
        let disc = PatchDiscriminator::new(cfg.discriminator_levels, cfg.base_channels, &mut rng);
        Ok(SynthesisModel {
            cfg: cfg.clone(),
            vae,
            disc,
            features: FeatureStack::new(cfg.feature_seed),
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn skip<'a>(&self, x: &'a Tensor) -> Option<&'a Tensor> {
        self.cfg.input_skip.then_some(x)
    }

    pub fn encode(&self, mri: &Volume) -> Result<LatentCode> {
        let (m, lv) = self.vae.encode(&volume_tensor(mri))?;
        LatentCode::from_tensors(&m, &lv)
    }

    /// Decodes a latent sample; `mri` feeds the skip path when enabled.
    pub fn decode(&self, z: &Tensor, mri: Option<&Volume>, spacing_mm: [f64; 3]) -> Result<Volume> {
        let skip = mri.map(volume_tensor);
        let logits = self.vae.decode_logits(z, skip.as_ref().and_then(|s| self.skip(s)))?;
        to_volume(logits, spacing_mm)
    }

    /// sCT for an MRI. `deterministic` decodes the latent mean; otherwise
    /// the latent is sampled from `rng`.
    pub fn synthesize<R: Rng>(&self, mri: &Volume, deterministic: bool, rng: Option<&mut R>) -> Result<Volume> {
        if !self.trained {
            return Err(Error::State("synthesis weights are not trained or loaded".into()));
        }
        let x = volume_tensor(mri);
        let (m, lv) = self.vae.encode(&x)?;
        let z = if deterministic {
            m
        } else {
            let rng = rng.ok_or_else(|| Error::Argument("stochastic synthesis needs a random source".into()))?;
            LatentCode::from_tensors(&m, &lv)?.sample(rng)
        };
        let logits = self.vae.decode_logits(&z, self.skip(&x))?;
        to_volume(logits, mri.spacing_mm())
    }

    /// One simultaneous discriminator and generator update over a batch of
    /// `[1, D, H, W]` pairs. Gradients are averaged over the batch; the
    /// generator sees the discriminator as it was before this update.
    pub fn train_batch<R: Rng>(
        &mut self,
        batch: &[(&Tensor, &Tensor)],
        rng: &mut R,
        opt_g: &mut Adam,
        opt_d: &mut Adam,
    ) -> Result<SynthStepStats> {
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let mut stats = SynthStepStats::default();
        for (mri, ct) in batch {
            let s = self.accumulate(mri, ct, rng)?;
            stats.generator += s.generator;
            stats.discriminator += s.discriminator;
            stats.terms.rec += s.terms.rec;
            stats.terms.adv += s.terms.adv;
            stats.terms.kl += s.terms.kl;
            stats.terms.perc += s.terms.perc;
        }
        let n = batch.len() as f32;
        if self.cfg.lambda_adv > 0.0 {
            opt_d.step(self.disc.params_mut(), n);
        }
        opt_g.step(self.vae.params_mut(), n);
        let k = batch.len() as f64;
        stats.generator /= k;
        stats.discriminator /= k;
        stats.terms.rec /= k;
        stats.terms.adv /= k;
        stats.terms.kl /= k;
        stats.terms.perc /= k;
        Ok(stats)
    }

    /// Single-pair convenience wrapper around [`Self::train_batch`].
    pub fn train_step<R: Rng>(
        &mut self,
        mri: &Tensor,
        ct: &Tensor,
        rng: &mut R,
        opt_g: &mut Adam,
        opt_d: &mut Adam,
    ) -> Result<SynthStepStats> {
        self.train_batch(&[(mri, ct)], rng, opt_g, opt_d)
    }

    /// Forward and backward for one pair; gradients accumulate in the
    /// parameters of both networks.
    fn accumulate<R: Rng>(&mut self, mri: &Tensor, ct: &Tensor, rng: &mut R) -> Result<SynthStepStats> {
        let skip = self.cfg.input_skip.then(|| mri.clone());
        let pass = self.vae.forward_train(mri, skip.as_ref(), Some(rng))?;
        let mut sct = pass.logits.clone();
        sct.map_inplace(sigmoid);

        let mut d_loss = 0.0;
        let adversarial = self.cfg.lambda_adv > 0.0;
        if adversarial {
            let real = self.disc.forward(ct, false);
            let fake = self.disc.forward(&sct, false);
            let (l, gr, gf) = losses::lsgan_discriminator(&real, &fake)?;
            d_loss = l;
            self.disc.forward(ct, true);
            self.disc.backward(&gr, ct.shape(), true);
            self.disc.forward(&sct, true);
            self.disc.backward(&gf, sct.shape(), true);
        }

        let fake_scores = if adversarial { self.disc.forward(&sct, true) } else { Vec::new() };
        let (feat_pairs, mut feat_net) = if self.cfg.lambda_perc > 0.0 {
            let (fa, net) = self.features.activations_cached(&sct);
            let fb = self.features.activations(ct);
            (fa.into_iter().zip(fb).collect::<Vec<_>>(), Some(net))
        } else {
            (Vec::new(), None)
        };
        let z = LatentCode::from_tensors(&pass.mean, &pass.log_variance)?;
        let loss = losses::synthesis_loss(sct.data(), ct.data(), &z, &fake_scores, &feat_pairs, &self.cfg)?;
        if !loss.total.is_finite() || !d_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "synthesis",
                epoch: 0,
                batch: String::new(),
            });
        }
        let mut d_sct = Tensor::from_vec(sct.shape(), loss.d_sct.clone());
        if adversarial {
            d_sct.add_assign(&self.disc.backward(&loss.d_fake_scores, sct.shape(), false));
        }
        if let Some(net) = feat_net.as_mut() {
            d_sct.add_assign(&FeatureStack::backward(net, &loss.d_features));
        }
        let mut d_logits = d_sct;
        for (g, &s) in d_logits.data_mut().iter_mut().zip(sct.data()) {
            *g *= s * (1.0 - s);
        }
        let dm = Tensor::from_vec(pass.mean.shape(), loss.d_mean.clone());
        let dl = Tensor::from_vec(pass.mean.shape(), loss.d_log_variance.clone());
        self.vae.backward(&pass, &d_logits, Some(&dm), Some(&dl));
        Ok(SynthStepStats {
            generator: loss.total,
            terms: loss.terms,
            discriminator: d_loss,
        })
    }

    /// Generator weights followed by discriminator weights.
    pub fn weights(&self) -> Vec<f32> {
        let mut w = flatten_params(&self.vae.params());
        w.extend(flatten_params(&self.disc.params()));
        w
    }

    pub fn load_weights(&mut self, flat: &[f32]) -> Result<()> {
        let n_vae: usize = self.vae.params().iter().map(|p| p.len()).sum();
        if flat.len() < n_vae {
            return Err(Error::State("checkpoint is too short for the synthesis network".into()));
        }
        load_params(self.vae.params_mut(), &flat[..n_vae])?;
        load_params(self.disc.params_mut(), &flat[n_vae..])?;
        self.trained = true;
        Ok(())
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        self.vae.params_mut()
    }
}

fn to_volume(mut logits: Tensor, spacing_mm: [f64; 3]) -> Result<Volume> {
    logits.map_inplace(sigmoid);
    let sp = logits.spatial();
    Volume::new(logits.into_vec(), sp, spacing_mm, Modality::Sct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn untrained_model_refuses_to_synthesize() {
        let m = SynthesisModel::new(&small()).unwrap();
        let v = Volume::filled(0.2, [16; 3], [1.0; 3], Modality::Mri).unwrap();
        assert!(matches!(m.synthesize::<ChaCha8Rng>(&v, true, None), Err(Error::State(_))));
    }

    #[test]
    fn deterministic_synthesis_is_bounded_and_repeatable() {
        let mut m = SynthesisModel::new(&small()).unwrap();
        m.mark_trained();
        let data: Vec<f32> = (0..4096).map(|i| (i % 13) as f32 / 13.0).collect();
        let v = Volume::new(data, [16; 3], [1.0; 3], Modality::Mri).unwrap();
        let a = m.synthesize::<ChaCha8Rng>(&v, true, None).unwrap();
        let b = m.synthesize::<ChaCha8Rng>(&v, true, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.modality(), Modality::Sct);
        assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn training_reduces_loss_on_one_pair() {
        let mut m = SynthesisModel::new(&small()).unwrap();
        let x = Tensor::from_vec([1, 16, 16, 16], (0..4096).map(|i| ((i / 16) % 16) as f32 / 16.0).collect());
        let mut y = x.clone();
        y.map_inplace(|v| 1.0 - v);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Adam::new(3e-3);
        let mut d = Adam::new(1e-3);
        let first = m.train_step(&x, &y, &mut rng, &mut g, &mut d).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = m.train_step(&x, &y, &mut rng, &mut g, &mut d).unwrap();
        }
        assert!(last.terms.rec < first.terms.rec, "{first:?} -> {last:?}");
    }
}
