//! Convolutional VAE backbone shared by the synthesis and segmentation
//! networks.
//!
//! Encoder: stem conv, then per level a stride-2 conv and a stride-1 conv,
//! then a pointwise conv emitting mean and log-variance. Decoder: per level a
//! conv at the coarse resolution followed by nearest upsampling (cheaper than
//! convolving after upsampling), then a full-resolution head that sees the
//! upsampled features concatenated with an optional skip input.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Conv3d, Layer, Param, Sequential, Tensor};

pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip_channels: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub levels: usize,
    pub stem_kernel: usize,
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub shape: VaeShape,
    encoder: Sequential,
    decoder: Sequential,
    head: Conv3d,
}

/// Cached quantities of one training forward pass.
#[derive(Debug, Clone)]
pub struct VaePass {
    pub mean: Tensor,
    /// Clamped log-variance.
    pub log_variance: Tensor,
    /// Which log-variance entries were clamped (no gradient flows there).
    clamped: Vec<bool>,
    pub eps: Option<Tensor>,
    /// Pre-activation output of the head.
    pub logits: Tensor,
}

impl Vae {
    pub fn new<R: Rng>(shape: VaeShape, rng: &mut R) -> Self {
        let b = shape.base_channels;
        let mut enc = vec![
            Layer::Conv(Conv3d::new(shape.in_channels, b, shape.stem_kernel, 1, rng)),
            Layer::leaky_relu(),
        ];
        let mut c = b;
        for _ in 0..shape.levels {
            let c2 = 2 * c;
            enc.push(Layer::Conv(Conv3d::new(c, c2, 3, 2, rng)));
            enc.push(Layer::leaky_relu());
            enc.push(Layer::Conv(Conv3d::new(c2, c2, 3, 1, rng)));
            enc.push(Layer::leaky_relu());
            c = c2;
        }
        enc.push(Layer::Conv(Conv3d::new(c, 2 * shape.latent_channels, 1, 1, rng)));

        let mut dec = vec![
            Layer::Conv(Conv3d::new(shape.latent_channels, c, 3, 1, rng)),
            Layer::leaky_relu(),
        ];
        for _ in 0..shape.levels {
            let c2 = (c / 2).max(b);
            dec.push(Layer::Conv(Conv3d::new(c, c2, 3, 1, rng)));
            dec.push(Layer::leaky_relu());
            dec.push(Layer::Upsample2);
            c = c2;
        }
        let head = Conv3d::new(c + shape.skip_channels, shape.out_channels, 3, 1, rng);
        Vae {
            shape,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            head,
        }
    }

    pub fn check_spatial(&self, spatial: [usize; 3]) -> Result<()> {
        let f = 1usize << self.shape.levels;
        if spatial.iter().any(|&n| n % f != 0 || n < f) {
            return Err(Error::Shape(format!(
                "spatial shape {spatial:?} is not divisible by 2^{} = {f}",
                self.shape.levels
            )));
        }
        Ok(())
    }

    fn split_latent(&self, h: Tensor) -> (Tensor, Tensor, Vec<bool>) {
        let l = self.shape.latent_channels;
        let mut parts = h.split_channels(&[l, l]);
        let mut lv = parts.pop().expect("two parts");
        let mean = parts.pop().expect("two parts");
        let clamped = lv.data().iter().map(|&v| !(LOGVAR_MIN..=LOGVAR_MAX).contains(&v)).collect();
        lv.map_inplace(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        (mean, lv, clamped)
    }

    /// Mean and clamped log-variance of the latent code.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let h = self.encoder.clone().forward(x, false);
        let (m, lv, _) = self.split_latent(h);
        Ok((m, lv))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.shape.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.shape.in_channels,
                x.channels()
            )));
        }
        self.check_spatial(x.spatial())
    }

    fn head_input(&self, features: Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        if self.shape.skip_channels == 0 {
            return Ok(features);
        }
        let zeros;
        let s = match skip {
            Some(s) => s,
            None => {
                let [_, d, h, w] = features.shape();
                zeros = Tensor::zeros([self.shape.skip_channels, d, h, w]);
                &zeros
            }
        };
        if s.channels() != self.shape.skip_channels || s.spatial() != features.spatial() {
            return Err(Error::Shape(format!(
                "skip input {:?} does not match decoder output {:?}",
                s.shape(),
                features.shape()
            )));
        }
        Ok(Tensor::concat_channels(&[&features, s]))
    }

    /// Head logits for a latent sample.
    pub fn decode_logits(&self, z: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        if z.channels() != self.shape.latent_channels {
            return Err(Error::Shape(format!(
                "expected {} latent channels, got {}",
                self.shape.latent_channels,
                z.channels()
            )));
        }
        let f = self.decoder.clone().forward(z, false);
        let hin = self.head_input(f, skip)?;
        Ok(self.head.clone().forward(&hin, false))
    }

    /// Training forward pass with caches; samples the latent when `rng` is
    /// given, otherwise decodes the mean.
    pub fn forward_train<R: Rng>(
        &mut self,
        x: &Tensor,
        skip: Option<&Tensor>,
        rng: Option<&mut R>,
    ) -> Result<VaePass> {
        self.check_input(x)?;
        let h = self.encoder.forward(x, true);
        let (mean, log_variance, clamped) = self.split_latent(h);
        let (z, eps) = match rng {
            Some(rng) => {
                let e: Vec<f32> = (0..mean.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let eps = Tensor::from_vec(mean.shape(), e);
                let mut z = mean.clone();
                for ((zv, &lv), &ev) in z.data_mut().iter_mut().zip(log_variance.data()).zip(eps.data()) {
                    *zv += (0.5 * lv).exp() * ev;
                }
                (z, Some(eps))
            }
            None => (mean.clone(), None),
        };
        let f = self.decoder.forward(&z, true);
        let hin = self.head_input(f, skip)?;
        let logits = self.head.forward(&hin, true);
        Ok(VaePass {
            mean,
            log_variance,
            clamped,
            eps,
            logits,
        })
    }

    /// Accumulates parameter gradients given the gradient at the head logits
    /// and extra gradients on the latent mean / log-variance (the KL term).
    pub fn backward(
        &mut self,
        pass: &VaePass,
        d_logits: &Tensor,
        d_mean_extra: Option<&Tensor>,
        d_logvar_extra: Option<&Tensor>,
    ) {
        let d_hin = self.head.backward(d_logits, true);
        let feat_ch = d_hin.channels() - self.shape.skip_channels;
        let d_feat = if self.shape.skip_channels > 0 {
            d_hin.split_channels(&[feat_ch, self.shape.skip_channels]).swap_remove(0)
        } else {
            d_hin
        };
        let d_z = self.decoder.backward(&d_feat, true);
        let mut d_mean = d_z.clone();
        if let Some(e) = d_mean_extra {
            d_mean.add_assign(e);
        }
        let mut d_lv = Tensor::zeros(pass.log_variance.shape());
        if let Some(eps) = &pass.eps {
            for (i, g) in d_lv.data_mut().iter_mut().enumerate() {
                let lv = pass.log_variance.data()[i];
                *g = d_z.data()[i] * eps.data()[i] * 0.5 * (0.5 * lv).exp();
            }
        }
        if let Some(e) = d_logvar_extra {
            d_lv.add_assign(e);
        }
        for (g, &c) in d_lv.data_mut().iter_mut().zip(&pass.clamped) {
            if c {
                *g = 0.0;
            }
        }
        let d_h = Tensor::concat_channels(&[&d_mean, &d_lv]);
        self.encoder.backward(&d_h, true);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.head.params());
        p
    }
}

/// Shared helper: flatten parameter values.
pub fn flatten_params(params: &[&Param]) -> Vec<f32> {
    params.iter().flat_map(|p| p.value.iter().copied()).collect()
}

/// Inverse of [`flatten_params`]; errors when the length does not match.
pub fn load_params(params: Vec<&mut Param>, flat: &[f32]) -> Result<()> {
    let need: usize = params.iter().map(|p| p.len()).sum();
    if need != flat.len() {
        return Err(Error::State(format!(
            "checkpoint holds {} weights, network needs {need}",
            flat.len()
        )));
    }
    let mut off = 0;
    for p in params {
        let n = p.len();
        p.value.copy_from_slice(&flat[off..off + n]);
        p.reset_moments();
        p.zero_grad();
        off += n;
    }
    Ok(())
}

/// Nearest upsampling applied `levels` times (used for coarse latents).
#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> VaeShape {
        VaeShape {
            in_channels: 1,
            out_channels: 1,
            skip_channels: 1,
            base_channels: 4,
            latent_channels: 4,
            levels: 3,
            stem_kernel: 3,
        }
    }

    #[test]
    fn latent_grid_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vae = Vae::new(shape(), &mut rng);
        let x = Tensor::zeros([1, 16, 16, 16]);
        let (m, lv) = vae.encode(&x).unwrap();
        assert_eq!(m.shape(), [4, 2, 2, 2]);
        assert_eq!(lv.shape(), m.shape());
        let y = vae.decode_logits(&m, Some(&x)).unwrap();
        assert_eq!(y.shape(), [1, 16, 16, 16]);
        assert!(matches!(vae.encode(&Tensor::zeros([1, 12, 16, 16])), Err(Error::Shape(_))));
    }

    /// Finite-difference check of the full encoder/decoder chain through
    /// the reparameterisation, on one weight of each sub-network.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = shape();
        s.levels = 2;
        let mut vae = Vae::new(s, &mut rng);
        let x = Tensor::from_vec([1, 8, 8, 8], (0..512).map(|i| ((i * 37 % 17) as f32) / 17.0).collect());
        let target: Vec<f32> = (0..512).map(|i| ((i * 11 % 7) as f32) / 7.0).collect();
        let loss = |vae: &mut Vae| -> f64 {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let p = vae.forward_train(&x, Some(&x), Some(&mut r)).unwrap();
            let kl: f64 = p.mean.data().iter().zip(p.log_variance.data())
                .map(|(&m, &lv)| 0.5 * (m as f64 * m as f64 + (lv as f64).exp() - 1.0 - lv as f64)).sum();
            p.logits.data().iter().zip(&target).map(|(&a, &b)| 0.5 * (a as f64 - b as f64).powi(2)).sum::<f64>() + kl
        };
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let p = vae.forward_train(&x, Some(&x), Some(&mut r)).unwrap();
        let d: Vec<f32> = p.logits.data().iter().zip(&target).map(|(a, b)| a - b).collect();
        let dm = p.mean.clone();
        let mut dlv = p.log_variance.clone();
        dlv.map_inplace(|v| 0.5 * (v.exp() - 1.0));
        vae.backward(&p, &Tensor::from_vec(p.logits.shape(), d), Some(&dm), Some(&dlv));
        let grads: Vec<Vec<f32>> = vae.params().iter().map(|p| p.grad.clone()).collect();
        let n_params = grads.len();
        // Leaky-ReLU kinks make large steps unreliable; a small step and a
        // loose tolerance still catch any wiring error.
        for pi in 0..n_params {
            let k = grads[pi].len() / 3;
            let h = 1e-3f32;
            let orig = vae.params()[pi].value[k];
            vae.params_mut()[pi].value[k] = orig + h;
            let lp = loss(&mut vae);
            vae.params_mut()[pi].value[k] = orig - h;
            let lm = loss(&mut vae);
            vae.params_mut()[pi].value[k] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = grads[pi][k] as f64;
            assert!((fd - an).abs() <= 0.05 * fd.abs().max(an.abs()) + 2e-3, "param {pi}: fd {fd} vs {an}");
        }
    }
}
