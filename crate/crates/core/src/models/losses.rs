//! Loss terms with their analytic gradients.
//!
//! Every function returns the value together with the gradient with respect
//! to its prediction-side inputs; callers chain these into the networks.

use serde::{Deserialize, Serialize};

use crate::edt;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume::{Dims, NUM_CLASSES};

use super::{LatentCode, NetworkConfig};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped here before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-7;

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1(pred: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            total += d.abs();
            (d.signum() * (d != 0.0) as i32 as f64 / n) as f32
        })
        .collect();
    (total / n, grad)
}

/// Mean over latent dimensions of ½(μ² + σ² − 1 − log σ²).
pub fn kl_divergence(z: &LatentCode) -> f64 {
    kl_with_grad(z).0
}

/// KL value plus gradients with respect to mean and log-variance.
pub fn kl_with_grad(z: &LatentCode) -> (f64, Vec<f32>, Vec<f32>) {
    let n = z.mean.len() as f64;
    let mut total = 0.0;
    let mut dm = Vec::with_capacity(z.mean.len());
    let mut dl = Vec::with_capacity(z.mean.len());
    for (&m, &lv) in z.mean.iter().zip(&z.log_variance) {
        let (m, lv) = (m as f64, lv as f64);
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        dm.push((m / n) as f32);
        dl.push((0.5 * (lv.exp() - 1.0) / n) as f32);
    }
    (total / n, dm, dl)
}

/// Generator-side least-squares adversarial term: mean over scales of the
/// mean over patches of (D(fake) − 1)².
pub fn lsgan_generator(fake_scores: &[Vec<f32>]) -> (f64, Vec<Vec<f32>>) {
    let k = fake_scores.len() as f64;
    let mut total = 0.0;
    let grads = fake_scores
        .iter()
        .map(|s| {
            let n = s.len() as f64;
            s.iter()
                .map(|&v| {
                    let d = v as f64 - 1.0;
                    total += d * d / n / k;
                    (2.0 * d / n / k) as f32
                })
                .collect()
        })
        .collect();
    (total, grads)
}

/// Discriminator loss ½[(D(real) − 1)² + D(fake)²], averaged over patches
/// and then over scales, with gradients on both score sets.
pub fn lsgan_discriminator(
    real_scores: &[Vec<f32>],
    fake_scores: &[Vec<f32>],
) -> Result<(f64, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    if real_scores.len() != fake_scores.len()
        || real_scores.iter().zip(fake_scores).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Argument("real and fake score maps differ in shape".into()));
    }
    let k = real_scores.len() as f64;
    let mut total = 0.0;
    let mut gr = Vec::new();
    let mut gf = Vec::new();
    for (r, f) in real_scores.iter().zip(fake_scores) {
        let n = r.len() as f64;
        let mut a = Vec::with_capacity(r.len());
        let mut b = Vec::with_capacity(r.len());
        for (&rv, &fv) in r.iter().zip(f) {
            let (rv, fv) = (rv as f64, fv as f64);
            total += 0.5 * ((rv - 1.0).powi(2) + fv * fv) / n / k;
            a.push(((rv - 1.0) / n / k) as f32);
            b.push((fv / n / k) as f32);
        }
        gr.push(a);
        gf.push(b);
    }
    Ok((total, gr, gf))
}

/// Mean over layers of the mean squared activation difference; the
/// gradient is with respect to the first member of each pair.
pub fn perceptual(pairs: &[(Tensor, Tensor)]) -> Result<(f64, Vec<Tensor>)> {
    let k = pairs.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(Error::Argument("feature pair shapes differ".into()));
        }
        let n = a.len() as f64;
        let mut g = Tensor::zeros(a.shape());
        for ((gv, &x), &y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            let d = x as f64 - y as f64;
            total += d * d / n / k;
            *gv = (2.0 * d / n / k) as f32;
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// Unweighted synthesis loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisBreakdown {
    pub rec: f64,
    pub adv: f64,
    pub kl: f64,
    pub perc: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisLoss {
    pub total: f64,
    pub terms: SynthesisBreakdown,
    /// Gradient of the total with respect to the sCT voxels (L1 part only;
    /// adversarial and perceptual gradients arrive through their networks).
    pub d_sct: Vec<f32>,
    pub d_mean: Vec<f32>,
    pub d_log_variance: Vec<f32>,
    pub d_fake_scores: Vec<Vec<f32>>,
    pub d_features: Vec<Tensor>,
}

/// λ_rec·L1 + λ_adv·LSGAN + λ_kl·KL + λ_perc·perceptual, with every
/// gradient already scaled by its weight.
pub fn synthesis_loss(
    sct: &[f32],
    ct: &[f32],
    z: &LatentCode,
    fake_scores: &[Vec<f32>],
    feat_pairs: &[(Tensor, Tensor)],
    cfg: &NetworkConfig,
) -> Result<SynthesisLoss> {
    if sct.len() != ct.len() {
        return Err(Error::Argument(format!(
            "sCT has {} voxels, CT has {}",
            sct.len(),
            ct.len()
        )));
    }
    let (rec, mut d_sct) = l1(sct, ct);
    let (adv, mut d_scores) = if fake_scores.is_empty() { (0.0, Vec::new()) } else { lsgan_generator(fake_scores) };
    let (kl, mut dm, mut dl) = kl_with_grad(z);
    let (perc, mut d_feat) = if feat_pairs.is_empty() { (0.0, Vec::new()) } else { perceptual(feat_pairs)? };
    let scale = |v: &mut [f32], w: f64| v.iter_mut().for_each(|x| *x = (*x as f64 * w) as f32);
    scale(&mut d_sct, cfg.lambda_rec);
    d_scores.iter_mut().for_each(|s| scale(s, cfg.lambda_adv));
    scale(&mut dm, cfg.lambda_kl);
    scale(&mut dl, cfg.lambda_kl);
    d_feat.iter_mut().for_each(|t| scale(t.data_mut(), cfg.lambda_perc));
    let terms = SynthesisBreakdown { rec, adv, kl, perc };
    Ok(SynthesisLoss {
        total: cfg.lambda_rec * rec + cfg.lambda_adv * adv + cfg.lambda_kl * kl + cfg.lambda_perc * perc,
        terms,
        d_sct,
        d_mean: dm,
        d_log_variance: dl,
        d_fake_scores: d_scores,
        d_features: d_feat,
    })
}

/// Unweighted segmentation loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationBreakdown {
    pub dice: f64,
    pub focal: f64,
    pub hausdorff: f64,
}

#[derive(Debug, Clone)]
pub struct SegmentationLoss {
    pub total: f64,
    pub terms: SegmentationBreakdown,
    /// Gradient with respect to the class probabilities, `[C, D, H, W]`.
    pub d_probs: Tensor,
}

/// Soft Dice loss averaged over classes: 1 − (2Σpg + s)/(Σp + Σg + s).
pub fn soft_dice(p: &Tensor, g: &[f32]) -> (f64, Tensor) {
    let c = p.channels();
    let n = p.voxels();
    let mut total = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for k in 0..c {
        let pk = p.channel(k);
        let gk = &g[k * n..(k + 1) * n];
        let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in pk.iter().zip(gk) {
            inter += a as f64 * b as f64;
            sp += a as f64;
            sg += b as f64;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sp + sg + DICE_SMOOTH;
        total += (1.0 - num / den) / c as f64;
        let gch = grad.channel_mut(k);
        for (gv, &b) in gch.iter_mut().zip(gk) {
            // d/dp of −num/den
            *gv = ((-(2.0 * b as f64) * den + num) / (den * den) / c as f64) as f32;
        }
    }
    (total, grad)
}

/// Focal loss −g(1−p)^γ log p averaged over voxels and classes.
pub fn focal(p: &Tensor, g: &[f32], gamma: f64) -> (f64, Tensor) {
    let m = p.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for ((gv, &pv), &t) in grad.data_mut().iter_mut().zip(p.data()).zip(g) {
        if t == 0.0 {
            continue;
        }
        let t = t as f64;
        let pc = (pv as f64).max(LOG_FLOOR);
        let q = (1.0 - pc).max(0.0);
        let lg = pc.ln();
        total += -t * q.powf(gamma) * lg / m;
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        // d/dp [−q^γ log p] = γ q^{γ−1} log p − q^γ / p
        let d = if (pv as f64) < LOG_FLOOR { 0.0 } else { t * (dq * lg - q.powf(gamma) / pc) };
        *gv = (d / m) as f32;
    }
    (total, grad)
}

/// Distance-transform Hausdorff surrogate: mean over voxels and classes of
/// (p − g)²·(dt_g² + dt_p²). Distances are in voxel units; `dt_p` comes from
/// the prediction thresholded at 0.5 and is treated as a constant.
pub fn hausdorff_surrogate(p: &Tensor, g: &[f32], dt_gt_sq: &[f32]) -> (f64, Tensor) {
    let c = p.channels();
    let n = p.voxels();
    let dims = Dims(p.spatial());
    let m = (c * n) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for k in 0..c {
        let pk = p.channel(k);
        let mask: Vec<bool> = pk.iter().map(|&v| v > 0.5).collect();
        let dtp = edt::boundary_distance(&mask, dims, [1.0; 3]);
        let gk = &g[k * n..(k + 1) * n];
        let dg = &dt_gt_sq[k * n..(k + 1) * n];
        let gch = grad.channel_mut(k);
        for i in 0..n {
            let w = dg[i] as f64 + dtp[i] * dtp[i];
            let d = pk[i] as f64 - gk[i] as f64;
            total += d * d * w / m;
            gch[i] = (2.0 * d * w / m) as f32;
        }
    }
    (total, grad)
}

/// Squared boundary distances of each one-hot channel (voxel units).
pub fn gt_distance_maps(one_hot: &[f32], spatial: [usize; 3]) -> Vec<f32> {
    let dims = Dims(spatial);
    let n = dims.len();
    let c = one_hot.len() / n;
    let mut out = Vec::with_capacity(one_hot.len());
    for k in 0..c {
        let mask: Vec<bool> = one_hot[k * n..(k + 1) * n].iter().map(|&v| v > 0.5).collect();
        out.extend(edt::boundary_distance(&mask, dims, [1.0; 3]).iter().map(|d| (d * d) as f32));
    }
    out
}

/// λ_dicefocal·(Dice + focal) + λ_hd·Hausdorff surrogate. `one_hot` is the
/// `[9, D, H, W]` ground truth and `dt_gt_sq` its [`gt_distance_maps`].
pub fn segmentation_loss(
    p: &Tensor,
    one_hot: &[f32],
    dt_gt_sq: &[f32],
    cfg: &NetworkConfig,
) -> Result<SegmentationLoss> {
    if p.channels() != NUM_CLASSES || one_hot.len() != p.len() || dt_gt_sq.len() != p.len() {
        return Err(Error::Argument(format!(
            "probability map {:?} does not match ground truth of {} values",
            p.shape(),
            one_hot.len()
        )));
    }
    let (dice, gd) = soft_dice(p, one_hot);
    let (foc, gf) = focal(p, one_hot, cfg.focal_gamma);
    let (hd, gh) = if cfg.lambda_hd > 0.0 {
        hausdorff_surrogate(p, one_hot, dt_gt_sq)
    } else {
        (0.0, Tensor::zeros(p.shape()))
    };
    let mut d = Tensor::zeros(p.shape());
    for (i, v) in d.data_mut().iter_mut().enumerate() {
        *v = (cfg.lambda_dicefocal * (gd.data()[i] as f64 + gf.data()[i] as f64)
            + cfg.lambda_hd * gh.data()[i] as f64) as f32;
    }
    Ok(SegmentationLoss {
        total: cfg.lambda_dicefocal * (dice + foc) + cfg.lambda_hd * hd,
        terms: SegmentationBreakdown {
            dice,
            focal: foc,
            hausdorff: hd,
        },
        d_probs: d,
    })
}

/// Channel-wise softmax over `[C, D, H, W]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.channels();
    let n = logits.voxels();
    let mut out = Tensor::zeros(logits.shape());
    let x = logits.data();
    let o = out.data_mut();
    for i in 0..n {
        let mx = (0..c).map(|k| x[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f64;
        for k in 0..c {
            let e = ((x[k * n + i] - mx) as f64).exp();
            o[k * n + i] = e as f32;
            s += e;
        }
        for k in 0..c {
            o[k * n + i] = (o[k * n + i] as f64 / s) as f32;
        }
    }
    out
}

/// Pulls a probability gradient back through the softmax.
pub fn softmax_backward(probs: &Tensor, d_probs: &Tensor) -> Tensor {
    let c = probs.channels();
    let n = probs.voxels();
    let p = probs.data();
    let g = d_probs.data();
    let mut out = Tensor::zeros(probs.shape());
    let o = out.data_mut();
    for i in 0..n {
        let dot: f64 = (0..c).map(|k| p[k * n + i] as f64 * g[k * n + i] as f64).sum();
        for k in 0..c {
            o[k * n + i] = (p[k * n + i] as f64 * (g[k * n + i] as f64 - dot)) as f32;
        }
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
