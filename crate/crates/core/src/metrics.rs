//! Image-quality and segmentation metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::edt;
use crate::error::{Error, Result};
use crate::models::FeatureStack;
use crate::nn::Tensor;
use crate::volume::{Dims, LabelMap, Volume, NUM_CLASSES};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Normalised 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering along all three axes.
fn filter_valid(data: &[f64], shape: [usize; 3], w: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = w.len();
    let mut cur = data.to_vec();
    let mut sh = shape;
    for axis in 0..3 {
        let mut out_sh = sh;
        out_sh[axis] = sh[axis] + 1 - k;
        let od = Dims(out_sh);
        let id = Dims(sh);
        let mut out = vec![0.0; od.len()];
        for (o, v) in out.iter_mut().enumerate() {
            let c = od.coords(o);
            let mut acc = 0.0;
            for (t, wt) in w.iter().enumerate() {
                let mut q = c;
                q[axis] += t;
                acc += wt * cur[id.index(q[0], q[1], q[2])];
            }
            *v = acc;
        }
        cur = out;
        sh = out_sh;
    }
    (cur, sh)
}

/// Mean local SSIM over every position where the 7³ Gaussian window fits
/// inside the volume (dynamic range 1).
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let shape = a.shape();
    if shape.iter().any(|&n| n < SSIM_WINDOW) {
        return Err(Error::Argument(format!("SSIM needs every axis >= {SSIM_WINDOW}")));
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let w = gaussian_window();
    let (mx, _) = filter_valid(&x, shape, &w);
    let (my, _) = filter_valid(&y, shape, &w);
    let (sxx, _) = filter_valid(&xx, shape, &w);
    let (syy, _) = filter_valid(&yy, shape, &w);
    let (sxy, _) = filter_valid(&xy, shape, &w);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| ssim_local(mx[i], my[i], sxx[i], syy[i], sxy[i]))
        .sum();
    Ok(total / n as f64)
}

/// SSIM from windowed first and second moments.
pub fn ssim_local(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> f64 {
    let vx = exx - mx * mx;
    let vy = eyy - my * my;
    let cov = exy - mx * my;
    ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// `(psnr_db, mae)` with peak 1; identical inputs give `+inf` PSNR.
pub fn psnr_mae(a: &Volume, b: &Volume) -> Result<(f64, f64)> {
    same_shape(a.shape(), b.shape())?;
    let n = a.len() as f64;
    let (mut se, mut ae) = (0.0f64, 0.0f64);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let d = p as f64 - q as f64;
        se += d * d;
        ae += d.abs();
    }
    let mse = se / n;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok((psnr, ae / n))
}

/// Sample mean and unbiased covariance of a set of vectors.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::Argument("FID needs at least two feature vectors per set".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) || d == 0 {
        return Err(Error::Argument("feature vectors differ in dimension".into()));
    }
    let n = features.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given by their moments.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return Err(Error::Argument("moment dimensions differ".into()));
    }
    let ra = psd_sqrt(cov_a);
    let inner = &ra * cov_b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dmu = mu_a - mu_b;
    Ok(dmu.dot(&dmu) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(features_a)?;
    let (mb, cb) = moments(features_b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

/// FID between the deepest frozen-feature activations of two volumes.
pub fn volume_fid(a: &Volume, b: &Volume, stack: &FeatureStack) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let fa = stack.feature_vectors(&volume_tensor(a));
    let fb = stack.feature_vectors(&volume_tensor(b));
    fid(&fa, &fb)
}

pub(crate) fn volume_tensor(v: &Volume) -> Tensor {
    let [d, h, w] = v.shape();
    Tensor::from_vec([1, d, h, w], v.data().to_vec())
}

fn unit_channels(t: &Tensor) -> Vec<f64> {
    let c = t.channels();
    let n = t.voxels();
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let norm = (0..c).map(|k| (t.channel(k)[i] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
        for k in 0..c {
            out[k * n + i] = t.channel(k)[i] as f64 / norm;
        }
    }
    out
}

/// LPIPS-style distance on the frozen feature stack: per-location unit
/// normalisation over channels, squared differences summed over channels,
/// averaged over locations, then over layers.
pub fn perceptual_distance(a: &Volume, b: &Volume, stack: &FeatureStack) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let fa = stack.activations(&volume_tensor(a));
    let fb = stack.activations(&volume_tensor(b));
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let ux = unit_channels(x);
        let uy = unit_channels(y);
        let s: f64 = ux.iter().zip(&uy).map(|(p, q)| (p - q) * (p - q)).sum();
        total += s / x.voxels() as f64;
    }
    Ok(total / fa.len() as f64)
}

fn same_grid(a: &LabelMap, b: &LabelMap) -> Result<()> {
    same_shape(a.shape(), b.shape())
}

/// Dice for labels 1..=8; empty in both counts as 1, empty in one as 0.
pub fn dice_per_label(pred: &LabelMap, gt: &LabelMap) -> Result<BTreeMap<u8, f64>> {
    same_grid(pred, gt)?;
    let mut inter = [0usize; NUM_CLASSES];
    let hp = pred.histogram();
    let hg = gt.histogram();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p == g {
            inter[p as usize] += 1;
        }
    }
    Ok((1..NUM_CLASSES as u8)
        .map(|c| {
            let (i, p, g) = (inter[c as usize], hp[c as usize], hg[c as usize]);
            let d = if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 };
            (c, d)
        })
        .collect())
}

/// Foreground voxels with at least one 6-neighbour outside the mask; the
/// grid edge counts as outside.
pub fn boundary(mask: &[bool], dims: Dims) -> Vec<bool> {
    let s = dims.0;
    (0..mask.len())
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let c = dims.coords(i);
            for a in 0..3 {
                for step in [-1isize, 1] {
                    let v = c[a] as isize + step;
                    if v < 0 || v >= s[a] as isize {
                        return true;
                    }
                    let mut q = c;
                    q[a] = v as usize;
                    if !mask[dims.index(q[0], q[1], q[2])] {
                        return true;
                    }
                }
            }
            false
        })
        .collect()
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    values[lo] + t * (values[hi] - values[lo])
}

/// 95th percentile of the pooled boundary-to-boundary distances (mm).
pub fn hd95(pred: &LabelMap, gt: &LabelMap, label: u8) -> Result<f64> {
    same_grid(pred, gt)?;
    let dims = pred.dims();
    let spacing = gt.spacing_mm();
    let mp = pred.mask(label);
    let mg = gt.mask(label);
    let which = match (mp.iter().any(|&b| b), mg.iter().any(|&b| b)) {
        (true, true) => None,
        (false, false) => Some("both"),
        (false, true) => Some("prediction"),
        (true, false) => Some("reference"),
    };
    if let Some(which) = which {
        return Err(Error::UndefinedDistance { label, which });
    }
    let bp = boundary(&mp, dims);
    let bg = boundary(&mg, dims);
    let dp = edt::distance_to(&bp, dims, spacing);
    let dg = edt::distance_to(&bg, dims, spacing);
    let mut pooled: Vec<f64> = Vec::new();
    pooled.extend((0..bp.len()).filter(|&i| bp[i]).map(|i| dg[i]));
    pooled.extend((0..bg.len()).filter(|&i| bg[i]).map(|i| dp[i]));
    Ok(percentile(&mut pooled, 95.0))
}

/// HD95 for labels 1..=8; undefined labels carry the error message.
pub fn hd95_per_label(pred: &LabelMap, gt: &LabelMap) -> Result<BTreeMap<u8, std::result::Result<f64, String>>> {
    same_grid(pred, gt)?;
    Ok((1..NUM_CLASSES as u8)
        .map(|c| (c, hd95(pred, gt, c).map_err(|e| e.to_string())))
        .collect())
}

/// Image-quality metrics of one synthetic volume against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetrics {
    pub fid: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    /// `None` stands for an infinite PSNR (identical volumes).
    pub psnr_db: Option<f64>,
    pub mae: f64,
}

pub fn synthesis_metrics(sct: &Volume, ct: &Volume, stack: &FeatureStack) -> Result<SynthesisMetrics> {
    let (psnr, mae) = psnr_mae(sct, ct)?;
    Ok(SynthesisMetrics {
        fid: volume_fid(sct, ct, stack)?,
        ssim: ssim(sct, ct)?,
        lpips_proxy: perceptual_distance(sct, ct, stack)?,
        psnr_db: psnr.is_finite().then_some(psnr),
        mae,
    })
}

/// Segmentation overlap metrics of one prediction. Labels whose HD95 is
/// undefined are left out of `hd95_mm` and listed in `hd95_undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dice: BTreeMap<String, f64>,
    pub hd95_mm: BTreeMap<String, f64>,
    pub hd95_undefined: Vec<String>,
    /// Mean over the seven bones.
    pub mean_bone_dice: f64,
    pub suture_dice: f64,
    /// Mean over all eight labels.
    pub mean_dice: f64,
    pub mean_hd95_mm: Option<f64>,
}

pub fn segmentation_metrics(pred: &LabelMap, gt: &LabelMap) -> Result<SegmentationMetrics> {
    use crate::volume::LABEL_NAMES;
    let dice = dice_per_label(pred, gt)?;
    let hd = hd95_per_label(pred, gt)?;
    let mut hd95_mm = BTreeMap::new();
    let mut undefined = Vec::new();
    for (c, v) in &hd {
        match v {
            Ok(d) => {
                hd95_mm.insert(LABEL_NAMES[*c as usize].to_string(), *d);
            }
            Err(_) => undefined.push(LABEL_NAMES[*c as usize].to_string()),
        }
    }
    let bones: Vec<f64> = (1..=7u8).map(|c| dice[&c]).collect();
    let mean_hd = (!hd95_mm.is_empty()).then(|| hd95_mm.values().sum::<f64>() / hd95_mm.len() as f64);
    Ok(SegmentationMetrics {
        mean_bone_dice: bones.iter().sum::<f64>() / 7.0,
        suture_dice: dice[&8],
        mean_dice: dice.values().sum::<f64>() / dice.len() as f64,
        mean_hd95_mm: mean_hd,
        dice: dice
            .into_iter()
            .map(|(c, d)| (LABEL_NAMES[c as usize].to_string(), d))
            .collect(),
        hd95_mm,
        hd95_undefined: undefined,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n: values.len() })
    }
}

/// Per-subject entry of a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub age_days: u32,
    pub synthesis: SynthesisMetrics,
    /// Keyed by evaluation arm (e.g. segmentation of real CT vs sCT).
    pub segmentation: BTreeMap<String, SegmentationMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subjects: Vec<SubjectMetrics>,
    /// Cohort mean ± std keyed by `"<metric>"` or `"<arm>.<metric>"`.
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl MetricsReport {
    pub fn new(subjects: Vec<SubjectMetrics>) -> Self {
        let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut push = |k: String, v: f64| cols.entry(k).or_default().push(v);
        for s in &subjects {
            push("fid".into(), s.synthesis.fid);
            push("ssim".into(), s.synthesis.ssim);
            push("lpips_proxy".into(), s.synthesis.lpips_proxy);
            if let Some(p) = s.synthesis.psnr_db {
                push("psnr_db".into(), p);
            }
            push("mae".into(), s.synthesis.mae);
            for (arm, m) in &s.segmentation {
                push(format!("{arm}.mean_bone_dice"), m.mean_bone_dice);
                push(format!("{arm}.suture_dice"), m.suture_dice);
                push(format!("{arm}.mean_dice"), m.mean_dice);
                if let Some(h) = m.mean_hd95_mm {
                    push(format!("{arm}.mean_hd95_mm"), h);
                }
                for (label, d) in &m.dice {
                    push(format!("{arm}.dice.{label}"), *d);
                }
                for (label, d) in &m.hd95_mm {
                    push(format!("{arm}.hd95_mm.{label}"), *d);
                }
            }
        }
        let aggregate = cols
            .into_iter()
            .filter_map(|(k, v)| MeanStd::of(&v).map(|m| (k, m)))
            .collect();
        MetricsReport { subjects, aggregate }
    }

    pub fn mean(&self, key: &str) -> Option<f64> {
        self.aggregate.get(key).map(|m| m.mean)
    }
}
