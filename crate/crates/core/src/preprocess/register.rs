use serde::{Deserialize, Serialize};

use super::transform::{mat_vec, mm_to_voxel, voxel_to_mm, SimilarityTransform};
use crate::error::{Error, Result};
use crate::volume::resample::trilinear;
use crate::volume::{Dims, Modality, Resample, Volume, MIN_AXIS};

pub const PYRAMID_LEVELS: usize = 3;
pub const EVALUATIONS_PER_LEVEL: usize = 200;
pub const MI_BINS: usize = 32;
/// Golden-section evaluations per line search.
const LINE_EVALS: usize = 7;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    Rigid6,
    Similarity9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Mse,
    MutualInformation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    #[serde(flatten)]
    pub transform: SimilarityTransform,
    pub mode: RegistrationMode,
    pub metric: SimilarityMetric,
    /// False when the coarsest level spent its whole budget without a
    /// single improving step.
    pub converged: bool,
    /// Cost at the returned transform on the full-resolution grid.
    #[serde(skip)]
    pub cost: f64,
}

fn same_family(a: Modality, b: Modality) -> bool {
    a == b || matches!((a, b), (Modality::Ct, Modality::Sct) | (Modality::Sct, Modality::Ct))
}

/// Resamples `moving` onto the grid of `fixed` through `t` (moving space to
/// fixed space); samples outside the moving field of view are zero.
pub fn warp_onto(moving: &Volume, fixed_shape: [usize; 3], fixed_spacing: [f64; 3], t: &SimilarityTransform) -> Vec<f32> {
    let (m, off) = t.inverse_affine();
    let ms = moving.shape();
    let msp = moving.spacing_mm();
    let mdims = moving.dims();
    let mut out = Vec::with_capacity(fixed_shape.iter().product());
    for z in 0..fixed_shape[0] {
        let pz = voxel_to_mm(z, fixed_shape[0], fixed_spacing[0]);
        for y in 0..fixed_shape[1] {
            let py = voxel_to_mm(y, fixed_shape[1], fixed_spacing[1]);
            for x in 0..fixed_shape[2] {
                let q = mat_vec(&m, [pz, py, voxel_to_mm(x, fixed_shape[2], fixed_spacing[2])]);
                let idx = [0, 1, 2].map(|a| mm_to_voxel(q[a] + off[a], ms[a], msp[a]));
                out.push(trilinear(moving.data(), mdims, idx).unwrap_or(0.0));
            }
        }
    }
    out
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn range(v: &[f32], mask: &[bool]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&x, &m) in v.iter().zip(mask) {
        if m {
            lo = lo.min(x as f64);
            hi = hi.max(x as f64);
        }
    }
    (lo, hi)
}

/// Mutual information (nats) from a 32×32 joint histogram over voxels where
/// either image is nonzero. Each value is spread linearly over its two
/// nearest bin centres, which keeps the cost continuous in the transform.
pub fn mutual_information(a: &[f32], b: &[f32]) -> f64 {
    let mask: Vec<bool> = a.iter().zip(b).map(|(&x, &y)| x != 0.0 || y != 0.0).collect();
    let (alo, ahi) = range(a, &mask);
    let (blo, bhi) = range(b, &mask);
    if !alo.is_finite() {
        return 0.0;
    }
    let pos = |v: f32, lo: f64, hi: f64| -> (usize, f64) {
        if hi <= lo {
            return (0, 0.0);
        }
        let p = ((v as f64 - lo) / (hi - lo) * (MI_BINS - 1) as f64).clamp(0.0, (MI_BINS - 1) as f64);
        let i = (p.floor() as usize).min(MI_BINS - 2);
        (i, p - i as f64)
    };
    let mut joint = [[0f64; MI_BINS]; MI_BINS];
    let mut total = 0.0;
    for ((&x, &y), &m) in a.iter().zip(b).zip(&mask) {
        if !m {
            continue;
        }
        let (i, fi) = pos(x, alo, ahi);
        let (j, fj) = pos(y, blo, bhi);
        joint[i][j] += (1.0 - fi) * (1.0 - fj);
        joint[i + 1][j] += fi * (1.0 - fj);
        joint[i][j + 1] += (1.0 - fi) * fj;
        joint[i + 1][j + 1] += fi * fj;
        total += 1.0;
    }
    let mut pa = [0f64; MI_BINS];
    let mut pb = [0f64; MI_BINS];
    for i in 0..MI_BINS {
        for j in 0..MI_BINS {
            joint[i][j] /= total;
            pa[i] += joint[i][j];
            pb[j] += joint[i][j];
        }
    }
    let mut mi = 0.0;
    for i in 0..MI_BINS {
        for j in 0..MI_BINS {
            let p = joint[i][j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

/// 2× block average when every axis is even, trilinear regridding otherwise.
fn halve(v: &Volume) -> Result<Volume> {
    let s = v.shape();
    if s.iter().all(|&n| n % 2 == 0) {
        let t = s.map(|n| n / 2);
        let src = v.dims();
        let dst = Dims(t);
        let mut out = vec![0f32; dst.len()];
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    out[dst.index(z / 2, y / 2, x / 2)] += v.data()[src.index(z, y, x)] / 8.0;
                }
            }
        }
        Volume::new(out, t, v.spacing_mm().map(|d| 2.0 * d), v.modality())
    } else {
        v.resample(s.map(|n| n.div_ceil(2)))
    }
}

fn pyramid(v: &Volume) -> Result<Vec<Volume>> {
    let mut levels = vec![v.clone()];
    while levels.len() < PYRAMID_LEVELS {
        let last = levels.last().expect("non-empty");
        if last.shape().iter().any(|&n| n.div_ceil(2) < MIN_AXIS) {
            break;
        }
        levels.push(halve(last)?);
    }
    levels.reverse();
    Ok(levels)
}

fn to_transform(p: &[f64], mode: RegistrationMode) -> SimilarityTransform {
    SimilarityTransform {
        rotation: [p[0], p[1], p[2]],
        translation_mm: [p[3], p[4], p[5]],
        scale: match mode {
            RegistrationMode::Rigid6 => [1.0; 3],
            RegistrationMode::Similarity9 => [p[6], p[7], p[8]],
        },
    }
}

struct Level<'a> {
    moving: &'a Volume,
    fixed: &'a Volume,
    metric: SimilarityMetric,
    mode: RegistrationMode,
    evals: usize,
}

impl Level<'_> {
    fn cost(&mut self, p: &[f64]) -> f64 {
        self.evals += 1;
        let w = warp_onto(self.moving, self.fixed.shape(), self.fixed.spacing_mm(), &to_transform(p, self.mode));
        match self.metric {
            SimilarityMetric::Mse => mse(&w, self.fixed.data()),
            SimilarityMetric::MutualInformation => -mutual_information(&w, self.fixed.data()),
        }
    }
}

/// Estimates the transform mapping `moving` onto `fixed`.
///
/// Derivative-free coordinate descent: parameters are cycled, each with a
/// golden-section search over a bracket around its current value; a
/// bracket halves whenever its search fails to improve. A level ends after
/// two consecutive cycles without any move, or when its budget runs out.
/// Runs coarse to fine over a three-level pyramid with a budget of 200
/// cost evaluations per level.
pub fn register(
    moving: &Volume,
    fixed: &Volume,
    mode: RegistrationMode,
    metric: SimilarityMetric,
) -> Result<RegistrationResult> {
    register_from(moving, fixed, mode, metric, &SimilarityTransform::identity())
}

/// [`register`] started from `init` instead of the identity; the result
/// is never worse than `init` at full resolution.
pub fn register_from(
    moving: &Volume,
    fixed: &Volume,
    mode: RegistrationMode,
    metric: SimilarityMetric,
    init: &SimilarityTransform,
) -> Result<RegistrationResult> {
    if metric == SimilarityMetric::Mse && !same_family(moving.modality(), fixed.modality()) {
        return Err(Error::Argument(format!(
            "{:?} to {:?} registration needs mutual information",
            moving.modality(),
            fixed.modality()
        )));
    }
    let mp = pyramid(moving)?;
    let fp = pyramid(fixed)?;
    let n_levels = mp.len().min(fp.len());
    let (mp, fp) = (&mp[mp.len() - n_levels..], &fp[fp.len() - n_levels..]);
    let n_params = match mode {
        RegistrationMode::Rigid6 => 6,
        RegistrationMode::Similarity9 => 9,
    };
    let mut start: Vec<f64> = init.rotation.iter().chain(&init.translation_mm).copied().collect();
    if n_params == 9 {
        start.extend(init.scale);
    }
    let mut p = start.clone();
    let mut converged = true;
    for (li, (m, f)) in mp.iter().zip(fp).enumerate() {
        let voxel = f.spacing_mm().iter().copied().fold(0.0, f64::max);
        let mut step: Vec<f64> = (0..n_params)
            .map(|k| match k {
                0..=2 => 0.1,
                3..=5 => 2.0 * voxel,
                _ => 0.1,
            })
            .collect();
        let mut level = Level { moving: m, fixed: f, metric, mode, evals: 0 };
        let mut best = level.cost(&p);
        let mut improved_any = false;
        let mut idle_cycles = 0;
        'cycles: while idle_cycles < 2 {
            let mut moved = false;
            for k in 0..n_params {
                if level.evals + LINE_EVALS > EVALUATIONS_PER_LEVEL {
                    break 'cycles;
                }
                let (x, fx) = golden_section(&mut level, &p, k, step[k]);
                if fx < best {
                    p[k] = x;
                    best = fx;
                    moved = true;
                    improved_any = true;
                } else {
                    step[k] *= 0.5;
                }
            }
            idle_cycles = if moved { 0 } else { idle_cycles + 1 };
        }
        if li == 0 && !improved_any && level.evals + LINE_EVALS > EVALUATIONS_PER_LEVEL {
            converged = false;
        }
    }
    // never return something worse than the start at full resolution
    let (m, f) = (mp.last().expect("levels"), fp.last().expect("levels"));
    let mut level = Level { moving: m, fixed: f, metric, mode, evals: 0 };
    let c_start = level.cost(&start);
    let c = level.cost(&p);
    let (p, cost) = if c <= c_start { (p, c) } else { (start, c_start) };
    Ok(RegistrationResult {
        transform: to_transform(&p, mode),
        mode,
        metric,
        converged,
        cost,
    })
}

/// Golden-section minimisation of parameter `k` over `[x - s, x + s]`.
fn golden_section(level: &mut Level, p: &[f64], k: usize, s: f64) -> (f64, f64) {
    let mut q = p.to_vec();
    let mut eval = |x: f64, level: &mut Level| {
        q[k] = x;
        level.cost(&q)
    };
    let (mut a, mut b) = (p[k] - s, p[k] + s);
    if k >= 6 {
        a = a.max(1e-3);
    }
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = eval(c, level);
    let mut fd = eval(d, level);
    for _ in 2..LINE_EVALS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = eval(c, level);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = eval(d, level);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
