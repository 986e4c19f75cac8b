//! Exact Euclidean distance transform on anisotropic 3D grids
//! (separable lower-envelope-of-parabolas algorithm).

use crate::volume::Dims;

/// Squared distance (in physical units) from every voxel to the nearest
/// voxel where `features` is set. Without any feature every entry is `+inf`.
pub fn squared_distance_to(features: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    assert_eq!(features.len(), dims.len());
    let mut f: Vec<f64> = features
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let [d, h, w] = dims.0;
    let mut line = Vec::new();
    let mut out = Vec::new();
    // axis 2 (width), then 1, then 0
    for axis in [2usize, 1, 0] {
        let n = dims.0[axis];
        let stride = match axis {
            0 => h * w,
            1 => w,
            _ => 1,
        };
        let s2 = spacing[axis] * spacing[axis];
        let (outer_a, outer_b) = match axis {
            0 => (h, w),
            1 => (d, w),
            _ => (d, h),
        };
        for a in 0..outer_a {
            for b in 0..outer_b {
                let base = match axis {
                    0 => a * w + b,
                    1 => a * h * w + b,
                    _ => (a * h + b) * w,
                };
                line.clear();
                line.extend((0..n).map(|i| f[base + i * stride]));
                lower_envelope(&line, s2, &mut out);
                for i in 0..n {
                    f[base + i * stride] = out[i];
                }
            }
        }
    }
    f
}

/// `out[q] = min_p (f[p] + s2 * (q - p)^2)`.
fn lower_envelope(f: &[f64], s2: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64))
                / (2.0 * s2 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *o = f[p] + s2 * dq * dq;
    }
}

/// Distance (not squared) from each voxel to the nearest set voxel.
pub fn distance_to(features: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    squared_distance_to(features, dims, spacing)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

/// Distance of every voxel to the mask boundary: background voxels get their
/// distance to the mask, mask voxels their distance to the background.
/// An empty or full mask yields all zeros.
pub fn boundary_distance(mask: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let any_in = mask.iter().any(|&b| b);
    let any_out = mask.iter().any(|&b| !b);
    if !any_in || !any_out {
        return vec![0.0; mask.len()];
    }
    let outside: Vec<bool> = mask.iter().map(|&b| !b).collect();
    let to_mask = distance_to(mask, dims, spacing);
    let to_bg = distance_to(&outside, dims, spacing);
    to_mask.iter().zip(&to_bg).map(|(a, b)| a + b).collect()
}
