use nalgebra::{DMatrix, DVector};

use super::transform::voxel_to_mm;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Exponents `(a, b, c)` of the monomials `z^a y^b x^c` with total degree
/// at most `order`.
fn monomials(order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..=order {
        for b in 0..=order - a {
            for c in 0..=order - a - b {
                out.push([a, b, c]);
            }
        }
    }
    out
}

fn basis(exps: &[[usize; 3]], q: [f64; 3], row: &mut [f64]) {
    for (r, e) in row.iter_mut().zip(exps) {
        *r = q[0].powi(e[0] as i32) * q[1].powi(e[1] as i32) * q[2].powi(e[2] as i32);
    }
}

/// Log-intensity steps above this between neighbours are tissue edges.
const EDGE_LOG_STEP: f64 = 0.25;

/// Divides out a smooth multiplicative field.
///
/// The log-field is a degree-`order` polynomial fitted by least squares
/// over the foreground (nonzero voxels). The fit works on differences
/// between face neighbours rather than on raw log-intensity: inside a tissue
/// the log-step is the field's own step, while steps larger than
/// `EDGE_LOG_STEP` are tissue edges and are left out. Raw log-intensity
/// would let the polynomial absorb tissue contrast. The field is scaled to
/// unit mean over the foreground; background stays zero.
pub fn correct_bias(mri: &Volume, order: usize) -> Result<Volume> {
    let shape = mri.shape();
    let dims = mri.dims();
    let sp = mri.spacing_mm();
    let half = [0, 1, 2].map(|a| 0.5 * shape[a] as f64 * sp[a]);
    let data = mri.data();
    let fg: Vec<usize> = (0..mri.len()).filter(|&i| data[i] != 0.0).collect();
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if let Some(&i) = fg.iter().find(|&&i| data[i] < 0.0) {
        return Err(Error::Domain(format!(
            "negative intensity {} at voxel {i}; bias correction needs a positive foreground",
            data[i]
        )));
    }
    // the constant term is free under differencing; it is fixed by the
    // unit-mean normalisation instead
    let exps: Vec<[usize; 3]> = monomials(order).into_iter().skip(1).collect();
    let k = exps.len();
    let coord = |i: usize| {
        let c = dims.coords(i);
        [0, 1, 2].map(|a| voxel_to_mm(c[a], shape[a], sp[a]) / half[a])
    };
    let mut coef = DVector::<f64>::zeros(k);
    if k > 0 {
        let mut ata = DMatrix::<f64>::zeros(k, k);
        let mut atb = DVector::<f64>::zeros(k);
        let (mut bi, mut bj) = (vec![0.0; k], vec![0.0; k]);
        let strides = [shape[1] * shape[2], shape[2], 1];
        for &i in &fg {
            let c = dims.coords(i);
            for a in 0..3 {
                if c[a] + 1 >= shape[a] {
                    continue;
                }
                let j = i + strides[a];
                if data[j] <= 0.0 {
                    continue;
                }
                let step = (data[j] as f64).ln() - (data[i] as f64).ln();
                if step.abs() > EDGE_LOG_STEP {
                    continue;
                }
                basis(&exps, coord(i), &mut bi);
                basis(&exps, coord(j), &mut bj);
                for r in 0..k {
                    let dr = bj[r] - bi[r];
                    atb[r] += dr * step;
                    for cc in r..k {
                        ata[(r, cc)] += dr * (bj[cc] - bi[cc]);
                    }
                }
            }
        }
        for r in 0..k {
            for cc in 0..r {
                ata[(r, cc)] = ata[(cc, r)];
            }
        }
        coef = ata
            .svd(true, true)
            .solve(&atb, 1e-12)
            .map_err(|e| Error::Domain(format!("bias fit failed: {e}")))?;
    }
    let mut row = vec![0.0; k];
    let field: Vec<f64> = fg
        .iter()
        .map(|&i| {
            basis(&exps, coord(i), &mut row);
            row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>().exp()
        })
        .collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let mut out = data.to_vec();
    for (f, &i) in field.iter().zip(&fg) {
        out[i] = (out[i] as f64 * mean / f) as f32;
    }
    mri.with_data(out)
}
