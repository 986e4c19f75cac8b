use super::{Dims, LabelMap, Volume, MIN_AXIS};
use crate::error::{Error, Result};

/// Regridding onto a new voxel count with the physical extent preserved.
/// Intensities are interpolated trilinearly, labels by nearest neighbour.
pub trait Resample: Sized {
    fn resample(&self, target_shape: [usize; 3]) -> Result<Self>;
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.iter().any(|&n| n < MIN_AXIS) {
        return Err(Error::Argument(format!(
            "resample target {target:?} has an axis below {MIN_AXIS}"
        )));
    }
    Ok(())
}

/// Source continuous index for each target index along one axis
/// (voxel centres aligned to the same physical extent).
fn source_coords(n_src: usize, n_dst: usize) -> Vec<f64> {
    let ratio = n_src as f64 / n_dst as f64;
    (0..n_dst).map(|i| (i as f64 + 0.5) * ratio - 0.5).collect()
}

fn rescaled_spacing(spacing: [f64; 3], src: [usize; 3], dst: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| spacing[a] * src[a] as f64 / dst[a] as f64)
}

/// Trilinear sample at a continuous voxel index; `None` outside
/// `[-0.5, n - 0.5]` on any axis. Inside that band indices are clamped.
pub(crate) fn trilinear(data: &[f32], dims: Dims, p: [f64; 3]) -> Option<f32> {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0f32; 3];
    for a in 0..3 {
        let n = dims.0[a];
        if !(p[a] >= -0.5 && p[a] <= n as f64 - 0.5) {
            return None;
        }
        let c = p[a].clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        i0[a] = lo;
        i1[a] = (lo + 1).min(n - 1);
        f[a] = (c - lo as f64) as f32;
    }
    let v = |z: usize, y: usize, x: usize| data[dims.index(z, y, x)];
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let c00 = lerp(v(i0[0], i0[1], i0[2]), v(i0[0], i0[1], i1[2]), f[2]);
    let c01 = lerp(v(i0[0], i1[1], i0[2]), v(i0[0], i1[1], i1[2]), f[2]);
    let c10 = lerp(v(i1[0], i0[1], i0[2]), v(i1[0], i0[1], i1[2]), f[2]);
    let c11 = lerp(v(i1[0], i1[1], i0[2]), v(i1[0], i1[1], i1[2]), f[2]);
    Some(lerp(lerp(c00, c01, f[1]), lerp(c10, c11, f[1]), f[0]))
}

/// Nearest-neighbour lookup with the same support as [`trilinear`].
pub(crate) fn nearest<T: Copy>(data: &[T], dims: Dims, p: [f64; 3]) -> Option<T> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let n = dims.0[a];
        if !(p[a] >= -0.5 && p[a] <= n as f64 - 0.5) {
            return None;
        }
        idx[a] = (p[a].round().max(0.0) as usize).min(n - 1);
    }
    Some(data[dims.index(idx[0], idx[1], idx[2])])
}

impl Resample for Volume {
    fn resample(&self, target: [usize; 3]) -> Result<Self> {
        check_target(target)?;
        let src = self.shape();
        let coords = [0, 1, 2].map(|a| source_coords(src[a], target[a]));
        let dims = self.dims();
        let mut out = Vec::with_capacity(target.iter().product());
        for &z in &coords[0] {
            for &y in &coords[1] {
                for &x in &coords[2] {
                    out.push(trilinear(self.data(), dims, [z, y, x]).expect("inside source grid"));
                }
            }
        }
        Volume::new(
            out,
            target,
            rescaled_spacing(self.spacing_mm(), src, target),
            self.modality(),
        )
    }
}

impl Resample for LabelMap {
    fn resample(&self, target: [usize; 3]) -> Result<Self> {
        check_target(target)?;
        let src = self.shape();
        let coords = [0, 1, 2].map(|a| source_coords(src[a], target[a]));
        let dims = self.dims();
        let mut out = Vec::with_capacity(target.iter().product());
        for &z in &coords[0] {
            for &y in &coords[1] {
                for &x in &coords[2] {
                    out.push(nearest(self.data(), dims, [z, y, x]).expect("inside source grid"));
                }
            }
        }
        LabelMap::new(out, target, rescaled_spacing(self.spacing_mm(), src, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use proptest::prelude::*;

    #[test]
    fn identity_shape_is_identity() {
        let data: Vec<f32> = (0..1000).map(|i| (i as f32).sqrt()).collect();
        let v = Volume::new(data, [10, 10, 10], [1.0, 2.0, 0.5], Modality::Mri).unwrap();
        assert_eq!(v.resample([10, 10, 10]).unwrap(), v);
    }

    #[test]
    fn constant_upsamples_to_constant() {
        let v = Volume::filled(0.3, [16; 3], [1.0; 3], Modality::Ct).unwrap();
        let r = v.resample([32; 3]).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.3));
        assert_eq!(r.spacing_mm(), [0.5; 3]);
    }

    #[test]
    fn label_downsample_keeps_codes() {
        // explicit checkerboard of 0/8 with a nearest-neighbour oracle:
        // target i maps to source round(2i + 0.5) = 2i + 1.
        let dims = Dims([16, 16, 16]);
        let data: Vec<u8> = (0..dims.len())
            .map(|i| {
                let [z, y, x] = dims.coords(i);
                if (z / 3 + y / 2 + x) % 2 == 0 { 8 } else { 0 }
            })
            .collect();
        let l = LabelMap::new(data.clone(), [16; 3], [1.0; 3]).unwrap();
        let r = l.resample([8; 3]).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(r.get(z, y, x), data[dims.index(2 * z + 1, 2 * y + 1, 2 * x + 1)]);
                }
            }
        }
        let h = r.histogram();
        assert_eq!(h[0] + h[8], 512);
    }

    #[test]
    fn small_target_is_rejected() {
        let v = Volume::filled(0.0, [8; 3], [1.0; 3], Modality::Ct).unwrap();
        assert!(matches!(v.resample([8, 7, 8]), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn extent_is_preserved(d in 8usize..40, h in 8usize..40, w in 8usize..40,
                               td in 8usize..40, th in 8usize..40, tw in 8usize..40) {
            let v = Volume::filled(1.0, [d, h, w], [0.39, 0.39, 1.02], Modality::Ct).unwrap();
            let r = v.resample([td, th, tw]).unwrap();
            for a in 0..3 {
                let before = v.shape()[a] as f64 * v.spacing_mm()[a];
                let after = r.shape()[a] as f64 * r.spacing_mm()[a];
                prop_assert!(((before - after) / before).abs() < 1e-6);
            }
        }

        #[test]
        fn labels_never_gain_codes(seed in 0u64..1000, t in 8usize..24) {
            let data: Vec<u8> = (0..12 * 12 * 12u64)
                .map(|i| if (i * 2654435761 + seed) % 7 < 2 { 3 } else { 5 })
                .collect();
            let l = LabelMap::new(data, [12; 3], [1.0; 3]).unwrap();
            let r = l.resample([t; 3]).unwrap();
            prop_assert!(r.data().iter().all(|&c| c == 3 || c == 5));
        }
    }
}
