use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::resample::{nearest, trilinear};
use crate::volume::{Dims, LabelMap, Volume};

pub type Mat3 = [[f64; 3]; 3];

/// Spatial similarity transform acting on physical coordinates (mm)
/// measured from the grid centre, in `(depth, height, width)` order.
///
/// `T(p) = R · (scale ⊙ p) + translation_mm`, where
/// `R = R_depth(rotation[0]) · R_height(rotation[1]) · R_width(rotation[2])`
/// (Z-Y-X Euler order: the width-axis rotation acts first).
///
/// `T` maps moving-space points onto fixed-space points; resampling a
/// moving volume through it ([`apply_transform`]) evaluates
/// `moving(T⁻¹(p))` at every fixed-grid point `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: [f64; 3],
    pub translation_mm: [f64; 3],
    pub scale: [f64; 3],
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn axis_rotation(axis: usize, theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    let b = (axis + 1) % 3;
    let d = (axis + 2) % 3;
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[b][b] = c;
    m[b][d] = -s;
    m[d][b] = s;
    m[d][d] = c;
    m
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn transpose(a: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [a[0][i], a[1][i], a[2][i]])
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: [0.0; 3],
            translation_mm: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        SimilarityTransform {
            translation_mm: t,
            ..Self::identity()
        }
    }

    pub fn is_rigid(&self) -> bool {
        self.scale == [1.0; 3]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let r = &self.rotation;
        mat_mul(
            &mat_mul(&axis_rotation(0, r[0]), &axis_rotation(1, r[1])),
            &axis_rotation(2, r[2]),
        )
    }

    /// Linear part `R · diag(scale)`.
    pub fn linear(&self) -> Mat3 {
        let r = self.rotation_matrix();
        [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[i][j] * self.scale[j]))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = mat_vec(&self.linear(), p);
        [0, 1, 2].map(|a| q[a] + self.translation_mm[a])
    }

    /// Linear part and offset of `T⁻¹`, valid for any positive scales.
    pub fn inverse_affine(&self) -> (Mat3, [f64; 3]) {
        let rt = transpose(&self.rotation_matrix());
        let m: Mat3 = [0, 1, 2].map(|i| [0, 1, 2].map(|j| rt[i][j] / self.scale[i]));
        let t = mat_vec(&m, self.translation_mm);
        (m, t.map(|v| -v))
    }

    fn uniform_scale(&self) -> Result<f64> {
        let s = self.scale[0];
        if self.scale.iter().any(|&v| (v - s).abs() > 1e-12 * s.abs()) {
            return Err(Error::Argument(
                "inverse/composition require an isotropic scale".into(),
            ));
        }
        Ok(s)
    }

    fn from_parts(r: &Mat3, scale: f64, t: [f64; 3]) -> Self {
        SimilarityTransform {
            rotation: euler_from_matrix(r),
            translation_mm: t,
            scale: [scale; 3],
        }
    }

    /// Exact inverse; defined for rigid and isotropic-scale transforms.
    pub fn inverse(&self) -> Result<Self> {
        let s = self.uniform_scale()?;
        let rt = transpose(&self.rotation_matrix());
        let t = mat_vec(&rt, self.translation_mm).map(|v| -v / s);
        let mut inv = Self::from_parts(&rt, 1.0 / s, t);
        if self.is_rigid() {
            inv.scale = [1.0; 3];
        }
        Ok(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        let s1 = other.uniform_scale()?;
        let s2 = self.uniform_scale()?;
        let r = mat_mul(&self.rotation_matrix(), &other.rotation_matrix());
        let rt1 = mat_vec(&self.rotation_matrix(), other.translation_mm);
        let t = [0, 1, 2].map(|a| s2 * rt1[a] + self.translation_mm[a]);
        Ok(Self::from_parts(&r, s1 * s2, t))
    }
}

/// Inverse of [`SimilarityTransform::rotation_matrix`].
pub fn euler_from_matrix(r: &Mat3) -> [f64; 3] {
    let b = r[0][2].clamp(-1.0, 1.0).asin();
    let c = (-r[0][1]).atan2(r[0][0]);
    let a = (-r[1][2]).atan2(r[2][2]);
    [a, b, c]
}

/// Physical position (mm from grid centre) of voxel centre `i` on one axis.
#[inline]
pub fn voxel_to_mm(i: usize, n: usize, spacing: f64) -> f64 {
    (i as f64 + 0.5 - n as f64 / 2.0) * spacing
}

#[inline]
pub fn mm_to_voxel(p: f64, n: usize, spacing: f64) -> f64 {
    p / spacing + n as f64 / 2.0 - 0.5
}

fn pull_back<T: Copy>(
    shape: [usize; 3],
    spacing: [f64; 3],
    t: &SimilarityTransform,
    mut sample: impl FnMut([f64; 3]) -> Option<T>,
    background: T,
) -> Vec<T> {
    let (m, off) = t.inverse_affine();
    let dims = Dims(shape);
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..shape[0] {
        let pz = voxel_to_mm(z, shape[0], spacing[0]);
        for y in 0..shape[1] {
            let py = voxel_to_mm(y, shape[1], spacing[1]);
            for x in 0..shape[2] {
                let p = [pz, py, voxel_to_mm(x, shape[2], spacing[2])];
                let q = mat_vec(&m, p);
                let idx = [0, 1, 2].map(|a| mm_to_voxel(q[a] + off[a], shape[a], spacing[a]));
                out.push(sample(idx).unwrap_or(background));
            }
        }
    }
    out
}

/// Resampling through a transform about the grid centre.
pub trait Transformable: Sized {
    fn transformed(&self, t: &SimilarityTransform) -> Self;
}

impl Transformable for Volume {
    fn transformed(&self, t: &SimilarityTransform) -> Self {
        let dims = self.dims();
        let data = pull_back(
            self.shape(),
            self.spacing_mm(),
            t,
            |p| trilinear(self.data(), dims, p),
            0.0,
        );
        self.with_data(data).expect("interpolation of finite data stays finite")
    }
}

impl Transformable for LabelMap {
    fn transformed(&self, t: &SimilarityTransform) -> Self {
        let dims = self.dims();
        let data = pull_back(
            self.shape(),
            self.spacing_mm(),
            t,
            |p| nearest(self.data(), dims, p),
            0u8,
        );
        LabelMap::new(data, self.shape(), self.spacing_mm()).expect("codes copied from a valid map")
    }
}

/// Resamples `v` through `t`: trilinear for intensities, nearest for
/// labels, background outside the source field of view.
pub fn apply_transform<V: Transformable>(v: &V, t: &SimilarityTransform) -> V {
    v.transformed(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use proptest::prelude::*;

    fn close(a: &SimilarityTransform, b: &SimilarityTransform, tol: f64) -> bool {
        (0..3).all(|i| {
            (a.rotation[i] - b.rotation[i]).abs() < tol
                && (a.translation_mm[i] - b.translation_mm[i]).abs() < tol
                && (a.scale[i] - b.scale[i]).abs() < tol
        })
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(a in -1.2f64..1.2, b in -1.2f64..1.2, c in -1.2f64..1.2,
                                       tz in -20.0f64..20.0, ty in -20.0f64..20.0, tx in -20.0f64..20.0,
                                       s in 0.7f64..1.4, rigid in any::<bool>()) {
            let t = SimilarityTransform {
                rotation: [a, b, c],
                translation_mm: [tz, ty, tx],
                scale: if rigid { [1.0; 3] } else { [s; 3] },
            };
            let inv = t.inverse().unwrap();
            if rigid {
                prop_assert!(inv.is_rigid());
            }
            prop_assert!(close(&t.compose(&inv).unwrap(), &SimilarityTransform::identity(), 1e-9));
            prop_assert!(close(&inv.compose(&t).unwrap(), &SimilarityTransform::identity(), 1e-9));
            let p = [3.0, -7.0, 11.0];
            let back = inv.apply(t.apply(p));
            for k in 0..3 { prop_assert!((back[k] - p[k]).abs() < 1e-9); }
        }

        #[test]
        fn euler_round_trip(a in -3.0f64..3.0, b in -1.5f64..1.5, c in -3.0f64..3.0) {
            let t = SimilarityTransform { rotation: [a, b, c], ..SimilarityTransform::identity() };
            let e = euler_from_matrix(&t.rotation_matrix());
            for k in 0..3 { prop_assert!((e[k] - [a, b, c][k]).abs() < 1e-9); }
        }
    }

    #[test]
    fn anisotropic_inverse_is_rejected() {
        let t = SimilarityTransform { scale: [1.0, 1.1, 1.0], ..SimilarityTransform::identity() };
        assert!(t.inverse().is_err());
        // the affine inverse is still available for resampling
        let (m, off) = t.inverse_affine();
        let p = t.apply([1.0, 2.0, 3.0]);
        let q = mat_vec(&m, p);
        for a in 0..3 {
            assert!((q[a] + off[a] - [1.0, 2.0, 3.0][a]).abs() < 1e-12);
        }
    }

    fn ramp() -> Volume {
        let dims = Dims([12, 12, 12]);
        let data = (0..dims.len()).map(|i| {
            let [z, y, x] = dims.coords(i);
            z as f32 * 0.04 + y as f32 * 0.03 + 0.3 * (x as f32 * 0.25).sin() + 0.3
        }).collect();
        Volume::new(data, [12; 3], [1.5, 1.0, 0.5], Modality::Ct).unwrap()
    }

    #[test]
    fn identity_resampling() {
        let v = ramp();
        let out = apply_transform(&v, &SimilarityTransform::identity());
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let l = LabelMap::new(v.data().iter().map(|x| (x * 3.0) as u8 % 9).collect(), [12; 3], [1.5, 1.0, 0.5]).unwrap();
        assert_eq!(apply_transform(&l, &SimilarityTransform::identity()), l);
    }

    #[test]
    fn translation_round_trip_on_interior() {
        let v = ramp();
        let t = SimilarityTransform::translation([1.3 * 1.5, -0.7, 0.6]);
        let back = apply_transform(&apply_transform(&v, &t), &t.inverse().unwrap());
        let mut diff = 0.0;
        let mut n = 0;
        for z in 3..9 {
            for y in 3..9 {
                for x in 3..9 {
                    diff += (back.get(z, y, x) - v.get(z, y, x)).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(diff / (n as f64) < 0.02, "{}", diff / n as f64);
    }

    #[test]
    fn quarter_turn_moves_bar_to_orthogonal_axis() {
        // bar along width (axis 2) through the centre; rotate 90° about depth.
        let n = 9;
        let dims = Dims([n, n, n]);
        let codes: Vec<u8> = (0..dims.len())
            .map(|i| {
                let [z, y, _] = dims.coords(i);
                (z == 4 && y == 4) as u8
            })
            .collect();
        let l = LabelMap::new(codes, [n; 3], [1.0; 3]).unwrap();
        let t = SimilarityTransform {
            rotation: [std::f64::consts::FRAC_PI_2, 0.0, 0.0],
            ..SimilarityTransform::identity()
        };
        let r = apply_transform(&l, &t);
        for i in 0..dims.len() {
            let [z, _, x] = dims.coords(i);
            assert_eq!(r.data()[i], (z == 4 && x == 4) as u8, "voxel {:?}", dims.coords(i));
        }
    }
}
