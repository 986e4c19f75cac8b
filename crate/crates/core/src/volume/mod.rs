//! Volumetric data carriers shared by every stage: intensity volumes,
//! label maps and subject records, plus file I/O and resampling.

mod io;
pub(crate) mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_labels, load_volume, save_labels, save_volume, Sidecar, FORMAT_VERSION};
pub use resample::Resample;

/// Smallest admissible extent along any axis.
pub const MIN_AXIS: usize = 8;

/// Number of label codes (background, seven bones, suture).
pub const NUM_CLASSES: usize = 9;
pub const SUTURE: u8 = 8;

/// Display names indexed by label code.
pub const LABEL_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "right_frontal",
    "left_frontal",
    "right_temporal",
    "left_temporal",
    "occipital",
    "right_parietal",
    "left_parietal",
    "suture",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Mri,
    Ct,
    Sct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

/// Row-major `(depth, height, width)` indexing helper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.0[1] + y) * self.0[2] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[2];
        let y = (i / self.0[2]) % self.0[1];
        let z = i / (self.0[1] * self.0[2]);
        [z, y, x]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_grid(shape: [usize; 3], spacing_mm: [f64; 3], len: usize) -> Result<()> {
    if shape.iter().any(|&n| n < MIN_AXIS) {
        return Err(Error::Shape(format!(
            "every axis must have at least {MIN_AXIS} voxels, got {shape:?}"
        )));
    }
    if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Argument(format!(
            "spacing must be positive and finite, got {spacing_mm:?}"
        )));
    }
    if shape.iter().product::<usize>() != len {
        return Err(Error::Shape(format!(
            "payload of {len} values does not match shape {shape:?}"
        )));
    }
    Ok(())
}

/// Scalar intensity volume in `(depth, height, width)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    modality: Modality,
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        modality: Modality,
    ) -> Result<Self> {
        check_grid(shape, spacing_mm, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Volume {
            data,
            shape,
            spacing_mm,
            modality,
        })
    }

    pub fn filled(value: f32, shape: [usize; 3], spacing_mm: [f64; 3], modality: Modality) -> Result<Self> {
        Volume::new(vec![value; shape.iter().product()], shape, spacing_mm, modality)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dims(&self) -> Dims {
        Dims(self.shape)
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims().index(z, y, x)]
    }

    /// Same grid and modality with new intensities (validated).
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(data, self.shape, self.spacing_mm, self.modality)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn same_grid(&self, other_shape: [usize; 3]) -> bool {
        self.shape == other_shape
    }
}

/// Integer label grid over codes `0..=8`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Vec<u8>,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
}

impl LabelMap {
    pub fn new(data: Vec<u8>, shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        check_grid(shape, spacing_mm, data.len())?;
        if let Some(&c) = data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Domain(format!("label code {c} outside 0..=8")));
        }
        Ok(LabelMap {
            data,
            shape,
            spacing_mm,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dims(&self) -> Dims {
        Dims(self.shape)
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims().index(z, y, x)]
    }

    /// Voxel count per label code.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }

    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&c| c == label).collect()
    }

    /// Channel-first one-hot encoding `[9, D, H, W]`.
    pub fn one_hot(&self) -> Vec<f32> {
        let n = self.data.len();
        let mut out = vec![0.0; NUM_CLASSES * n];
        for (i, &c) in self.data.iter().enumerate() {
            out[c as usize * n + i] = 1.0;
        }
        out
    }
}

/// One subject of the cohort: paired MRI/CT and the bone/suture labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age_days: u32,
    pub sex: Sex,
    pub mri: Volume,
    pub ct: Volume,
    pub bones_sutures: LabelMap,
}

impl SubjectRecord {
    /// Checks that the three grids agree.
    pub fn validate(&self) -> Result<()> {
        let s = self.ct.shape();
        if self.mri.shape() != s || self.bones_sutures.shape() != s {
            return Err(Error::Shape(format!(
                "subject {}: MRI {:?}, CT {:?} and labels {:?} differ",
                self.subject_id,
                self.mri.shape(),
                s,
                self.bones_sutures.shape()
            )));
        }
        let sp = self.ct.spacing_mm();
        let close = |a: [f64; 3]| a.iter().zip(&sp).all(|(x, y)| (x - y).abs() <= 1e-9 * y.abs());
        if !close(self.mri.spacing_mm()) || !close(self.bones_sutures.spacing_mm()) {
            return Err(Error::Shape(format!(
                "subject {}: spacing differs between modalities",
                self.subject_id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_invalid_grids() {
        assert!(Volume::filled(0.0, [4, 8, 8], [1.0; 3], Modality::Ct).is_err());
        assert!(Volume::filled(0.0, [8, 8, 8], [1.0, 0.0, 1.0], Modality::Ct).is_err());
        let mut data = vec![0.0; 512];
        data[3] = f32::NAN;
        assert!(Volume::new(data, [8, 8, 8], [1.0; 3], Modality::Mri).is_err());
        assert!(LabelMap::new(vec![9; 512], [8, 8, 8], [1.0; 3]).is_err());
    }

    #[test]
    fn dims_round_trip() {
        let d = Dims([8, 9, 10]);
        for i in [0, 17, 719] {
            let [z, y, x] = d.coords(i);
            assert_eq!(d.index(z, y, x), i);
        }
    }

    #[test]
    fn one_hot_layout() {
        let mut codes = vec![0u8; 512];
        codes[5] = 8;
        let l = LabelMap::new(codes, [8, 8, 8], [1.0; 3]).unwrap();
        let oh = l.one_hot();
        assert_eq!(oh[8 * 512 + 5], 1.0);
        assert_eq!(oh[5], 0.0);
        assert_eq!(oh.iter().sum::<f32>(), 512.0);
    }
}
