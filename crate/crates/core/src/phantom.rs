//! Procedural infant-head phantoms: paired pseudo-MRI / pseudo-CT volumes
//! with ground-truth labels for the seven calvarial bones and the sutures.
//!
//! Geometry: an ellipsoidal head (brain, bone shell, scalp) whose shell
//! above a skull-base plane is cut into plates by jittered planes. Sutures
//! are the plate rims within `w(age)` of a neighbouring plate, taken on the
//! higher-coded side, and an anterior fontanelle disk is carved out of the
//! frontal/parietal junction in young subjects. Every output is a pure
//! function of [`PhantomSpec`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edt;
use crate::error::{Error, Result};
use crate::preprocess::{apply_transform, voxel_to_mm, SimilarityTransform};
use crate::volume::{Dims, LabelMap, Modality, Sex, SubjectRecord, Volume, SUTURE};

/// Physical side length of the cubic field of view.
pub const FIELD_OF_VIEW_MM: f64 = 224.0;
pub const MIN_AGE_DAYS: u32 = 36;
pub const MAX_AGE_DAYS: u32 = 730;
/// Below this age the anterior fontanelle is always open.
pub const FONTANELLE_FORCED_BELOW_DAYS: u32 = 120;
/// Default cohort rule for an open fontanelle.
pub const FONTANELLE_DEFAULT_BELOW_DAYS: u32 = 450;
pub const MIN_GRID: usize = 24;
pub const MAX_GRID: usize = 160;
/// Narrowest suture width as a fraction of the newborn width.
pub const SUTURE_MIN_FRACTION: f64 = 0.6;

/// Tissue classes used to paint the intensity volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Scalp = 1,
    Bone = 2,
    Brain = 3,
    Suture = 4,
    Bed = 5,
}

impl Tissue {
    fn from_code(c: u8) -> Tissue {
        match c {
            1 => Tissue::Scalp,
            2 => Tissue::Bone,
            3 => Tissue::Brain,
            4 => Tissue::Suture,
            5 => Tissue::Bed,
            _ => Tissue::Background,
        }
    }

    /// Pseudo-T1 intensity before bias and noise.
    pub fn mri_intensity(self) -> f32 {
        match self {
            Tissue::Background | Tissue::Bed => 0.0,
            Tissue::Scalp => 0.4,
            Tissue::Bone => 0.05,
            Tissue::Brain => 0.6,
            Tissue::Suture => 0.25,
        }
    }

    /// Normalised CT intensity; bone density rises with age.
    pub fn ct_intensity(self, age_fraction: f64) -> f32 {
        match self {
            Tissue::Background => 0.0,
            Tissue::Scalp => 0.2,
            Tissue::Brain => 0.3,
            Tissue::Suture => 0.25,
            Tissue::Bed => 0.5,
            Tissue::Bone => (0.85 + 0.15 * age_fraction) as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub age_days: u32,
    pub sex: Sex,
    pub grid: [usize; 3],
    /// Suture width at the youngest supported age.
    pub suture_base_width_mm: f64,
    pub fontanelle: bool,
    /// Standard deviation of the multiplicative MRI noise.
    pub noise_sigma: f64,
    /// Peak deviation of the MRI bias field from 1.
    pub bias_amplitude: f64,
    pub shell_thickness_vox: f64,
    /// Scales the random head pose shared by both modalities.
    pub pose_jitter: f64,
    /// Scales an extra MRI-only pose offset (0 keeps the pair aligned).
    pub mri_misregistration: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, age_days: u32, sex: Sex, grid: [usize; 3]) -> Self {
        let spacing = FIELD_OF_VIEW_MM / grid[0].max(1) as f64;
        PhantomSpec {
            seed,
            age_days,
            sex,
            grid,
            suture_base_width_mm: 1.8 * spacing,
            fontanelle: age_days < FONTANELLE_DEFAULT_BELOW_DAYS,
            noise_sigma: 0.07,
            bias_amplitude: 0.2,
            shell_thickness_vox: 2.0,
            pose_jitter: 1.0,
            mri_misregistration: 0.0,
        }
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.grid.map(|n| FIELD_OF_VIEW_MM / n as f64)
    }

    fn age_fraction(&self) -> f64 {
        (self.age_days.clamp(MIN_AGE_DAYS, MAX_AGE_DAYS) - MIN_AGE_DAYS) as f64
            / (MAX_AGE_DAYS - MIN_AGE_DAYS) as f64
    }

    /// `w(age) = w_max − (w_max − w_min)·(age − 36)/(730 − 36)`.
    pub fn suture_width_mm(&self) -> f64 {
        let w_max = self.suture_base_width_mm;
        let w_min = SUTURE_MIN_FRACTION * w_max;
        w_max - (w_max - w_min) * self.age_fraction()
    }

    pub fn fontanelle_open(&self) -> bool {
        self.fontanelle || self.age_days < FONTANELLE_FORCED_BELOW_DAYS
    }

    /// Fontanelle disk radius; shrinks with age.
    pub fn fontanelle_radius_mm(&self) -> f64 {
        let s = self.spacing_mm()[0];
        s * (1.8 + 2.2 * (1.0 - self.age_fraction()))
    }

    fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&n| !(MIN_GRID..=MAX_GRID).contains(&n)) {
            return Err(Error::Argument(format!(
                "phantom grid {:?} outside {MIN_GRID}..={MAX_GRID}",
                self.grid
            )));
        }
        if !(MIN_AGE_DAYS..=MAX_AGE_DAYS).contains(&self.age_days) {
            return Err(Error::Argument(format!(
                "age {} days outside [{MIN_AGE_DAYS}, {MAX_AGE_DAYS}]",
                self.age_days
            )));
        }
        for (name, v) in [
            ("suture_base_width_mm", self.suture_base_width_mm),
            ("noise_sigma", self.noise_sigma),
            ("bias_amplitude", self.bias_amplitude),
            ("pose_jitter", self.pose_jitter),
            ("mri_misregistration", self.mri_misregistration),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Argument(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.shell_thickness_vox >= 1.0 && self.shell_thickness_vox.is_finite()) {
            return Err(Error::Argument("shell thickness must be at least one voxel".into()));
        }
        if self.bias_amplitude >= 0.8 {
            return Err(Error::Argument("bias amplitude must stay below 0.8".into()));
        }
        let s_max = self.spacing_mm().iter().cloned().fold(0.0, f64::max);
        let w = self.suture_width_mm();
        if w < s_max {
            return Err(Error::Generation(format!(
                "suture width {w:.3} mm is below the voxel size {s_max:.3} mm"
            )));
        }
        // Conservative size of the smallest plate (the temporal squama): a
        // quarter of the head radius, well under its arc length.
        let plate_mm = 0.25 * 0.5 * FIELD_OF_VIEW_MM * 0.5;
        if w >= plate_mm {
            return Err(Error::Generation(format!(
                "suture width {w:.3} mm is not smaller than the plate size {plate_mm:.1} mm"
            )));
        }
        Ok(())
    }
}

/// Per-subject random geometry drawn from the spec seed.
#[derive(Debug, Clone)]
struct Geometry {
    center: [f64; 3],
    radii: [f64; 3],
    head_pose: SimilarityTransform,
    mri_pose: SimilarityTransform,
    coronal: f64,
    midline: f64,
    occipital: f64,
    temporal_z: f64,
    temporal_x: f64,
    base_z: f64,
    bias: [f64; 10],
}

impl Geometry {
    fn draw(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut j = |amp: f64| rng.gen_range(-amp..=amp);
        let growth = 0.85 + 0.15 * spec.age_fraction();
        let sex = if spec.sex == Sex::M { 1.02 } else { 0.98 };
        let half = 0.5 * FIELD_OF_VIEW_MM;
        let base = [0.50, 0.60, 0.50];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            radii[a] = base[a] * half * growth * sex * (1.0 + j(0.03));
        }
        let pj = spec.pose_jitter;
        let s = spec.spacing_mm()[0];
        let head_pose = SimilarityTransform {
            rotation: [j(0.06) * pj, j(0.06) * pj, j(0.06) * pj],
            translation_mm: [j(1.5 * s) * pj, j(1.5 * s) * pj, j(1.5 * s) * pj],
            scale: [1.0; 3],
        };
        let mj = spec.mri_misregistration;
        let mri_scale = 1.0 + j(0.03) * mj;
        let mri_pose = SimilarityTransform {
            rotation: [j(0.04) * mj, j(0.04) * mj, j(0.04) * mj],
            translation_mm: [j(1.2 * s) * mj, j(1.2 * s) * mj, j(1.2 * s) * mj],
            scale: [mri_scale; 3],
        };
        let mut bias = [0.0; 10];
        for b in &mut bias {
            *b = j(1.0);
        }
        Geometry {
            center: [0.06 * half, 0.0, 0.0],
            radii,
            head_pose,
            mri_pose,
            coronal: 0.10 + j(0.04),
            midline: j(0.03),
            occipital: 0.55 + j(0.04),
            temporal_z: 0.15 + j(0.04),
            temporal_x: 0.62 + j(0.03),
            base_z: -0.30 + j(0.03),
            bias,
        }
    }

    /// Bone code (1..=7) for a shell direction `u` (unit, head frame).
    fn plate(&self, u: [f64; 3]) -> u8 {
        let [uz, uy, ux] = u;
        let left = ux >= self.midline;
        if -uy - 0.35 * uz > self.occipital {
            5
        } else if uz < self.temporal_z && ux.abs() > self.temporal_x && uy > -0.65 && uy < 0.45 {
            if left { 4 } else { 3 }
        } else if uy > self.coronal {
            if left { 2 } else { 1 }
        } else if left {
            7
        } else {
            6
        }
    }

    /// Unit direction of the anterior fontanelle (top of the coronal line).
    fn fontanelle_dir(&self) -> [f64; 3] {
        let uy = self.coronal;
        let uz = (1.0 - uy * uy).sqrt();
        [uz, uy, self.midline]
    }

    /// Smooth multiplicative field with peak deviation `amp`, unit mean
    /// around the head centre.
    fn bias_field(&self, q: [f64; 3], amp: f64) -> f64 {
        let [z, y, x] = q;
        let b = &self.bias;
        let terms = [z, y, x, z * y, z * x, y * x, z * z - 0.33, y * y - 0.33, x * x - 0.33, z * y * x];
        let raw: f64 = terms.iter().zip(b).map(|(t, c)| t * c).sum::<f64>() / 4.0;
        (1.0 + amp * raw.clamp(-1.0, 1.0)).max(0.05)
    }
}

/// Output of [`generate_subject_detailed`]: the subject plus the tissue
/// map and bookkeeping used by property tests and the CLI metadata.
#[derive(Debug, Clone)]
pub struct GeneratedSubject {
    pub record: SubjectRecord,
    /// Tissue class per voxel in CT space.
    pub tissue: Vec<u8>,
    pub suture_width_mm: f64,
    pub fontanelle_open: bool,
    /// Fontanelle voxels (subset of the suture label).
    pub fontanelle_mask: Vec<bool>,
    pub mri_pose: SimilarityTransform,
}

pub fn generate_subject(spec: &PhantomSpec) -> Result<SubjectRecord> {
    generate_subject_detailed(spec, &format!("phantom-{:016x}", spec.seed)).map(|g| g.record)
}

pub fn generate_subject_detailed(spec: &PhantomSpec, subject_id: &str) -> Result<GeneratedSubject> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geo = Geometry::draw(spec, &mut rng);
    let shape = spec.grid;
    let spacing = spec.spacing_mm();
    let dims = Dims(shape);
    let n = dims.len();
    let half = 0.5 * FIELD_OF_VIEW_MM;

    let thick_mm = spec.shell_thickness_vox * spacing[0];
    let scalp_mm = 1.5 * spacing[0];
    let head_inv = geo.head_pose.inverse_affine();

    let mut tissue = vec![Tissue::Background as u8; n];
    let mut labels = vec![0u8; n];
    // unit directions of shell voxels, for the fontanelle test
    let mut dirs: Vec<[f64; 3]> = vec![[0.0; 3]; n];
    let bed_top = -(geo.radii[0] + scalp_mm) - 6.0 * spacing[0] + geo.center[0];

    for i in 0..n {
        let c = dims.coords(i);
        let p = [0, 1, 2].map(|a| voxel_to_mm(c[a], shape[a], spacing[a]));
        // head frame: undo the subject pose, then centre on the ellipsoid
        let hp = crate::preprocess::mat_vec(&head_inv.0, p);
        let h = [0, 1, 2].map(|a| hp[a] + head_inv.1[a] - geo.center[a]);
        let e = [0, 1, 2].map(|a| h[a] / geo.radii[a]);
        let rho = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        let grad = [0, 1, 2].map(|a| e[a] / geo.radii[a]);
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
        // first-order distance to the outer skull surface (mm, >0 outside)
        let dist = if gnorm > 1e-12 { (rho - 1.0) * rho / gnorm } else { -1e9 };
        let t = if dist > scalp_mm {
            if p[0] <= bed_top && p[0] > bed_top - 2.5 * spacing[0] && p[1].abs() < 0.7 * half && p[2].abs() < 0.6 * half {
                Tissue::Bed
            } else {
                Tissue::Background
            }
        } else if dist > 0.0 {
            Tissue::Scalp
        } else if dist > -thick_mm {
            let u = e.map(|v| v / rho.max(1e-12));
            if u[0] > geo.base_z {
                dirs[i] = u;
                labels[i] = geo.plate(u);
                Tissue::Bone
            } else {
                Tissue::Scalp
            }
        } else {
            Tissue::Brain
        };
        tissue[i] = t as u8;
    }

    // sutures: plate rims within w(age) of a lower-coded neighbouring plate
    let width = spec.suture_width_mm();
    let mut suture = vec![false; n];
    for b in 1..=6u8 {
        let feat: Vec<bool> = labels.iter().map(|&c| c == b).collect();
        if !feat.iter().any(|&f| f) {
            continue;
        }
        let d2 = edt::squared_distance_to(&feat, dims, spacing);
        let lim = width * width + 1e-9;
        for i in 0..n {
            if labels[i] > b && d2[i] <= lim {
                suture[i] = true;
            }
        }
    }
    let fontanelle_open = spec.fontanelle_open();
    let mut fontanelle_mask = vec![false; n];
    if fontanelle_open {
        let f = geo.fontanelle_dir();
        let fr = spec.fontanelle_radius_mm();
        // angular radius on the unit sphere ≈ arc / mean radius
        let mean_r = (geo.radii[0] + geo.radii[1] + geo.radii[2]) / 3.0;
        let cos_lim = (fr / mean_r).cos();
        for i in 0..n {
            if labels[i] != 0 {
                let u = dirs[i];
                let dot = u[0] * f[0] + u[1] * f[1] + u[2] * f[2];
                let norm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
                if dot / norm >= cos_lim {
                    fontanelle_mask[i] = true;
                    suture[i] = true;
                }
            }
        }
    }
    // A rim voxel that does not touch two distinct plates (triple junctions,
    // shell edges) reverts to its plate. Reverting only adds bone neighbours,
    // so a single pass settles the map.
    let plates = labels.clone();
    let revert: Vec<usize> = (0..n)
        .filter(|&i| suture[i] && !fontanelle_mask[i])
        .filter(|&i| {
            let mut seen = 0u16;
            for j in neighbours26(dims, i) {
                if !suture[j] && plates[j] != 0 {
                    seen |= 1 << plates[j];
                }
            }
            seen.count_ones() < 2
        })
        .collect();
    for i in revert {
        suture[i] = false;
    }
    for i in 0..n {
        if suture[i] {
            labels[i] = SUTURE;
            tissue[i] = Tissue::Suture as u8;
        }
    }

    let hist = {
        let mut h = [0usize; 9];
        for &c in &labels {
            h[c as usize] += 1;
        }
        h
    };
    if let Some(code) = (1..9).find(|&c| hist[c] == 0) {
        return Err(Error::Generation(format!(
            "label {code} is empty; sutures of {width:.2} mm consume the plate"
        )));
    }

    let age_frac = spec.age_fraction();
    let ct: Vec<f32> = tissue
        .iter()
        .map(|&t| Tissue::from_code(t).ct_intensity(age_frac))
        .collect();

    // MRI: tissue classes re-posed through the MRI misregistration, then
    // bias field and multiplicative noise. The bed is not visible.
    let tissue_map = LabelMap::new(
        tissue
            .iter()
            .map(|&t| if t == Tissue::Bed as u8 { 0 } else { t })
            .collect(),
        shape,
        spacing,
    )?;
    let mri_tissue = if spec.mri_misregistration > 0.0 {
        apply_transform(&tissue_map, &geo.mri_pose)
    } else {
        tissue_map
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut mri = Vec::with_capacity(n);
    for i in 0..n {
        let c = dims.coords(i);
        let q = [0, 1, 2].map(|a| voxel_to_mm(c[a], shape[a], spacing[a]) / half);
        let base = Tissue::from_code(mri_tissue.data()[i]).mri_intensity() as f64;
        let bias = geo.bias_field(q, spec.bias_amplitude);
        let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        mri.push((base * bias * (1.0 + eps)).max(0.0) as f32);
    }

    let record = SubjectRecord {
        subject_id: subject_id.to_string(),
        age_days: spec.age_days,
        sex: spec.sex,
        mri: Volume::new(mri, shape, spacing, Modality::Mri)?,
        ct: Volume::new(ct, shape, spacing, Modality::Ct)?,
        bones_sutures: LabelMap::new(labels, shape, spacing)?,
    };
    Ok(GeneratedSubject {
        record,
        tissue,
        suture_width_mm: width,
        fontanelle_open,
        fontanelle_mask,
        mri_pose: geo.mri_pose,
    })
}

/// Indices of the 26-neighbourhood of voxel `i` inside the grid.
pub fn neighbours26(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let c = dims.coords(i);
    let s = dims.0;
    (0..27).filter(|&k| k != 13).filter_map(move |k| {
        let off = [k / 9, (k / 3) % 3, k % 3];
        let mut q = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + off[a] as isize - 1;
            if v < 0 || v >= s[a] as isize {
                return None;
            }
            q[a] = v as usize;
        }
        Some(dims.index(q[0], q[1], q[2]))
    })
}

/// Metadata stored next to each generated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub subject_id: String,
    pub age_days: u32,
    pub sex: Sex,
    pub spec: PhantomSpec,
}

/// Cohort plan: uniform ages over the supported range, sexes balanced to
/// within one, per-subject seeds drawn from the cohort seed.
pub fn plan_cohort(n: usize, seed: u64, grid: [usize; 3]) -> Result<Vec<CohortEntry>> {
    if n < 4 {
        return Err(Error::Argument(format!("cohort needs at least 4 subjects, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sexes: Vec<Sex> = (0..n).map(|i| if i < n.div_ceil(2) { Sex::M } else { Sex::F }).collect();
    // Fisher-Yates with the cohort stream
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        sexes.swap(i, j);
    }
    Ok((0..n)
        .map(|i| {
            let age = rng.gen_range(MIN_AGE_DAYS..=MAX_AGE_DAYS);
            let subject_seed: u64 = rng.gen();
            let spec = PhantomSpec::new(subject_seed, age, sexes[i], grid);
            CohortEntry {
                subject_id: format!("sub-{i:03}"),
                age_days: age,
                sex: sexes[i],
                spec,
            }
        })
        .collect())
}

pub fn generate_cohort(n: usize, seed: u64, grid: [usize; 3]) -> Result<Vec<SubjectRecord>> {
    plan_cohort(n, seed, grid)?
        .iter()
        .map(|e| generate_subject_detailed(&e.spec, &e.subject_id).map(|g| g.record))
        .collect()
}
