use cranio_core::phantom::{generate_subject, generate_subject_detailed, PhantomSpec, Tissue};
use cranio_core::preprocess::{
    apply_transform, correct_bias, register, remove_bed, RegistrationMode, SimilarityMetric, SimilarityTransform,
};
use cranio_core::volume::{Sex, Volume};

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

fn spec(seed: u64, grid: usize) -> PhantomSpec {
    PhantomSpec::new(seed, 200, Sex::F, [grid; 3])
}

#[test]
fn bed_removal_on_phantom_removes_exactly_the_bed() {
    // older subjects have the densest bone, which is where a bright-voxel
    // rule picks the bed
    let cases = [(3, 48, 200), (1, 48, 729), (4, 32, 60), (9, 40, 400), (12, 48, 665), (5, 48, 495), (7, 32, 700)];
    for (seed, grid, age) in cases {
        let mut sp = spec(seed, grid);
        sp.age_days = age;
        let g = generate_subject_detailed(&sp, "s").unwrap();
        let out = remove_bed(&g.record.ct).unwrap();
        let mut bed = 0;
        for (i, (&a, &b)) in g.record.ct.data().iter().zip(out.data()).enumerate() {
            if g.tissue[i] == Tissue::Bed as u8 {
                bed += 1;
                assert_eq!(b, 0.0, "seed {seed}: bed voxel {i} kept");
            } else {
                assert_eq!(a, b, "seed {seed}: head voxel {i} changed");
            }
        }
        assert!(bed > 0);
    }
}

#[test]
fn bias_correction_restores_a_degree_two_field() {
    let mut sp = spec(5, 48);
    sp.noise_sigma = 0.0;
    sp.bias_amplitude = 0.0;
    let clean = generate_subject(&sp).unwrap().mri;
    let dims = clean.dims();
    let shape = clean.shape();
    let biased: Vec<f32> = (0..clean.len())
        .map(|i| {
            let c = dims.coords(i);
            let q = [0, 1, 2].map(|a| (c[a] as f64 + 0.5) / shape[a] as f64 * 2.0 - 1.0);
            let f = 1.0 + 0.25 * q[0] - 0.2 * q[1] * q[2] + 0.15 * q[2] * q[2];
            (clean.data()[i] as f64 * f) as f32
        })
        .collect();
    let biased = clean.with_data(biased).unwrap();
    let r_before = pearson(biased.data(), clean.data());
    let fixed = correct_bias(&biased, 3).unwrap();
    let r_after = pearson(fixed.data(), clean.data());
    assert!(r_after >= 0.99, "r before {r_before:.4}, after {r_after:.4}");
}

fn shifted(v: &Volume, t: SimilarityTransform) -> Volume {
    apply_transform(v, &t)
}

#[test]
fn registration_recovers_translation_and_scale_on_phantoms() {
    let s = generate_subject(&spec(11, 48)).unwrap();
    let fixed = remove_bed(&s.ct).unwrap();
    let sp = fixed.spacing_mm()[0];
    let t = [2.0 * sp, -3.0 * sp, 1.5 * sp];
    let moving = shifted(&fixed, SimilarityTransform::translation(t));
    let r = register(&moving, &fixed, RegistrationMode::Rigid6, SimilarityMetric::Mse).unwrap();
    for a in 0..3 {
        assert!((r.transform.translation_mm[a] + t[a]).abs() < 0.5 * sp, "{:?}", r.transform);
    }
    let scaled = shifted(
        &fixed,
        SimilarityTransform {
            scale: [1.1; 3],
            ..SimilarityTransform::identity()
        },
    );
    let r = register(&scaled, &fixed, RegistrationMode::Similarity9, SimilarityMetric::Mse).unwrap();
    for a in 0..3 {
        assert!((r.transform.scale[a] - 1.0 / 1.1).abs() < 0.02, "{:?}", r.transform);
    }
}

#[test]
fn mri_to_ct_with_mutual_information() {
    let s = generate_subject(&spec(21, 48)).unwrap();
    let sp = s.ct.spacing_mm()[0];
    let t = [0.0, 2.0 * sp, -2.0 * sp];
    let moving = shifted(&s.mri, SimilarityTransform::translation(t));
    let r = register(&moving, &remove_bed(&s.ct).unwrap(), RegistrationMode::Rigid6, SimilarityMetric::MutualInformation)
        .unwrap();
    for a in 0..3 {
        assert!((r.transform.translation_mm[a] + t[a]).abs() < 0.75 * sp, "{:?}", r.transform);
    }
}

#[test]
fn bias_correction_helps_on_noisy_phantom_mri() {
    let sp = spec(8, 48);
    let biased = generate_subject(&sp).unwrap().mri;
    let flat = generate_subject(&PhantomSpec { bias_amplitude: 0.0, ..sp }).unwrap().mri;
    let r_before = pearson(biased.data(), flat.data());
    let r_after = pearson(correct_bias(&biased, 3).unwrap().data(), flat.data());
    assert!(r_after > r_before, "r before {r_before:.4}, after {r_after:.4}");
}
