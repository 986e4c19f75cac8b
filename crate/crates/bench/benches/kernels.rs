use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use cranio_core::edt;
use cranio_core::metrics::{hd95, ssim};
use cranio_core::nn::{Conv3d, Tensor};
use cranio_core::phantom::{generate_subject, PhantomSpec};
use cranio_core::volume::{Dims, Sex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("conv3d");
    for (cin, cout, size) in [(8, 8, 24), (16, 16, 12)] {
        let mut layer = Conv3d::new(cin, cout, 3, 1, &mut rng);
        let n = cin * size * size * size;
        let x = Tensor::from_vec([cin, size, size, size], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let id = format!("{cin}->{cout}@{size}^3");
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| b.iter(|| layer.forward(black_box(x), false)));
        let y = layer.forward(&x, true);
        g.bench_function(BenchmarkId::new("forward+backward", &id), |b| {
            b.iter(|| {
                layer.forward(black_box(&x), true);
                layer.backward(black_box(&y), true)
            })
        });
    }
    g.finish();
}

fn distance_transform(c: &mut Criterion) {
    let dims = Dims([48; 3]);
    let mask: Vec<bool> = (0..dims.len())
        .map(|i| {
            let [z, y, x] = dims.coords(i);
            let r2 = [z, y, x].iter().map(|&v| (v as f64 - 23.5).powi(2)).sum::<f64>();
            (250.0..300.0).contains(&r2)
        })
        .collect();
    c.bench_function("edt/boundary_distance 48^3 shell", |b| {
        b.iter(|| edt::boundary_distance(black_box(&mask), dims, [4.67; 3]))
    });
}

fn metrics(c: &mut Criterion) {
    let s = generate_subject(&PhantomSpec::new(3, 300, Sex::F, [48; 3])).unwrap();
    let other = generate_subject(&PhantomSpec::new(4, 300, Sex::F, [48; 3])).unwrap();
    c.bench_function("metrics/ssim 48^3", |b| b.iter(|| ssim(black_box(&s.ct), black_box(&other.ct)).unwrap()));
    c.bench_function("metrics/hd95 suture 48^3", |b| {
        b.iter(|| hd95(black_box(&s.bones_sutures), black_box(&other.bones_sutures), 8).unwrap())
    });
}

fn phantom(c: &mut Criterion) {
    let mut g = c.benchmark_group("phantom");
    g.sample_size(10);
    for grid in [32usize, 48] {
        g.bench_with_input(BenchmarkId::from_parameter(grid), &grid, |b, &n| {
            b.iter(|| generate_subject(&PhantomSpec::new(7, 400, Sex::M, [n; 3])).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, distance_transform, metrics, phantom);
criterion_main!(benches);
