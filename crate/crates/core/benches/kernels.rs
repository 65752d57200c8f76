//! Single-thread pool against the default rayon pool on the hot kernels.
//! Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wssamnet::losses::RegistrationLoss;
use wssamnet::models::{BundleConfig, ModelBundle};
use wssamnet::nn::{Conv3d, Tensor};
use wssamnet::{DisplacementField, Volume};

const SHAPE: [usize; 3] = [32, 32, 32];

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = default.current_num_threads();
    vec![
        ("threads=1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (format!("threads={n}"), default),
    ]
}

fn volume(rng: &mut ChaCha8Rng) -> Volume {
    Volume::from_data(SHAPE, (0..SHAPE.iter().product()).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fixed = volume(&mut rng);
    let moving = volume(&mut rng);
    let n: usize = SHAPE.iter().product();
    let field = DisplacementField::new(SHAPE, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let conv = Conv3d::new(8, 8, 3, 1, &mut rng);
    let x = Tensor { shape: SHAPE, channels: 8, data: (0..8 * n).map(|_| rng.random::<f32>()).collect() };
    let loss = RegistrationLoss::default();
    let bundle = ModelBundle::new(BundleConfig::default()).unwrap();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("conv3d_8x8_forward", &name), &pool, |b, p| {
            b.iter(|| p.install(|| conv.forward(&x)))
        });
        g.bench_with_input(BenchmarkId::new("registration_loss_grad", &name), &pool, |b, p| {
            b.iter(|| p.install(|| loss.evaluate_with_grad(&fixed, &moving, &field).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("bundle_forward", &name), &pool, |b, p| {
            b.iter(|| p.install(|| bundle.forward(&fixed, &moving).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
