use criterion::{criterion_group, criterion_main, Criterion};
use pccforge::cref::{CrefConfig, CrefModel};
use pccforge::diffusion::{gaussian_points, DcgConfig, DcgModel};
use pccforge::PointCloud;
use pccforge_bench::shape_pair;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn refiner(c: &mut Criterion) {
    let (truth, partial) = shape_pair(2048, 1024);
    // Stand-in for generator output: every other truth point, jittered.
    let noise = gaussian_points(1024, &mut ChaCha8Rng::seed_from_u64(1));
    let coarse = PointCloud::new(truth.iter().step_by(2).zip(noise).map(|(p, e)| p + e * 0.02).collect()).unwrap();
    let model = CrefModel::new(CrefConfig {
        num_points: 1024,
        patch_size: 16,
        edge_k: 8,
        descriptor_widths: vec![32, 32, 64],
        angle_shared_widths: vec![64, 32],
        angle_head_widths: vec![],
        head_widths: vec![128, 64],
        partial_cap: Some(384),
        ..Default::default()
    })
    .unwrap();
    let params = model.init_params(0);
    let prep = model.prepare(&partial, &coarse).unwrap();
    let mut g = c.benchmark_group("refiner");
    g.sample_size(10);
    g.bench_function("prepare", |b| b.iter(|| model.prepare(&partial, &coarse).unwrap()));
    g.bench_function("forward", |b| b.iter(|| model.forward(&params, &prep).unwrap()));
    g.bench_function("loss_and_grad", |b| {
        let mut grads = params.zeros_like();
        b.iter(|| model.loss(&params, &prep, &truth, Some((&mut grads, 1.0))).unwrap())
    });
    g.finish();
}

fn generator(c: &mut Criterion) {
    let (_, partial) = shape_pair(2048, 1024);
    let model = DcgModel::new(DcgConfig {
        num_points: 1024,
        latent_dim: 256,
        encoder_point_widths: vec![64, 128, 256],
        encoder_head_widths: vec![],
        denoiser_widths: vec![128, 128, 128],
        ..Default::default()
    })
    .unwrap();
    let params = model.init_params(0);
    let z = model.encode(&params, &partial).unwrap();
    let xt = gaussian_points(1024, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = c.benchmark_group("generator");
    g.sample_size(10);
    g.bench_function("encode", |b| b.iter(|| model.encode(&params, &partial).unwrap()));
    g.bench_function("predict_noise", |b| b.iter(|| model.predict_noise(&params, &xt, 250, &z).unwrap()));
    g.finish();
}

criterion_group!(benches, refiner, generator);
criterion_main!(benches);
