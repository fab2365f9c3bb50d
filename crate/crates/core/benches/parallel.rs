use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fforge::dataset::{synth_scene, SynthConfig};
use fforge::evaluation::match_polygons;
use fforge::labeling::build_label;
use fforge::nn::layers::{conv2d_forward, ConvSpec};
use fforge::nn::{segmentation_loss, Mode, Tensor4, UNet, UNetConfig};
use fforge::parallel::map_slice;
use fforge::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn conv_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor4::<f32>::from_vec(8, 8, 64, 64, (0..8 * 8 * 64 * 64).map(|_| rng.gen()).collect()).unwrap();
    let spec = ConvSpec { cin: 8, cout: 16, k: 3 };
    let w: Vec<f32> = (0..spec.weight_len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let b = vec![0.0f32; 16];
    let mut g = c.benchmark_group("conv3x3_batch8_64px");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bench, &e| {
            bench.iter(|| conv2d_forward(&x, spec, &w, &b, e).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = UNetConfig { in_channels: 8, depth: 2, base_channels: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (net, params) = UNet::init::<f32, _>(cfg, &mut rng).unwrap();
    let x = Tensor4::<f32>::from_vec(4, 8, 64, 64, (0..4 * 8 * 64 * 64).map(|_| rng.gen()).collect()).unwrap();
    let y = Tensor4::<f32>::from_vec(4, 1, 64, 64, (0..4 * 64 * 64).map(|_| rng.gen()).collect()).unwrap();
    let mut g = c.benchmark_group("unet_step_batch4_64px");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bench, &e| {
            bench.iter(|| {
                let (z, cache) = net.forward(&params, &x, Mode::Train, e).unwrap();
                let loss = segmentation_loss(&z, &y).unwrap();
                net.backward(&params, cache.unwrap(), &loss.dlogits, false, e).unwrap()
            })
        });
    }
    g.finish();
}

fn per_image(c: &mut Criterion) {
    let cfg = SynthConfig { size: 160, ..SynthConfig::default() };
    let scenes: Vec<_> = (0..8).map(|i| synth_scene(&cfg, i).unwrap()).collect();
    let mut g = c.benchmark_group("per_image_8x160px");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("labels", name), &exec, |bench, &e| {
            bench.iter(|| map_slice(e, &scenes, |s| build_label(&s.buildings, 160, 160, 3.0).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("matching", name), &exec, |bench, &e| {
            bench.iter(|| {
                map_slice(e, &scenes, |s| {
                    let shifted: Vec<_> = s.buildings.iter().map(|p| p.translate(1.0, 0.0)).collect();
                    match_polygons(&shifted, &s.buildings, 160, 160, 0.5).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv_batch, train_step, per_image);
criterion_main!(benches);
