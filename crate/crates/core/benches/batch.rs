use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use laddermoe::config::{DecoderConfig, EncoderConfig};
use laddermoe::decoder::make_permutation_masks;
use laddermoe::eval::predict_crops;
use laddermoe::parallel::Executor;
use laddermoe::params::GradMode;
use laddermoe::raster::GrayImage;
use laddermoe::syndata::{render_glyph, Domain};
use laddermoe::Recognizer;

fn setup() -> (Recognizer, Vec<GrayImage>) {
    let mut enc = EncoderConfig::desk();
    enc.num_experts = 8;
    enc.top_k = 2;
    let dec = DecoderConfig {
        num_categories: 60,
        ..DecoderConfig::default()
    };
    let model = Recognizer::new(enc, dec, 1).unwrap();
    let images = (0..32)
        .map(|i| render_glyph(i % 60, Domain::ALL[i % 3], 0.3, i as u64, 16).unwrap().image)
        .collect();
    (model, images)
}

fn bench(c: &mut Criterion) {
    let (model, images) = setup();
    let masks = make_permutation_masks(2, 6, 0).unwrap();
    let refs: Vec<&GrayImage> = images.iter().collect();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get().max(2));
    let executors = [("sequential", Executor::sequential()), ("parallel", Executor::new(workers))];

    let mut g = c.benchmark_group("batch_gradients_32");
    g.sample_size(10);
    for (name, exec) in &executors {
        g.bench_with_input(BenchmarkId::from_parameter(name), exec, |b, exec| {
            b.iter(|| {
                let grads = exec.map(&images, |img| {
                    model.sample_grad(GradMode::Adapters, img, &[7], &masks).unwrap().loss
                });
                black_box(grads)
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("batch_inference_32");
    g.sample_size(10);
    for (name, exec) in &executors {
        g.bench_with_input(BenchmarkId::from_parameter(name), exec, |b, exec| {
            b.iter(|| black_box(predict_crops(&model, &refs, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
