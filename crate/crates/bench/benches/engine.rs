use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mtcolor_bench::{conditioning, model, rect_masks, small_config};
use mtcolor_core::attention::{masked_cross_attention, LatentGrid, ProjectionParams};
use mtcolor_core::attention::MaskMode;
use mtcolor_core::denoiser::{DenoiserConfig, ForwardOptions};
use mtcolor_core::diffusion::{gaussian, NoiseSchedule, SamplerConfig};
use mtcolor_core::mask::{build_pixel_attention_mask, build_self_mask, rle_decode, rle_encode, MaskPolicy};
use mtcolor_core::multisample::{colorize, fuse, ColorizeRequest, FuseOptions};
use mtcolor_core::rng::keyed_rng;
use mtcolor_core::train::{prepare_examples, training_loss};
use mtcolor_core::data::{generate_synthetic, SynthConfig};
use mtcolor_core::Tensor;

fn masks(c: &mut Criterion) {
    let m = rect_masks(32, 4, 1);
    c.bench_function("pixel_attention_mask_32x32_n4", |b| {
        b.iter(|| build_pixel_attention_mask(black_box(&m), 32, 32, MaskPolicy::default()).unwrap())
    });
    c.bench_function("self_mask_16x16_n4", |b| {
        let m = rect_masks(16, 4, 1);
        b.iter(|| build_self_mask(black_box(&m), 16, 16, MaskPolicy::default()).unwrap())
    });
    let one = m.get(0).clone();
    c.bench_function("rle_round_trip_32x32", |b| b.iter(|| rle_decode(&rle_encode(black_box(&one)).runs, 32, 32).unwrap()));
}

fn attention(c: &mut Criterion) {
    let mut rng = keyed_rng(2, &[]);
    let (h, w, ch) = (16, 16, 32);
    let f_x = LatentGrid::<f32>::randn(h, w, ch, &mut rng);
    let f_y = LatentGrid::<f32>::randn(h, w, ch, &mut rng);
    let params = ProjectionParams::identity(ch);
    let mask = build_pixel_attention_mask(&rect_masks(h, 4, 3), h, w, MaskPolicy::default()).unwrap();
    for mode in [MaskMode::PostSoftmax, MaskMode::PreSoftmaxRenorm] {
        c.bench_function(&format!("cross_attention_16x16x32_{mode:?}"), |b| {
            b.iter(|| masked_cross_attention(black_box(&f_x), &f_y, &mask, &params, mode).unwrap())
        });
    }
}

fn denoiser(c: &mut Criterion) {
    let mut group = c.benchmark_group("denoiser");
    group.sample_size(10);
    let sched = NoiseSchedule::default();
    for (name, cfg) in [("default", DenoiserConfig::default()), ("small", small_config())] {
        let (m, store) = model(cfg);
        let cond = conditioning(32, 3);
        let z: Tensor<f32> = gaussian(&[3, 32, 32], &mut keyed_rng(3, &[]));
        group.bench_function(format!("predict_noise_{name}"), |b| {
            b.iter(|| m.predict_noise(&store, black_box(&z), 100, &cond, &ForwardOptions::default()).unwrap())
        });
    }
    let (m, store) = model(small_config());
    let scenes = generate_synthetic(&SynthConfig { count: 4, ..Default::default() }).unwrap();
    let items: Vec<_> = scenes.into_iter().map(|s| (s.image, s.annotation)).collect();
    let data = prepare_examples(&items).unwrap();
    let batch: Vec<_> = data.iter().map(|e| (&e.x0, &e.cond)).collect();
    group.bench_function("training_loss_batch4_small", |b| {
        b.iter(|| training_loss(&m, &store, black_box(&batch), &sched, 0.5, 0, 0, false).unwrap())
    });
    let mut req = ColorizeRequest::new(conditioning(32, 3), SamplerConfig { ddim_steps: 10, ..Default::default() });
    group.bench_function("colorize_10_steps_n3_small", |b| b.iter(|| colorize(black_box(&req), &m, &store, &sched).unwrap()));
    req.parallel = true;
    group.bench_function("colorize_10_steps_n3_small_parallel", |b| b.iter(|| colorize(black_box(&req), &m, &store, &sched).unwrap()));
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let m = rect_masks(32, 4, 5);
    let mut rng = keyed_rng(6, &[]);
    let zg: Tensor<f32> = gaussian(&[3, 32, 32], &mut rng);
    let zi: Vec<Tensor<f32>> = (0..4).map(|_| gaussian(&[3, 32, 32], &mut rng)).collect();
    c.bench_function("fuse_32x32_n4", |b| b.iter(|| fuse(black_box(&zg), &zi, &m, 0.2, FuseOptions::default()).unwrap()));
}

criterion_group!(benches, masks, attention, denoiser, fusion);
criterion_main!(benches);
