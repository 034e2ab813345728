use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lmbench_core::augment::{apply, rng_for};
use lmbench_core::eval::{mre, sdr};
use lmbench_core::heatmap::{decode, encode};
use lmbench_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut ChaCha8Rng, k: usize, space: ImageSpace) -> LandmarkSet {
    let (w, h) = (space.width() as f64, space.height() as f64);
    let pts = (0..k)
        .map(|_| Landmark::new(rng.random_range(0.0..w - 1.0), rng.random_range(0.0..h - 1.0)))
        .collect();
    LandmarkSet::new(pts, space).unwrap()
}

fn heatmaps(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("heatmap");
    for (k, side) in [(6, 512u32), (19, 512), (37, 512)] {
        let space = ImageSpace::new(side, side).unwrap();
        let lms = random_set(&mut rng, k, space);
        group.bench_with_input(BenchmarkId::new("encode", k), &lms, |b, lms| {
            b.iter(|| encode(black_box(lms), space, 5.0).unwrap())
        });
        let stack = encode(&lms, space, 5.0).unwrap();
        group.bench_with_input(BenchmarkId::new("decode_subpixel", k), &stack, |b, s| {
            b.iter(|| decode(black_box(s), DecodeMode::Subpixel).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let space = ImageSpace::new(512, 512).unwrap();
    let truth: Vec<LandmarkSet> = (0..300).map(|_| random_set(&mut rng, 37, space)).collect();
    let pred: Vec<LandmarkSet> = (0..300).map(|_| random_set(&mut rng, 37, space)).collect();
    c.bench_function("metrics/mre_sdr_hand_300x37", |b| {
        b.iter(|| {
            let m = mre(black_box(&pred), &truth, &SpacingModel::HAND).unwrap();
            let s = sdr(&pred, &truth, &SpacingModel::HAND, &[2.0, 4.0, 10.0]).unwrap();
            (m, s)
        })
    });
}

fn augmentation(c: &mut Criterion) {
    let space = ImageSpace::new(512, 512).unwrap();
    let image = Raster::filled(space, 0.5);
    let lms = random_set(&mut ChaCha8Rng::seed_from_u64(3), 37, space);
    let policy = AugmentPolicy::default();
    let mut epoch = 0;
    c.bench_function("augment/apply_512", |b| {
        b.iter(|| {
            epoch += 1;
            let mut rng = rng_for(0, "bench", epoch);
            apply(black_box(&image), &lms, &policy, &mut rng).unwrap()
        })
    });
}

fn forward(c: &mut Criterion) {
    let space = ImageSpace::new(128, 128).unwrap();
    let image = Raster::filled(space, 0.5);
    let mut group = c.benchmark_group("forward_128_div16");
    group.sample_size(10);
    for arch in Architecture::ALL {
        let spec = ModelSpec::new(arch, EncoderKind::ResNeXt101, 4)
            .with_pretrained(Pretrained::None)
            .with_width_divisor(16);
        let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
        group.bench_function(arch.name(), |b| b.iter(|| net.predict_heatmaps(black_box(&image)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, heatmaps, metrics, augmentation, forward);
criterion_main!(benches);
