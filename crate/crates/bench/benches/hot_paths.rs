//! Hot-path benchmarks: box IoU, footprint rasterization, farthest-point
//! sampling and one denoiser forward pass.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use layoutdiff::diffusion::{normal_matrix, Denoiser, EncodedCondition, ModelConfig};
use layoutdiff::geometry::{farthest_point_sample, iou3d, rasterize, RasterMode};
use layoutdiff::scene::{NormalizationStats, ObjectInstance, RoomType, SceneConfig};
use layoutdiff::synthdata::{generate_scene, CorpusSpec};

fn random_box(rng: &mut impl Rng) -> ObjectInstance {
    ObjectInstance {
        category: 0,
        location: [rng.gen_range(-2.0..2.0), 0.5, rng.gen_range(-2.0..2.0)],
        size: [
            rng.gen_range(0.3..1.8),
            rng.gen_range(0.3..1.8),
            rng.gen_range(0.3..1.8),
        ],
        yaw: rng.gen_range(-3.14..3.14),
    }
}

fn bench_iou3d(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let pairs: Vec<(ObjectInstance, ObjectInstance)> =
        (0..64).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
    c.bench_function("iou3d_64_pairs", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for (x, y) in &pairs {
                acc += iou3d(black_box(x), black_box(y)).unwrap();
            }
            acc
        })
    });
}

fn bench_rasterize(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let obj = random_box(&mut rng);
    c.bench_function("rasterize_hard", |b| {
        b.iter(|| rasterize(black_box(&obj), 6.2, RasterMode::Hard).unwrap())
    });
    c.bench_function("rasterize_soft", |b| {
        b.iter(|| rasterize(black_box(&obj), 6.2, RasterMode::Soft(0.0121)).unwrap())
    });
}

fn bench_fps(c: &mut Criterion) {
    let cfg = SceneConfig::desk_scale(RoomType::Bedroom);
    let spec = CorpusSpec::desk_scale(cfg, 1, 3);
    let cs = generate_scene(&spec, 3).unwrap();
    let mask = cs.cond.floor.hadamard(&cs.cond.free_space);
    c.bench_function("farthest_point_sample_1000", |b| {
        b.iter(|| farthest_point_sample(black_box(&mask), 1000).unwrap())
    });
}

fn bench_denoiser(c: &mut Criterion) {
    let cfg = SceneConfig::desk_scale(RoomType::Bedroom);
    let spec = CorpusSpec::desk_scale(cfg.clone(), 1, 4);
    let cs = generate_scene(&spec, 4).unwrap();
    let norm = NormalizationStats::from_scenes(std::iter::once(&cs.scene), &cfg);
    let model_cfg = ModelConfig::desk_scale(&cfg);
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let model = Denoiser::init(model_cfg.clone(), &mut rng);
    let enc =
        EncodedCondition::from_condition(&cs.cond, &norm, &cfg, model_cfg.layout_point_count)
            .unwrap();
    let cache = model.precompute_condition(&enc).unwrap();
    let xt = normal_matrix(&mut rng, cfg.capacity, cfg.feature_dim());
    c.bench_function("denoiser_forward", |b| {
        b.iter(|| model.denoise_cached(black_box(&xt), 100, &cache).unwrap())
    });
}

criterion_group!(benches, bench_iou3d, bench_rasterize, bench_fps, bench_denoiser);
criterion_main!(benches);
