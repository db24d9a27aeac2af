use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pfod::benchmark::SynthCount;
use pfod::dataset::generate_images;
use pfod::detector::{assign_targets, forward_features, FeatureMap, GridModel};
use pfod::metrics::average_precision;
use pfod::training::{image_loss_grad, Domain, LossContext, LossMode};
use pfod::{iou, nms, BBox, LabelSet, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| ScoredBox {
            bbox: BBox::new(
                rng.random_range(0.0..240.0),
                rng.random_range(0.0..240.0),
                rng.random_range(8.0..40.0),
                rng.random_range(8.0..40.0),
            ),
            score: rng.random(),
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let boxes = random_boxes(&mut rng, 256);
    c.bench_function("iou_256x256", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for x in &boxes {
                for y in &boxes {
                    acc += iou(&x.bbox, &y.bbox);
                }
            }
            black_box(acc)
        })
    });
    c.bench_function("nms_256", |b| b.iter(|| nms(black_box(&boxes), 0.2)));
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth: Vec<Vec<BBox>> = (0..25)
        .map(|_| random_boxes(&mut rng, 20).into_iter().map(|s| s.bbox).collect())
        .collect();
    let preds: Vec<Vec<ScoredBox>> = truth
        .iter()
        .map(|gt| {
            let mut p = random_boxes(&mut rng, 30);
            for (s, g) in p.iter_mut().zip(gt) {
                s.bbox = BBox::new(g.x + 1.0, g.y - 1.0, g.w, g.h);
            }
            p
        })
        .collect();
    c.bench_function("ap_25_images", |b| {
        b.iter(|| average_precision(black_box(&preds), black_box(&truth), 0.5).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let bench = SynthCount::default();
    let rec = generate_images(&bench.scene, 1, "bench", true).unwrap().remove(0);
    let cfg = &bench.training;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = GridModel::initialized(
        cfg.model.stride,
        cfg.model.receptive_field,
        1,
        (23.0, 23.0),
        cfg.model.hidden,
        &mut rng,
    )
    .unwrap();
    c.bench_function("features_256", |b| b.iter(|| FeatureMap::compute(black_box(&rec.image), &model)));
    let features = FeatureMap::compute(&rec.image, &model);
    c.bench_function("forward_256", |b| b.iter(|| forward_features(black_box(&features), &model)));
    let labels = LabelSet::seeds(rec.image_id.clone(), rec.boxes.iter().copied().take(5));
    let assignment = assign_targets(&labels, rec.image.width, rec.image.height, &model);
    let ctx = LossContext {
        mode: LossMode::Gated { horizon: 200 },
        domain: Domain::Target,
        t: 1,
        noobj_weight: cfg.noobj_weight,
        coord_weight: cfg.coord_weight,
    };
    c.bench_function("loss_grad_256", |b| {
        b.iter_batched_ref(
            || vec![0.0; model.num_weights()],
            |g| image_loss_grad(&features, &assignment, &model, &ctx, g),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, geometry, metrics, detector);
criterion_main!(benches);
