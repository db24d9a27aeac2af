use pfod::augment::AugmentConfig;
use pfod::benchmark::SynthCount;
use pfod::dataset::{subsample, SceneSpec, SubsampleSpec};
use pfod::detector::{assign_targets, FeatureMap, GridModel};
use pfod::propagation::{count_image, train_baseline, StageSchedule};
use pfod::training::{image_loss, Domain, LossContext, LossMode, TrainConfig};
use pfod::{run_propagation, BBox, Image, LabelSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> (SynthCount, pfod::benchmark::SynthData) {
    let mut b = SynthCount::default();
    b.scene = SceneSpec {
        image_size: 96,
        objects_per_image: [6, 8],
        object_size: [14.0, 18.0],
        rng_seed: 11,
        ..SceneSpec::default()
    };
    b.train_images = 4;
    b.background_images = 2;
    b.test_images = 2;
    b.training.iterations = 40;
    b.training.batch_size = 6;
    b.training.background_slots = 2;
    b.training.model.hidden = 0;
    b.schedule.stage_training = b.training.clone();
    b.schedule.final_training = b.training.clone();
    b.schedule.num_stages = 2;
    b.augment = AugmentConfig::scaled_for(96);
    let data = b.generate().unwrap();
    (b, data)
}

#[test]
fn zero_stages_is_the_baseline_with_backgrounds() {
    let (mut b, data) = tiny();
    b.schedule.num_stages = 0;
    let (seeds, _) = subsample(&data.train, &b.seed_subsample()).unwrap();
    let res = run_propagation(&seeds, &data.background, &b.schedule, &b.augment, None).unwrap();
    // the final training of an S-stage run is seeded with rng_seed + S + 1
    let cfg = TrainConfig {
        rng_seed: b.schedule.final_training.rng_seed + 1,
        ..b.schedule.final_training.clone()
    };
    let base = train_baseline(&seeds, &data.background, &cfg, &b.augment).unwrap();
    assert_eq!(res.final_model.checksum(), base.model.checksum());
    assert_eq!(res.logs.len(), 1);
    assert_eq!(res.final_gated_cells, 0);
    for (l, (_, s)) in res.final_labels.iter().zip(&seeds) {
        assert_eq!(l.boxes, s.boxes);
    }
}

#[test]
fn unreachable_merge_score_keeps_seed_labels() {
    let (mut b, data) = tiny();
    b.schedule.merge_score = 1.0;
    let (seeds, _) = subsample(&data.train, &b.seed_subsample()).unwrap();
    let res = run_propagation(&seeds, &data.background, &b.schedule, &b.augment, None).unwrap();
    for (l, (_, s)) in res.final_labels.iter().zip(&seeds) {
        assert_eq!(l.boxes, s.boxes);
    }
    let sizes: Vec<usize> = res.logs.iter().map(|l| l.total_expanded()).collect();
    assert!(sizes.windows(2).all(|w| w[0] == w[1]), "{sizes:?}");
}

#[test]
fn runs_without_ground_truth() {
    let (b, data) = tiny();
    let (mut seeds, _) = subsample(&data.train, &b.seed_subsample()).unwrap();
    let with_gt = run_propagation(&seeds, &data.background, &b.schedule, &b.augment, None).unwrap();
    for (r, _) in &mut seeds {
        r.boxes.clear();
    }
    let blind = run_propagation(&seeds, &data.background, &b.schedule, &b.augment, None).unwrap();
    assert!(blind.logs.iter().all(|l| !l.has_ground_truth));
    assert_eq!(with_gt.final_model.checksum(), blind.final_model.checksum());
    assert_eq!(with_gt.final_labels, blind.final_labels);
}

#[test]
fn no_seed_boxes_is_an_error() {
    let (b, data) = tiny();
    let empty: Vec<_> = data
        .train
        .iter()
        .map(|r| (r.clone(), LabelSet::seeds(r.image_id.clone(), [])))
        .collect();
    assert!(matches!(
        run_propagation(&empty, &data.background, &StageSchedule::default(), &b.augment, None),
        Err(pfod::Error::NoSeedBoxes)
    ));
}

#[test]
fn threshold_one_counts_nothing() {
    let (b, data) = tiny();
    let (full, _) = subsample(&data.train, &SubsampleSpec::full()).unwrap();
    let model = train_baseline(&full, &[], &b.training, &b.augment).unwrap().model;
    for r in &data.test {
        assert_eq!(count_image(&r.image, &model, 1.0, 0.2).0, 0);
    }
}

#[test]
fn positive_loss_ignores_far_unlabeled_objects() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = GridModel::initialized(16, 32, 1, (16.0, 16.0), 4, &mut rng).unwrap();
    let mut img = Image::filled(128, 128, 1, 0.3);
    for y in 0..128 {
        for x in 0..128 {
            img.set(x, y, 0, 0.3 + 0.01 * ((x * 7 + y * 3) % 5) as f64);
        }
    }
    let object = BBox::new(12.0, 12.0, 16.0, 16.0);
    let paint = |img: &mut Image, b: &BBox| {
        for y in b.y as usize..b.bottom() as usize {
            for x in b.x as usize..b.right() as usize {
                img.set(x, y, 0, 0.8);
            }
        }
    };
    paint(&mut img, &object);
    let labels = LabelSet::seeds("a", [object]);
    let assignment = assign_targets(&labels, 128, 128, &model);
    let ctx = LossContext {
        mode: LossMode::Gated { horizon: 200 },
        domain: Domain::Target,
        t: 201,
        noobj_weight: 0.5,
        coord_weight: 5.0,
    };
    let before = image_loss(&FeatureMap::compute(&img, &model), &assignment, &model, &ctx);
    let mut busy = img.clone();
    for b in [BBox::new(80.0, 80.0, 16.0, 16.0), BBox::new(100.0, 40.0, 14.0, 18.0)] {
        paint(&mut busy, &b);
    }
    let after = image_loss(&FeatureMap::compute(&busy, &model), &assignment, &model, &ctx);
    assert_eq!(before, after);
    assert!(before.objectiveness_positive > 0.0);
}
