use wssamnet::io::synth::{synthesize_dataset, SyntheticSpec};
use wssamnet::models::{BundleConfig, ModelBundle};
use wssamnet::training::{AffineAugmentSpec, Objective, OptimConfig, PairCase, PretrainItem, Trainer};

fn small_pairs(n: usize) -> Vec<PairCase> {
    let spec = SyntheticSpec { shape: [16; 3], n_landmarks: 4, warp_magnitude_vox: 2.0, n_cases: n, ..Default::default() };
    synthesize_dataset(&spec)
        .unwrap()
        .into_iter()
        .map(|c| PairCase {
            id: c.case_id.clone(),
            fixed_landmarks: c.fixed_landmarks.to_voxel(&c.fixed),
            moving_landmarks: c.moving_landmarks.to_voxel(&c.moving),
            fixed: c.fixed,
            moving: c.moving,
        })
        .collect()
}

fn small_bundle() -> ModelBundle {
    ModelBundle::new(BundleConfig { levels: 2, base_features: 4, seed: 3, ..Default::default() }).unwrap()
}

fn opt(epochs: usize) -> OptimConfig {
    OptimConfig { learning_rate: 1e-3, epochs, ..Default::default() }
}

fn params(b: &ModelBundle) -> Vec<Vec<f32>> {
    b.named_parameters().into_iter().map(|(_, p)| p.to_vec()).collect()
}

#[test]
fn recorded_components_recombine_to_total() {
    let pairs = small_pairs(2);
    let o = OptimConfig { seg_loss_weight: 0.7, ..opt(3) };
    let obj = Objective::default();
    let mut t = Trainer::new(small_bundle(), o, obj.clone()).unwrap();
    let rec = t.run_train(&pairs, |_| {}).unwrap();
    assert_eq!(rec.epochs.len(), 3);
    for e in &rec.epochs {
        assert!((e.recombine(&obj, 0.7) - e.total).abs() < 1e-6, "{e:?}");
    }
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let pairs = small_pairs(2);
    let run = || {
        let mut t = Trainer::new(small_bundle(), opt(3), Objective::default()).unwrap();
        t.run_train(&pairs, |_| {}).unwrap();
        params(&t.bundle)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_continues_identically() {
    let pairs = small_pairs(2);
    let items = PairCase::pretrain_items(&pairs);
    let aug = AffineAugmentSpec::translation_only(2.0);

    let mut straight = Trainer::new(small_bundle(), opt(4), Objective::default()).unwrap();
    let full = straight.run_pretrain(&items, &aug, |_| {}).unwrap();

    let mut first = Trainer::new(small_bundle(), opt(2), Objective::default()).unwrap();
    first.run_pretrain(&items, &aug, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    first.checkpoint().save(&path).unwrap();

    let ck = wssamnet::models::Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(&ck, opt(4), Objective::default()).unwrap();
    assert_eq!(resumed.epochs_completed, 2);
    let rest = resumed.run_pretrain(&items, &aug, |_| {}).unwrap();
    assert_eq!(rest.epochs, full.epochs[2..]);
    assert_eq!(params(&resumed.bundle), params(&straight.bundle));
}

#[test]
fn identity_pretraining_keeps_field_near_zero() {
    let pairs = small_pairs(1);
    let items: Vec<PretrainItem> = PairCase::pretrain_items(&pairs)[..1].to_vec();
    let aug = AffineAugmentSpec { identity_prob: 1.0, ..AffineAugmentSpec::translation_only(2.0) };
    let mut t = Trainer::new(small_bundle(), OptimConfig { learning_rate: 1e-2, ..opt(10) }, Objective::default()).unwrap();
    let rec = t.run_pretrain(&items, &aug, |_| {}).unwrap();
    assert_eq!(rec.epochs[0].smooth, 0.0);
    let out = t.bundle.forward(&items[0].volume, &items[0].volume).unwrap();
    let u = out.field.data();
    let mean_mag = u.chunks(3).map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum::<f64>() / (u.len() / 3) as f64;
    assert!(mean_mag <= 0.1, "mean |u| = {mean_mag}");
}

#[test]
fn overfitting_one_pair_descends() {
    let pairs = small_pairs(1);
    let o = OptimConfig { learning_rate: 3e-3, epochs: 200, ..Default::default() };
    let mut t = Trainer::new(ModelBundle::new(BundleConfig { levels: 2, base_features: 8, ..Default::default() }).unwrap(), o, Objective::default()).unwrap();
    let rec = t.run_train(&pairs, |_| {}).unwrap();
    let losses: Vec<f64> = rec.epochs.iter().map(|e| e.total).collect();
    let window = 10;
    let smoothed: Vec<f64> = losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    let mut best = f64::INFINITY;
    for (i, &s) in smoothed.iter().enumerate() {
        best = best.min(s);
        assert!(s <= best + 0.05 * best.abs(), "smoothed loss {s} at {i} worsened past best {best}");
    }
    assert!(smoothed.last().unwrap() < &smoothed[0], "no descent: {} -> {}", smoothed[0], smoothed.last().unwrap());
}
