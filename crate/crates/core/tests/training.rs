mod common;

use stonecrack::dataset::{make_split, AugmentationPolicy, CaseId, DatasetManifest, Label, Site};
use stonecrack::error::Error;
use stonecrack::model::{BuildOptions, ClassifierModel, Regime};
use stonecrack::nn::OptimizerKind;
use stonecrack::train::{loss_and_grads, score, train, train_on, PatchSet, TrainConfig};
use stonecrack::zoo::{Backbone, ZooOptions};

fn toy_set(n: usize, size: u32, offset: u64) -> PatchSet {
    let labels: Vec<Label> = (0..n)
        .map(|i| if i % 2 == 0 { Label::Crack } else { Label::NoCrack })
        .collect();
    PatchSet {
        images: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| common::synthetic_patch(l == Label::Crack, size, offset + i as u64))
            .collect(),
        labels,
    }
}

fn tiny<T: stonecrack::Scalar>(backbone: Backbone, regime: Regime, width: f64, size: usize) -> ClassifierModel<T> {
    let mut opts = BuildOptions::new(regime);
    opts.pretrained = false;
    opts.seed = 3;
    opts.zoo = ZooOptions { width, input_size: size };
    ClassifierModel::build(backbone, &opts).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        augmentation: AugmentationPolicy::identity(),
        ..TrainConfig::default()
    }
}

#[test]
fn scratch_model_memorizes_eight_patches() {
    let model = tiny::<f32>(Backbone::VGG16, Regime::Scratch, 0.25, 32);
    let toy = toy_set(8, 32, 100);
    let config = TrainConfig {
        lr: Some(0.01),
        batch_size: 4,
        restore_best: false,
        ..quick(50)
    };
    let (trained, record) = train_on(model, &toy, &toy_set(2, 32, 900), &config).unwrap();
    assert_eq!(record.epochs.len(), 50);
    assert_eq!(record.optimizer, OptimizerKind::Sgd);
    assert_eq!(record.final_train_acc(), 1.0);
    assert_eq!(score(&trained, &toy, 8).unwrap().1, 1.0);
}

#[test]
fn batch_norm_models_fit_the_toy_set_in_training_mode() {
    let model = tiny::<f32>(Backbone::MobileNetV3Small, Regime::Scratch, 0.25, 32);
    let (_, record) = train_on(model, &toy_set(8, 32, 100), &toy_set(2, 32, 900), &quick(50)).unwrap();
    assert_eq!(record.optimizer, OptimizerKind::Adam);
    assert_eq!(record.final_train_acc(), 1.0);
}

#[test]
fn transfer_leaves_backbone_bit_identical() {
    let model = tiny::<f32>(Backbone::ResNet50V2, Regime::Transfer, 0.0625, 32);
    let before = model.backbone.params.checksum();
    let head_before = model.head.params.checksum();
    let (trained, _) = train_on(model, &toy_set(8, 32, 0), &toy_set(2, 32, 50), &quick(4)).unwrap();
    assert_eq!(trained.backbone.params.checksum(), before);
    assert_ne!(trained.head.params.checksum(), head_before);
}

#[test]
fn vgg_uses_plain_sgd() {
    let model = tiny::<f32>(Backbone::VGG19, Regime::Scratch, 0.0625, 32);
    let (_, record) = train_on(model, &toy_set(4, 32, 0), &toy_set(2, 32, 10), &quick(1)).unwrap();
    assert_eq!(record.optimizer, OptimizerKind::Sgd);
}

#[test]
fn lr_is_non_increasing_and_floored() {
    let model = tiny::<f32>(Backbone::MobileNetV3Small, Regime::Scratch, 0.25, 32);
    let config = TrainConfig {
        lr_patience: 1,
        ..quick(12)
    };
    let (_, record) = train_on(model, &toy_set(6, 32, 0), &toy_set(2, 32, 30), &config).unwrap();
    let lr0 = Backbone::MobileNetV3Small.spec().default_lr;
    for pair in record.epochs.windows(2) {
        assert!(pair[1].lr <= pair[0].lr);
    }
    assert!(record.epochs.iter().all(|e| e.lr >= lr0 / 100.0 - 1e-18));
    assert!(record.epochs.last().unwrap().lr < lr0);
}

#[test]
fn fixed_seed_reproduces_the_record() {
    let run = || {
        let model = tiny::<f32>(Backbone::MobileNetV3Small, Regime::Scratch, 0.25, 32);
        let config = TrainConfig {
            augmentation: AugmentationPolicy { seed: 9, ..AugmentationPolicy::default() },
            ..quick(3)
        };
        let (m, r) = train_on(model, &toy_set(6, 32, 0), &toy_set(2, 32, 30), &config).unwrap();
        (m.backbone.params.checksum(), r.epochs)
    };
    assert_eq!(run(), run());
}

#[test]
fn single_class_training_set_is_rejected() {
    let model = tiny::<f32>(Backbone::MobileNetV3Small, Regime::Scratch, 0.25, 32);
    let mut set = toy_set(4, 32, 0);
    set.labels = vec![Label::Crack; 4];
    let err = train_on(model, &set, &toy_set(2, 32, 9), &quick(1)).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn nan_loss_aborts_with_diagnostic() {
    let mut model = tiny::<f32>(Backbone::MobileNetV3Small, Regime::Scratch, 0.25, 32);
    let id = model.head.params.id("head/kernel").unwrap();
    model.head.params.value_mut(id).fill(f32::NAN);
    let err = train_on(model, &toy_set(4, 32, 0), &toy_set(2, 32, 9), &quick(2)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0, .. }), "{err}");
}

#[test]
fn train_reads_only_the_training_side_of_a_split() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tree(
        dir.path(),
        &[
            (Site::Naillac, Label::Crack, 4),
            (Site::Naillac, Label::NoCrack, 4),
            (Site::StNikolaos, Label::Crack, 2),
            (Site::StNikolaos, Label::NoCrack, 2),
        ],
        40,
    );
    let manifest = DatasetManifest::load(dir.path()).unwrap();
    let split = make_split(&manifest, CaseId::new(2).unwrap(), 0).unwrap();
    let model = tiny::<f32>(Backbone::MobileNetV3Small, Regime::Scratch, 0.25, 32);
    let (_, record) = train(model, &split, &quick(1)).unwrap();
    assert_eq!(record.train_samples + record.val_samples, split.train.len());
    assert_eq!(record.val_samples, 2);
}

fn check_gradients(backbone: Backbone, width: f64, size: usize) {
    let mut model = tiny::<f64>(backbone, Regime::Scratch, width, size);
    let set = toy_set(3, size as u32, 40);
    let x = model.prepare_batch(&set.images).unwrap();
    let targets: Vec<usize> = set.labels.iter().map(|&l| model.head_index(l)).collect();
    let grads = loss_and_grads(&mut model, &x, &targets).unwrap().backbone.unwrap();
    let ids: Vec<_> = model.backbone.params.iter().map(|(id, _)| id).collect();
    let stride = (ids.len() / 12).max(1);
    for &id in ids.iter().step_by(stride) {
        let Some(analytic) = grads.get(id).cloned() else {
            assert!(!model.backbone.params.is_trainable(id));
            continue;
        };
        let k = 7 % analytic.len();
        let orig = model.backbone.params.value(id).as_slice_memory_order().unwrap()[k];
        let eps = 1e-7;
        let mut at = |v: f64| {
            model.backbone.params.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = v;
            loss_and_grads(&mut model, &x, &targets).unwrap().loss
        };
        let numeric = (at(orig + eps) - at(orig - eps)) / (2.0 * eps);
        at(orig);
        let a = analytic.as_slice_memory_order().unwrap()[k];
        assert!(
            (numeric - a).abs() <= 1e-5 + 1e-3 * numeric.abs().max(a.abs()),
            "{backbone} {}[{k}]: analytic {a} numeric {numeric}",
            model.backbone.params.get(id).name
        );
    }
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    check_gradients(Backbone::VGG16, 0.0625, 32);
    check_gradients(Backbone::ResNet50V2, 0.0625, 32);
    check_gradients(Backbone::DenseNet121, 0.0625, 32);
    check_gradients(Backbone::MobileNetV3Large, 0.25, 32);
    check_gradients(Backbone::Xception, 0.0625, 71);
    check_gradients(Backbone::InceptionResNetV2, 0.0625, 75);
}
