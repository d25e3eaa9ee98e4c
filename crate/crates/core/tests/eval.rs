mod common;

use proptest::prelude::*;
use stonecrack::dataset::{ImageSample, Label, Site};
use stonecrack::eval::*;
use stonecrack::model::{BuildOptions, ClassifierModel, Regime};
use stonecrack::zoo::{Backbone, ZooOptions};

/// Direct evaluation of the textbook formulas with Crack as the positive class.
fn brute(c: [[u64; 2]; 2]) -> (f64, f64, f64, f64) {
    let (tn, fp, fn_, tp) = (c[0][0] as f64, c[0][1] as f64, c[1][0] as f64, c[1][1] as f64);
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f, (tp + tn) / (tp + tn + fp + fn_))
}

proptest! {
    #[test]
    fn metrics_match_the_formulas(c in prop::array::uniform2(prop::array::uniform2(0u64..500))) {
        prop_assume!(c[0][0] + c[0][1] + c[1][0] + c[1][1] > 0);
        let m = Metrics::from_counts(&Counts(c)).unwrap();
        let (p, r, f, acc) = brute(c);
        let crack = m.per_class[Label::Crack.index()];
        prop_assert!((crack.precision - p).abs() < 1e-9);
        if c[1][0] + c[1][1] > 0 {
            prop_assert!((crack.recall.unwrap() - r).abs() < 1e-9);
            prop_assert!((crack.f1.unwrap() - f).abs() < 1e-9);
        }
        prop_assert!((m.accuracy - acc).abs() < 1e-9);
        prop_assert!((m.micro.recall - m.accuracy).abs() < 1e-12);
        prop_assert!((m.micro.precision - m.accuracy).abs() < 1e-12);
        for v in [m.weighted.precision, m.weighted.recall, m.weighted.f1, m.macro_avg.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_sample_order(mut pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60), seed in any::<u64>()) {
        let to = |v: &[(usize, usize)]| Counts::from_pairs(v.iter().map(|&(t, p)| (Label::from_index(t), Label::from_index(p))));
        let a = Metrics::from_counts(&to(&pairs)).unwrap();
        use rand::{seq::SliceRandom, SeedableRng};
        pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, Metrics::from_counts(&to(&pairs)).unwrap());
    }

    #[test]
    fn normalized_rows_sum_to_one(c in prop::array::uniform2(prop::array::uniform2(0u64..50))) {
        let cm = ConfusionMatrix::from(Counts(c));
        for (row, counts) in cm.normalized.iter().zip(c.iter()) {
            let s: f64 = row.iter().sum();
            if counts.iter().sum::<u64>() > 0 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }
}

fn report(b: Backbone, case: u8, acc_counts: [[u64; 2]; 2]) -> EvalReport {
    let mut r = EvalReport::from_counts(b, Some(case), Counts(acc_counts)).unwrap();
    r.run = RunInfo {
        regime: "scratch".into(),
        epochs: 50,
        lr: 1e-4,
        training_seconds: 12.5 + b.index() as f64,
        seed: 0,
    };
    r
}

#[test]
fn one_report_one_row() {
    let t = render_tables(&[report(Backbone::VGG19, 3, [[14, 0], [0, 22]])]).unwrap();
    assert_eq!(t.csv.lines().count(), 2);
    assert_eq!(t.markdown.lines().count(), 3);
    assert!(t.markdown.contains("| VGG19 | 3 | scratch | 50 | 1e-4 | 1.00 | 1.00 | 1.00 | 1.00 |"));
    assert_eq!(
        t.csv.lines().next().unwrap(),
        "model,case,regime,epochs,lr,precision,recall,f1,accuracy,training_time_s"
    );
}

#[test]
fn rows_follow_registry_order_and_parse_back() {
    let mut reports: Vec<EvalReport> = Backbone::ALL
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &b)| report(b, 0, [[10 + i as u64, 3], [2, 9 + 2 * i as u64]]))
        .collect();
    reports.swap(0, 5);
    let t = render_tables(&reports).unwrap();
    let names: Vec<&str> = t.rows.iter().map(|r| r.model.as_str()).collect();
    let expected: Vec<&str> = Backbone::ALL.iter().map(|b| b.name()).collect();
    assert_eq!(names, expected);
    assert_eq!(parse_csv(&t.csv).unwrap(), t.rows);
}

#[test]
fn charts_render_and_rerender_identically() {
    let dir = tempfile::tempdir().unwrap();
    let reports: Vec<EvalReport> = [0u8, 1, 2]
        .iter()
        .flat_map(|&c| {
            [Backbone::VGG16, Backbone::Xception]
                .into_iter()
                .map(move |b| report(b, c, [[5 + c as u64, 1], [1, 6]]))
        })
        .collect();
    let files = render_comparison_charts(&reports, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    render_comparison_charts(&reports, dir.path()).unwrap();
    let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
    assert!(image::open(&files[0]).is_ok());
}

#[test]
fn confusion_json_is_written_per_model_and_case() {
    let dir = tempfile::tempdir().unwrap();
    let path = report(Backbone::ResNet50V2, 4, [[3, 1], [0, 4]]).write_confusion(dir.path()).unwrap();
    assert!(path.ends_with("confusion_ResNet50V2_4.json"));
    let cm: ConfusionMatrix = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cm.counts.0, [[3, 1], [0, 4]]);
}

#[test]
fn evaluate_counts_every_test_patch() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tree(dir.path(), &[(Site::Random, Label::Crack, 3), (Site::Random, Label::NoCrack, 2)], 24);
    let manifest = stonecrack::dataset::DatasetManifest::load(dir.path()).unwrap();
    let mut opts = BuildOptions::new(Regime::Scratch);
    opts.zoo = ZooOptions { width: 0.25, input_size: 32 };
    let m = ClassifierModel::<f32>::build(Backbone::MobileNetV3Small, &opts).unwrap();
    let test: Vec<ImageSample> = manifest.samples.clone();
    let r = evaluate(&m, &test, Some(5), 2).unwrap();
    assert_eq!(r.confusion.counts.total(), 5);
    assert_eq!(r.confusion.counts.support(Label::Crack), 3);
    assert!(evaluate(&m, &[], None, 2).is_err());
}
