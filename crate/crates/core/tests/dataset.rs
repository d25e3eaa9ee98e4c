mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stonecrack::dataset::*;
use stonecrack::error::Error;

fn reference_tree() -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    common::write_tree(dir.path(), &common::reference_layout(), 24);
    let m = DatasetManifest::load(dir.path()).unwrap();
    (dir, m)
}

#[test]
fn reference_tree_tallies_match_the_published_table() {
    let (_dir, m) = reference_tree();
    assert_eq!(m.len(), 98);
    assert_eq!(m.label_count(Label::Crack), 56);
    assert_eq!(m.label_count(Label::NoCrack), 42);
    assert!(m.reference_mismatches().is_empty());
    assert_eq!(m.count(Site::StNikolaos, Label::NoCrack), 16);
}

#[test]
fn empty_tree_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    assert!(m.is_empty());
    assert!(m.counts.is_empty());
}

#[test]
fn singleton_tree() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tree(dir.path(), &[(Site::Naillac, Label::Crack, 1)], 16);
    let m = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(m.counts.len(), 1);
    assert_eq!(m.count(Site::Naillac, Label::Crack), 1);
    assert_eq!(m.count(Site::Random, Label::Crack), 0);
    assert_eq!(m.reference_mismatches().len(), 6);
}

#[test]
fn missing_root_is_a_config_error() {
    let err = DatasetManifest::load(std::path::Path::new("/definitely/not/here")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn undecodable_files_land_in_the_skip_report() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tree(dir.path(), &[(Site::Random, Label::NoCrack, 2)], 16);
    let bad = dir.path().join("Random/No_crack/broken.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.skipped.len(), 1);
    let report = dir.path().join("ingest_skipped.txt");
    m.write_skip_report(&report).unwrap();
    assert!(std::fs::read_to_string(report).unwrap().contains("broken.png"));
}

#[test]
fn json_manifest_overrides_the_folder_layout() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("flat")).unwrap();
    for (i, crack) in [true, false, true].into_iter().enumerate() {
        common::synthetic_patch(crack, 20, i as u64)
            .save(dir.path().join(format!("flat/{i}.png")))
            .unwrap();
    }
    let json = r#"[
        {"path": "flat/0.png", "label": "Crack", "site": "Naillac"},
        {"path": "flat/1.png", "label": "No_crack", "site": "St Nikolaos"},
        {"path": "flat/2.png", "label": "crack", "site": "random"}
    ]"#;
    std::fs::write(dir.path().join("manifest.json"), json).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.count(Site::StNikolaos, Label::NoCrack), 1);
}

#[test]
fn duplicate_paths_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    common::synthetic_patch(true, 20, 0).save(dir.path().join("a.png")).unwrap();
    let json = r#"[{"path": "a.png", "label": "Crack", "site": "Naillac"},
                   {"path": "a.png", "label": "Crack", "site": "Naillac"}]"#;
    std::fs::write(dir.path().join("manifest.json"), json).unwrap();
    assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Dataset(_))));
}

#[test]
fn patches_are_resized_on_load() {
    let (_dir, m) = reference_tree();
    let img = m.samples[0].load().unwrap();
    assert_eq!(img.dimensions(), (PATCH, PATCH));
}

fn paths(v: &[ImageSample]) -> BTreeSet<std::path::PathBuf> {
    v.iter().map(|s| s.path.clone()).collect()
}

#[test]
fn case_three_holds_out_naillac() {
    let (_dir, m) = reference_tree();
    let split = make_split(&m, CaseId::new(3).unwrap(), 11).unwrap();
    assert!(split.test.iter().all(|s| s.site == Site::Naillac));
    assert_eq!(split.counts(), [(34, 28), (22, 14)]);
    // train side published as 36/41 does not add up with the site tally
    assert_eq!(split.count_mismatches().len(), 1);
    assert!(paths(&split.train).is_disjoint(&paths(&split.test)));
}

#[test]
fn case_two_tests_only_st_nikolaos() {
    let (_dir, m) = reference_tree();
    let split = make_split(&m, CaseId::new(2).unwrap(), 0).unwrap();
    assert!(split.test.iter().all(|s| s.site == Site::StNikolaos));
    assert_eq!(split.counts()[1], (8, 16));
}

#[test]
fn site_cases_ignore_the_seed() {
    let (_dir, m) = reference_tree();
    for id in 2..=5 {
        let a = make_split(&m, CaseId::new(id).unwrap(), 1).unwrap();
        let b = make_split(&m, CaseId::new(id).unwrap(), 999).unwrap();
        assert_eq!(paths(&a.train), paths(&b.train));
        assert_eq!(paths(&a.test), paths(&b.test));
    }
}

#[test]
fn site_cases_four_and_five_mirror_each_other() {
    let (_dir, m) = reference_tree();
    let four = make_split(&m, CaseId::new(4).unwrap(), 0).unwrap();
    let five = make_split(&m, CaseId::new(5).unwrap(), 0).unwrap();
    assert_eq!(four.counts(), [(30, 30), (26, 12)]);
    assert_eq!(paths(&four.train), paths(&five.test));
    assert!(four.count_mismatches().is_empty());
}

#[test]
fn random_cases_report_the_nocrack_deficit() {
    let (_dir, m) = reference_tree();
    match make_split(&m, CaseId::new(0).unwrap(), 0) {
        Err(Error::InsufficientSamples { case_id: 0, deficit }) => {
            assert!(deficit.contains("need 55, have 42"), "{deficit}");
        }
        other => panic!("expected a deficit, got {other:?}"),
    }
}

#[test]
fn scaled_random_draw_is_stratified_and_deterministic() {
    let (_dir, m) = reference_tree();
    let a = make_split_with(&m, CaseId::new(0).unwrap(), 5, Shortfall::Scale).unwrap();
    let b = make_split_with(&m, CaseId::new(0).unwrap(), 5, Shortfall::Scale).unwrap();
    assert_eq!(paths(&a.train), paths(&b.train));
    assert_eq!(paths(&a.test), paths(&b.test));
    // crack side is drawn exactly; nocrack shrinks 35:20 over 42 samples
    assert_eq!(a.counts(), [(35, 27), (21, 15)]);
    let c = make_split_with(&m, CaseId::new(0).unwrap(), 6, Shortfall::Scale).unwrap();
    assert_ne!(paths(&a.test), paths(&c.test));
}

#[test]
fn exact_draw_hits_published_counts_on_a_large_pool() {
    let dir = tempfile::tempdir().unwrap();
    common::write_tree(
        dir.path(),
        &[(Site::Random, Label::Crack, 60), (Site::Random, Label::NoCrack, 60)],
        8,
    );
    let m = DatasetManifest::load(dir.path()).unwrap();
    for id in [0, 1] {
        let split = make_split(&m, CaseId::new(id).unwrap(), 3).unwrap();
        assert!(split.count_mismatches().is_empty());
        assert!(paths(&split.train).is_disjoint(&paths(&split.test)));
    }
}

#[test]
fn split_json_round_trips() {
    let (dir, m) = reference_tree();
    let split = make_split(&m, CaseId::new(5).unwrap(), 0).unwrap();
    let path = dir.path().join("split_case5.json");
    split.save(&path).unwrap();
    let back = TestCaseSplit::load(&path).unwrap();
    assert_eq!(back.train, split.train);
    assert_eq!(back.test, split.test);
}

#[test]
fn identity_policy_is_a_byte_for_byte_no_op() {
    let img = common::synthetic_patch(true, 64, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&img, &AugmentationPolicy::identity(), &mut rng), img);
}

#[test]
fn hflip_is_an_involution() {
    let img = common::synthetic_patch(true, 33, 2);
    assert_eq!(hflip(&hflip(&img)), img);
    assert_eq!(vflip(&vflip(&img)), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmentation_keeps_shape_and_is_seed_deterministic(seed in 0u64..1000, epoch in 0usize..50, idx in 0usize..100) {
        let img = common::synthetic_patch(seed % 2 == 0, 40, seed);
        let policy = AugmentationPolicy { seed, ..AugmentationPolicy::default() };
        let a = augment(&img, &policy, &mut policy.rng_for(epoch, idx));
        let b = augment(&img, &policy, &mut policy.rng_for(epoch, idx));
        prop_assert_eq!(a.dimensions(), img.dimensions());
        prop_assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn quarter_turn_mode_keeps_shape(seed in 0u64..1000) {
        let img = common::synthetic_patch(true, 32, seed);
        let policy = AugmentationPolicy {
            rotation_mode: RotationMode::QuarterTurns,
            seed,
            ..AugmentationPolicy::default()
        };
        let out = augment(&img, &policy, &mut policy.rng_for(0, 0));
        prop_assert_eq!(out.dimensions(), (32, 32));
    }
}
