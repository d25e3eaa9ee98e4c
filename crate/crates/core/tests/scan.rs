mod common;

use image::RgbImage;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stonecrack::cam::{self, CamOptions, CamTarget};
use stonecrack::error::Error;
use stonecrack::model::{BuildOptions, ClassifierModel, Regime};
use stonecrack::scan::*;
use stonecrack::zoo::{Backbone, ZooOptions};

const WIN: usize = 48;

fn model() -> ClassifierModel<f64> {
    let mut opts = BuildOptions::new(Regime::Scratch);
    opts.seed = 2;
    opts.zoo = ZooOptions { width: 0.25, input_size: WIN };
    ClassifierModel::build(Backbone::MobileNetV3Small, &opts).unwrap()
}

fn opts(step: usize, batch: usize) -> ScanOptions {
    ScanOptions {
        window: WIN,
        step,
        batch_size: batch,
        ..ScanOptions::default()
    }
}

fn scene(w: u32, h: u32) -> RgbImage {
    let big = common::synthetic_patch(true, w.max(h), 11);
    image::imageops::crop_imm(&big, 0, 0, w, h).to_image()
}

fn rel_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

#[test]
fn single_window_image_equals_the_patch_cam() {
    let m = model();
    let img = scene(WIN as u32, WIN as u32);
    let r = scan_image(&m, &img, &opts(16, 32)).unwrap();
    assert_eq!(r.per_window.len(), 1);
    assert!(r.grid.coverage.iter().all(|&c| c == 1));
    let forced = CamOptions { target: CamTarget::AlwaysCrack, ..CamOptions::default() };
    let (_, map) = cam::localize(&m, &img, forced).unwrap();
    assert!(rel_close(&r.fused, &map.full, 1e-12));
}

#[test]
fn disjoint_windows_keep_their_own_maps() {
    let m = model();
    let img = scene(2 * WIN as u32, WIN as u32);
    let r = scan_image(&m, &img, &opts(WIN, 32)).unwrap();
    assert_eq!(r.per_window.len(), 2);
    let forced = CamOptions { target: CamTarget::AlwaysCrack, ..CamOptions::default() };
    for (k, x0) in [0usize, WIN].into_iter().enumerate() {
        let crop = image::imageops::crop_imm(&img, x0 as u32, 0, WIN as u32, WIN as u32).to_image();
        let (_, map) = cam::localize(&m, &crop, forced).unwrap();
        let part = r.fused.slice(s![.., x0..x0 + WIN]).to_owned();
        assert!(rel_close(&part, &map.full, 1e-12), "window {k}");
    }
}

#[test]
fn window_order_and_batching_do_not_change_the_fused_field() {
    let m = model();
    let img = scene(100, 70);
    let o = opts(16, 32);
    let positions = enumerate_windows(100, 70, WIN, 16).unwrap();
    let base = scan_windows(&m, &img, &positions, &o).unwrap();
    let mut shuffled = positions.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let perm = scan_windows(&m, &img, &shuffled, &o).unwrap();
    assert!(rel_close(&base.fused, &perm.fused, 1e-6));
    let single = scan_windows(&m, &img, &positions, &opts(16, 1)).unwrap();
    assert!(rel_close(&base.fused, &single.fused, 1e-6));
    assert_eq!(base.grid.coverage, perm.grid.coverage);
    assert_eq!(base.per_window.len(), positions.len());
}

#[test]
fn coverage_is_conserved_and_complete() {
    let m = model();
    let img = scene(101, 67);
    let r = scan_image(&m, &img, &opts(20, 8)).unwrap();
    let total: usize = r.grid.coverage.iter().map(|&c| c as usize).sum();
    assert_eq!(total, r.per_window.len() * WIN * WIN);
    assert!(r.grid.coverage.iter().all(|&c| c >= 1));
    assert!(r.fused.iter().all(|v| v.is_finite()));
    assert_eq!(r.overlay.dimensions(), (101, 67));
}

#[test]
fn merged_partial_grids_equal_one_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pos = enumerate_windows(40, 30, 12, 5).unwrap();
    let maps: Vec<Array2<f64>> = pos
        .iter()
        .map(|_| Array2::from_shape_simple_fn((12, 12), || rng.random_range(-1.0..1.0)))
        .collect();
    for fusion in [Fusion::Mean, Fusion::Max] {
        let mut whole = ScanGrid::new(30, 40, 12, 5, fusion);
        let mut a = ScanGrid::new(30, 40, 12, 5, fusion);
        let mut b = ScanGrid::new(30, 40, 12, 5, fusion);
        for (i, (&(x, y), m)) in pos.iter().zip(&maps).enumerate() {
            whole.add(x, y, m.view()).unwrap();
            if i % 2 == 0 { &mut a } else { &mut b }.add(x, y, m.view()).unwrap();
        }
        a.merge(&b).unwrap();
        assert!(rel_close(&whole.fused(), &a.fused(), 1e-12));
    }
}

#[test]
fn mean_fusion_stays_within_contributing_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pos = enumerate_windows(30, 30, 10, 4).unwrap();
    let mut grid = ScanGrid::new(30, 30, 10, 4, Fusion::Mean);
    let mut lo = Array2::from_elem((30, 30), f64::INFINITY);
    let mut hi = Array2::from_elem((30, 30), f64::NEG_INFINITY);
    for &(x, y) in &pos {
        let m = Array2::from_shape_simple_fn((10, 10), || rng.random_range(-2.0..2.0));
        grid.add(x, y, m.view()).unwrap();
        lo.slice_mut(s![y..y + 10, x..x + 10]).zip_mut_with(&m, |l, &v| *l = l.min(v));
        hi.slice_mut(s![y..y + 10, x..x + 10]).zip_mut_with(&m, |h, &v| *h = h.max(v));
    }
    let fused = grid.fused();
    for ((f, l), h) in fused.iter().zip(&lo).zip(&hi) {
        assert!(*f >= l - 1e-12 && *f <= h + 1e-12);
    }
}

#[test]
fn fusion_smooths_seams_of_blocky_evidence() {
    // each window contributes a constant equal to a smooth ramp at its centre
    let (w, h, win) = (120usize, 40usize, 40usize);
    let value = |x: usize| x as f64 / w as f64;
    let jumps = |f: &Array2<f64>| {
        f.rows()
            .into_iter()
            .flat_map(|r| r.windows(2).into_iter().map(|p| (p[1] - p[0]).abs()).collect::<Vec<_>>())
            .fold(0.0f64, f64::max)
    };
    let run = |step: usize| {
        let mut g = ScanGrid::new(h, w, win, step, Fusion::Mean);
        for (x, y) in enumerate_windows(w, h, win, step).unwrap() {
            g.add(x, y, Array2::from_elem((win, win), value(x + win / 2)).view()).unwrap();
        }
        g.fused()
    };
    let blocky = run(win);
    let fused = run(8);
    assert!(jumps(&fused) < jumps(&blocky));
}

#[test]
fn scan_writes_its_outputs() {
    let m = model();
    let r = scan_image(&m, &scene(64, 50), &opts(16, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("windows.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x,y,label,prob_crack");
    assert_eq!(csv.lines().count(), r.per_window.len() + 1);
    let fused: Array2<f64> = ndarray_npy::read_npy(dir.path().join("fused.npy")).unwrap();
    assert_eq!(fused.dim(), (50, 64));
    assert!(image::open(dir.path().join("overlay.png")).is_ok());
}

#[test]
fn small_images_are_redirected_to_patch_mode() {
    let m = model();
    let err = scan_image(&m, &scene(30, 60), &opts(16, 4)).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}
