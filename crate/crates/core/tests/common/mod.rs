#![allow(dead_code)]

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stonecrack::dataset::{Label, Site};

/// Grey stone texture, with a dark meandering line when `crack` is set.
pub fn synthetic_patch(crack: bool, size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: i32 = rng.random_range(120..180);
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        let v = (base + rng.random_range(-25..25)).clamp(0, 255) as u8;
        Rgb([v, v.saturating_sub(8), v.saturating_sub(16)])
    });
    if crack {
        let mut x = rng.random_range(size / 4..3 * size / 4) as i32;
        let thick = (size / 24).max(1) as i32;
        for y in 0..size as i32 {
            x = (x + rng.random_range(-1..=1)).clamp(thick, size as i32 - 1 - thick);
            for dx in -thick..=thick {
                img.put_pixel((x + dx) as u32, y as u32, Rgb([25, 20, 18]));
            }
        }
    }
    img
}

/// Writes `<root>/<site>/<label>/NNN.png` trees.
pub fn write_tree(root: &Path, layout: &[(Site, Label, usize)], size: u32) {
    let mut k = 0u64;
    for &(site, label, n) in layout {
        let dir = root.join(site.dir_name()).join(label.dir_name());
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            synthetic_patch(label == Label::Crack, size, k)
                .save(dir.join(format!("{i:03}.png")))
                .unwrap();
            k += 1;
        }
    }
}

/// Published per-site tally of the stone-masonry collection.
pub fn reference_layout() -> Vec<(Site, Label, usize)> {
    vec![
        (Site::Naillac, Label::Crack, 22),
        (Site::Naillac, Label::NoCrack, 14),
        (Site::StNikolaos, Label::Crack, 8),
        (Site::StNikolaos, Label::NoCrack, 16),
        (Site::Random, Label::Crack, 26),
        (Site::Random, Label::NoCrack, 12),
    ]
}
