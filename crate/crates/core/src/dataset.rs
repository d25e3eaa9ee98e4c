//! Site/label directory trees, the six train/test cases, and augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of a training patch.
pub const PATCH: u32 = 224;
/// Environment variable naming the dataset root.
pub const DATA_ENV: &str = "STONECRACK_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NoCrack = 0,
    Crack = 1,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::NoCrack, Label::Crack];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::NoCrack
        } else {
            Label::Crack
        }
    }

    /// Directory name in the on-disk layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::NoCrack => "No_crack",
            Label::Crack => "Crack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NoCrack => "NoCrack",
            Label::Crack => "Crack",
        })
    }
}

fn norm_key(s: &str) -> String {
    s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect()
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match norm_key(s).as_str() {
            "crack" | "cracks" | "1" => Ok(Label::Crack),
            "nocrack" | "nocracks" | "0" => Ok(Label::NoCrack),
            _ => Err(Error::Dataset(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Naillac,
    StNikolaos,
    Random,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Naillac, Site::StNikolaos, Site::Random];
    /// Sites belonging to the fortification survey, as opposed to the mixed
    /// random collection.
    pub const SURVEY: [Site; 2] = [Site::Naillac, Site::StNikolaos];

    pub fn dir_name(self) -> &'static str {
        match self {
            Site::Naillac => "Naillac",
            Site::StNikolaos => "StNikolaos",
            Site::Random => "Random",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match norm_key(s).as_str() {
            "naillac" => Ok(Site::Naillac),
            "stnikolaos" | "saintnikolaos" | "nikolaos" => Ok(Site::StNikolaos),
            "random" | "randomimages" | "internet" => Ok(Site::Random),
            _ => Err(Error::Dataset(format!("unknown site `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageSample {
    pub path: PathBuf,
    pub label: Label,
    pub site: Site,
    pub width: u32,
    pub height: u32,
}

impl ImageSample {
    /// Decodes the image, resized to `PATCH`×`PATCH` if necessary.
    pub fn load(&self) -> Result<RgbImage> {
        Ok(resize_to(&decode(&self.path)?, PATCH))
    }
}

pub fn decode(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Bilinear resize to a square of side `size`; no-op if already that size.
pub fn resize_to(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        img.clone()
    } else {
        image::imageops::resize(img, size, size, FilterType::Triangle)
    }
}

/// `[height, width, 3]`
pub fn image_to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone()).expect("rgb buffer")
}

pub fn array_to_image(a: &Array3<u8>) -> RgbImage {
    let (h, w, _) = a.dim();
    RgbImage::from_raw(w as u32, h as u32, a.as_standard_layout().iter().copied().collect()).expect("rgb buffer")
}

pub type Tally = BTreeMap<(Site, Label), usize>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ImageSample>,
    pub counts: Tally,
    /// Files that were found but could not be decoded, with the reason.
    #[serde(default)]
    pub skipped: Vec<(PathBuf, String)>,
}

/// Published per-(site, label) counts of the stone-masonry collection.
pub const REFERENCE_TALLY: [((Site, Label), usize); 6] = [
    ((Site::Naillac, Label::Crack), 22),
    ((Site::Naillac, Label::NoCrack), 14),
    ((Site::StNikolaos, Label::Crack), 8),
    ((Site::StNikolaos, Label::NoCrack), 16),
    ((Site::Random, Label::Crack), 26),
    ((Site::Random, Label::NoCrack), 12),
];

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    path: PathBuf,
    label: String,
    site: String,
}

const IMAGE_EXTS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn find_dir(parent: &Path, wanted: &str) -> Option<PathBuf> {
    let want = norm_key(wanted);
    std::fs::read_dir(parent)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| norm_key(n) == want))
}

impl DatasetManifest {
    /// Scans `<root>/<site>/<Crack|No_crack>/`, or reads `<root>/manifest.json`
    /// when present. Site and label folder names match case- and
    /// punctuation-insensitively.
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
        }
        let json = root.join("manifest.json");
        let mut candidates: Vec<(PathBuf, Label, Site)> = Vec::new();
        if json.is_file() {
            let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
            let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
            for e in entries {
                let path = if e.path.is_absolute() { e.path } else { root.join(e.path) };
                candidates.push((path, e.label.parse()?, e.site.parse()?));
            }
        } else {
            for site in Site::ALL {
                let Some(site_dir) = find_dir(root, site.dir_name()) else {
                    continue;
                };
                for label in Label::BOTH {
                    let Some(dir) = find_dir(&site_dir, label.dir_name()) else {
                        continue;
                    };
                    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                        .map_err(|e| Error::io(&dir, e))?
                        .filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|p| p.is_file() && is_image(p))
                        .collect();
                    files.sort();
                    candidates.extend(files.into_iter().map(|p| (p, label, site)));
                }
            }
        }
        let mut manifest = DatasetManifest::default();
        let mut seen = BTreeSet::new();
        for (path, label, site) in candidates {
            if !seen.insert(path.clone()) {
                return Err(Error::Dataset(format!("{} listed twice", path.display())));
            }
            match image::image_dimensions(&path) {
                Ok((width, height)) => {
                    *manifest.counts.entry((site, label)).or_insert(0) += 1;
                    manifest.samples.push(ImageSample {
                        path,
                        label,
                        site,
                        width,
                        height,
                    });
                }
                Err(e) => manifest.skipped.push((path, e.to_string())),
            }
        }
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, site: Site, label: Label) -> usize {
        self.counts.get(&(site, label)).copied().unwrap_or(0)
    }

    pub fn label_count(&self, label: Label) -> usize {
        Site::ALL.iter().map(|&s| self.count(s, label)).sum()
    }

    /// Human-readable differences from [`REFERENCE_TALLY`]; empty when the
    /// tree matches the published counts.
    pub fn reference_mismatches(&self) -> Vec<String> {
        REFERENCE_TALLY
            .iter()
            .filter(|((s, l), n)| self.count(*s, *l) != *n)
            .map(|((s, l), n)| format!("{s}/{l}: found {}, published {n}", self.count(*s, *l)))
            .collect()
    }

    /// Writes the skip report (one `path<TAB>reason` line per file).
    pub fn write_skip_report(&self, path: &Path) -> Result<()> {
        let text: String = self
            .skipped
            .iter()
            .map(|(p, why)| format!("{}\t{why}\n", p.display()))
            .collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-label train/test counts of the six published test cases, as
/// `[(train_crack, train_nocrack), (test_crack, test_nocrack)]`.
pub const CASE_COUNTS: [[(usize, usize); 2]; 6] = [
    [(35, 35), (21, 20)],
    [(28, 28), (27, 27)],
    [(50, 39), (8, 16)],
    [(36, 41), (22, 14)],
    [(30, 30), (26, 12)],
    [(26, 12), (30, 30)],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaseId(u8);

impl CaseId {
    pub const ALL: [CaseId; 6] = [CaseId(0), CaseId(1), CaseId(2), CaseId(3), CaseId(4), CaseId(5)];

    pub fn new(id: u8) -> Result<Self> {
        if id <= 5 {
            Ok(CaseId(id))
        } else {
            Err(Error::Config(format!("test case {id} outside 0..=5")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Whether membership depends on the seed.
    pub fn is_random(self) -> bool {
        self.0 <= 1
    }

    /// Published (train, test) counts per label, as `(crack, nocrack)`.
    pub fn published_counts(self) -> [(usize, usize); 2] {
        CASE_COUNTS[self.0 as usize]
    }

    /// Sites on the train and test sides of a site-based case.
    pub fn sites(self) -> Option<(Vec<Site>, Vec<Site>)> {
        use Site::*;
        match self.0 {
            2 => Some((vec![Naillac, Random], vec![StNikolaos])),
            3 => Some((vec![StNikolaos, Random], vec![Naillac])),
            4 => Some((vec![Naillac, StNikolaos], vec![Random])),
            5 => Some((vec![Random], vec![Naillac, StNikolaos])),
            _ => None,
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestCaseSplit {
    pub case_id: CaseId,
    pub seed: u64,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

fn tally(samples: &[ImageSample], label: Label) -> usize {
    samples.iter().filter(|s| s.label == label).count()
}

impl TestCaseSplit {
    /// `(crack, nocrack)` on each side.
    pub fn counts(&self) -> [(usize, usize); 2] {
        [
            (tally(&self.train, Label::Crack), tally(&self.train, Label::NoCrack)),
            (tally(&self.test, Label::Crack), tally(&self.test, Label::NoCrack)),
        ]
    }

    /// Differences between the realized and the published counts.
    pub fn count_mismatches(&self) -> Vec<String> {
        let got = self.counts();
        let want = self.case_id.published_counts();
        let mut out = Vec::new();
        for (side, (g, w)) in ["train", "test"].iter().zip(got.iter().zip(want.iter())) {
            if g != w {
                out.push(format!(
                    "case {} {side}: {} Crack/{} NoCrack, published {} Crack/{} NoCrack",
                    self.case_id, g.0, g.1, w.0, w.1
                ));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            case_id: u8,
            seed: u64,
            train: Vec<&'a Path>,
            test: Vec<&'a Path>,
            samples_train: &'a [ImageSample],
            samples_test: &'a [ImageSample],
        }
        let out = Out {
            case_id: self.case_id.get(),
            seed: self.seed,
            train: self.train.iter().map(|s| s.path.as_path()).collect(),
            test: self.test.iter().map(|s| s.path.as_path()).collect(),
            samples_train: &self.train,
            samples_test: &self.test,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&out)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            case_id: u8,
            seed: u64,
            samples_train: Vec<ImageSample>,
            samples_test: Vec<ImageSample>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: In = serde_json::from_str(&text)?;
        Ok(Self {
            case_id: CaseId::new(v.case_id)?,
            seed: v.seed,
            train: v.samples_train,
            test: v.samples_test,
        })
    }
}

/// Materializes one test case.
///
/// Site-based cases (2-5) take every sample of the listed sites, whatever
/// the tree holds. Cases 0 and 1 draw the published per-label counts from
/// the pooled samples with a seeded shuffle, and fail when the pool is too
/// small.
pub fn make_split(manifest: &DatasetManifest, case_id: CaseId, seed: u64) -> Result<TestCaseSplit> {
    make_split_with(manifest, case_id, seed, Shortfall::Error)
}

/// What a seeded draw does when a label has fewer samples than requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortfall {
    #[default]
    Error,
    /// Shrink both sides of the short label, keeping their ratio.
    Scale,
}

pub fn make_split_with(
    manifest: &DatasetManifest,
    case_id: CaseId,
    seed: u64,
    shortfall: Shortfall,
) -> Result<TestCaseSplit> {
    let mut samples = manifest.samples.clone();
    samples.sort();
    let (train, test) = if let Some((train_sites, test_sites)) = case_id.sites() {
        let train: Vec<_> = samples.iter().filter(|s| train_sites.contains(&s.site)).cloned().collect();
        let test: Vec<_> = samples.iter().filter(|s| test_sites.contains(&s.site)).cloned().collect();
        for (side, set) in [("train", &train), ("test", &test)] {
            if set.is_empty() {
                return Err(Error::InsufficientSamples {
                    case_id: case_id.get(),
                    deficit: format!("{side} side is empty"),
                });
            }
        }
        (train, test)
    } else {
        let [(trc, trn), (tec, ten)] = case_id.published_counts();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut deficits = Vec::new();
        for (label, n_train, n_test) in [(Label::Crack, trc, tec), (Label::NoCrack, trn, ten)] {
            let mut pool: Vec<_> = samples.iter().filter(|s| s.label == label).cloned().collect();
            let need = n_train + n_test;
            let (mut n_train, mut n_test) = (n_train, n_test);
            if pool.len() < need {
                if shortfall == Shortfall::Error {
                    deficits.push(format!("{label}: need {need}, have {} ({} short)", pool.len(), need - pool.len()));
                    continue;
                }
                n_test = ((n_test * pool.len()) as f64 / need as f64).round() as usize;
                n_train = pool.len() - n_test;
                log::warn!("case {case_id} {label}: only {} samples, drawing {n_train} train / {n_test} test", pool.len());
            }
            pool.shuffle(&mut rng);
            test.extend(pool.drain(..n_test));
            train.extend(pool.drain(..n_train));
        }
        if !deficits.is_empty() {
            return Err(Error::InsufficientSamples {
                case_id: case_id.get(),
                deficit: deficits.join("; "),
            });
        }
        train.sort();
        test.sort();
        (train, test)
    };
    Ok(TestCaseSplit {
        case_id,
        seed,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Uniform angle in ±`rotation` degrees, reflect-padded.
    Continuous,
    /// Random multiple of 90 degrees.
    QuarterTurns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub hflip: bool,
    pub vflip: bool,
    pub jitter: Jitter,
    /// Maximum absolute angle in degrees.
    pub rotation: f64,
    pub rotation_mode: RotationMode,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            jitter: Jitter {
                brightness: 0.1,
                contrast: 0.1,
                saturation: 0.1,
            },
            rotation: 15.0,
            rotation_mode: RotationMode::Continuous,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            jitter: Jitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            },
            rotation: 0.0,
            rotation_mode: RotationMode::Continuous,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self {
            seed: self.seed,
            rotation_mode: self.rotation_mode,
            ..Self::identity()
        }
    }

    /// Random stream for one sample of one epoch.
    pub fn rng_for(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        rng
    }
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

pub fn vflip(img: &RgbImage) -> RgbImage {
    image::imageops::flip_vertical(img)
}

/// Reflect an out-of-range coordinate back into `0..n` (edge pixel not
/// repeated).
fn reflect(mut v: f64, n: usize) -> f64 {
    let max = (n - 1) as f64;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    v = v.rem_euclid(period);
    if v > max {
        period - v
    } else {
        v
    }
}

/// Rotation about the center by `degrees` (counter-clockwise), bilinear
/// sampling with reflection outside the frame.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = reflect(c * dx - s * dy + cx, w as usize);
        let sy = reflect(s * dx + c * dy + cy, h as usize);
        let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let mut v = [0u8; 3];
        for (ch, slot) in v.iter_mut().enumerate() {
            let p = |xx: u32, yy: u32| img.get_pixel(xx, yy)[ch] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *slot = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(v);
    }
    out
}

fn rotate_quarter(img: &RgbImage, turns: u8) -> RgbImage {
    match turns % 4 {
        1 => image::imageops::rotate90(img),
        2 => image::imageops::rotate180(img),
        3 => image::imageops::rotate270(img),
        _ => img.clone(),
    }
}

/// Brightness, contrast and saturation scaling by the given factors (1 = no
/// change), clamped to 0..255.
pub fn color_jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let gray = |p: &Rgb<u8>| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = img.pixels().map(gray).sum::<f64>() * brightness / n;
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let mut v = [0f64; 3];
        for ch in 0..3 {
            v[ch] = px[ch] as f64 * brightness;
        }
        let g = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        for x in v.iter_mut() {
            *x = g + (*x - g) * saturation;
            *x = mean + (*x - mean) * contrast;
        }
        *px = Rgb(v.map(|x| x.round().clamp(0.0, 255.0) as u8));
    }
    out
}

/// Applies `policy` with random draws from `rng`. Shape is preserved; an
/// identity policy returns the input unchanged.
pub fn augment(img: &RgbImage, policy: &AugmentationPolicy, rng: &mut impl Rng) -> RgbImage {
    let mut out = img.clone();
    if policy.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if policy.vflip && rng.random_bool(0.5) {
        out = vflip(&out);
    }
    if policy.rotation > 0.0 {
        out = match policy.rotation_mode {
            RotationMode::Continuous => rotate(&out, rng.random_range(-policy.rotation..=policy.rotation)),
            RotationMode::QuarterTurns if out.width() == out.height() => rotate_quarter(&out, rng.random_range(0..4)),
            RotationMode::QuarterTurns => rotate_quarter(&out, 2 * rng.random_range(0..2)),
        };
    }
    let j = policy.jitter;
    if j.brightness > 0.0 || j.contrast > 0.0 || j.saturation > 0.0 {
        let mut factor = |m: f64| if m > 0.0 { rng.random_range(1.0 - m..=1.0 + m) } else { 1.0 };
        let (b, c, s) = (factor(j.brightness), factor(j.contrast), factor(j.saturation));
        out = color_jitter(&out, b, c, s);
    }
    out
}
