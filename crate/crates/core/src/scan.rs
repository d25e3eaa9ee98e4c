//! Sliding-window inference over full-resolution images with CAM fusion.

use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cam::{self, Alignment, CamOptions, CamTarget, OverlayStyle};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::scalar::{lit, Scalar};

pub const DEFAULT_WINDOW: usize = 224;
pub const DEFAULT_STEP: usize = 32;

fn axis_positions(len: usize, window: usize, step: usize) -> Vec<usize> {
    let last = len - window;
    let mut v: Vec<usize> = (0..=last).step_by(step).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// Top-left corners `(x, y)`, rows first, with a final window flush against
/// the right and bottom edges when the step does not land there.
pub fn enumerate_windows(width: usize, height: usize, window: usize, step: usize) -> Result<Vec<(usize, usize)>> {
    if step == 0 || window == 0 {
        return Err(Error::Config("window and step must be positive".into()));
    }
    if width < window || height < window {
        return Err(Error::Precondition(format!(
            "image {width}x{height} is smaller than the {window}px window; classify it as a single patch instead"
        )));
    }
    let xs = axis_positions(width, window, step);
    let ys = axis_positions(height, window, step);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `evidence / coverage`
    #[default]
    Mean,
    Max,
}

/// Evidence and coverage accumulated over the full image.
#[derive(Debug, Clone)]
pub struct ScanGrid<T> {
    pub evidence: Array2<T>,
    pub coverage: Array2<u32>,
    pub window: usize,
    pub step: usize,
    pub fusion: Fusion,
}

impl<T: Scalar> ScanGrid<T> {
    pub fn new(height: usize, width: usize, window: usize, step: usize, fusion: Fusion) -> Self {
        let fill = match fusion {
            Fusion::Mean => T::zero(),
            Fusion::Max => T::neg_infinity(),
        };
        Self {
            evidence: Array2::from_elem((height, width), fill),
            coverage: Array2::zeros((height, width)),
            window,
            step,
            fusion,
        }
    }

    /// Adds a `window x window` map with its top-left corner at `(x, y)`.
    pub fn add(&mut self, x: usize, y: usize, map: ArrayView2<'_, T>) -> Result<()> {
        let (h, w) = map.dim();
        let (gh, gw) = self.evidence.dim();
        if y + h > gh || x + w > gw {
            return Err(Error::Shape(format!(
                "{w}x{h} map at ({x}, {y}) leaves the {gw}x{gh} grid"
            )));
        }
        let mut ev = self.evidence.slice_mut(s![y..y + h, x..x + w]);
        match self.fusion {
            Fusion::Mean => ev += &map,
            Fusion::Max => ev.zip_mut_with(&map, |e, &m| *e = e.max(m)),
        }
        self.coverage.slice_mut(s![y..y + h, x..x + w]).mapv_inplace(|c| c + 1);
        Ok(())
    }

    /// Combines partial grids built over disjoint window subsets.
    pub fn merge(&mut self, other: &ScanGrid<T>) -> Result<()> {
        if self.evidence.dim() != other.evidence.dim() || self.fusion != other.fusion {
            return Err(Error::Shape("grids differ in size or fusion rule".into()));
        }
        match self.fusion {
            Fusion::Mean => self.evidence += &other.evidence,
            Fusion::Max => self.evidence.zip_mut_with(&other.evidence, |e, &o| *e = e.max(o)),
        }
        self.coverage += &other.coverage;
        Ok(())
    }

    /// Fused field; pixels no window covered are zero.
    pub fn fused(&self) -> Array2<T> {
        let mut out = Array2::zeros(self.evidence.dim());
        ndarray::Zip::from(&mut out)
            .and(&self.evidence)
            .and(&self.coverage)
            .for_each(|o, &e, &c| {
                if c > 0 {
                    *o = match self.fusion {
                        Fusion::Mean => e / lit::<T>(c as f64),
                        Fusion::Max => e,
                    };
                }
            });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub window: usize,
    pub step: usize,
    pub batch_size: usize,
    pub fusion: Fusion,
    pub align: Alignment,
    pub overlay: OverlayStyle,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            step: DEFAULT_STEP,
            batch_size: 32,
            fusion: Fusion::Mean,
            align: Alignment::Corners,
            overlay: OverlayStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub x: usize,
    pub y: usize,
    pub label: Label,
    pub prob_crack: f64,
}

#[derive(Debug, Clone)]
pub struct ScanResult<T> {
    pub fused: Array2<T>,
    pub per_window: Vec<WindowPrediction>,
    pub overlay: RgbImage,
    pub grid: ScanGrid<T>,
}

impl<T: Scalar> ScanResult<T> {
    /// `windows.csv`, `fused.npy` and `overlay.png` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv_path = dir.join("windows.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for p in &self.per_window {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        cam::write_field(&dir.join("fused.npy"), self.fused.view())?;
        let png = dir.join("overlay.png");
        self.overlay.save(&png).map_err(|e| Error::Image { path: png, source: e })
    }
}

/// Runs the model over `positions` (window corners) in the order given.
pub fn scan_windows<T: Scalar>(
    model: &ClassifierModel<T>,
    image: &RgbImage,
    positions: &[(usize, usize)],
    opts: &ScanOptions,
) -> Result<ScanResult<T>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("scan batch size must be positive".into()));
    }
    let (width, height) = (image.width() as usize, image.height() as usize);
    let mut grid = ScanGrid::new(height, width, opts.window, opts.step, opts.fusion);
    let mut per_window = Vec::with_capacity(positions.len());
    let cam_opts = CamOptions {
        align: opts.align,
        target: CamTarget::AlwaysCrack,
    };
    let win = opts.window as u32;
    for chunk in positions.chunks(opts.batch_size) {
        let crops: Vec<RgbImage> = chunk
            .iter()
            .map(|&(x, y)| image::imageops::crop_imm(image, x as u32, y as u32, win, win).to_image())
            .collect();
        let at = |e: Error| Error::Window {
            x: chunk[0].0,
            y: chunk[0].1,
            source: Box::new(e),
        };
        let preds = model.predict_images(&crops).map_err(at)?;
        for (&(x, y), pred) in chunk.iter().zip(&preds) {
            let with_xy = |e: Error| Error::Window { x, y, source: Box::new(e) };
            let map = cam::attention_map(pred, (opts.window, opts.window), cam_opts).map_err(with_xy)?;
            grid.add(x, y, map.full.view()).map_err(with_xy)?;
            per_window.push(WindowPrediction {
                x,
                y,
                label: pred.label,
                prob_crack: pred.prob_crack().to_f64_lossy(),
            });
        }
    }
    let fused = grid.fused();
    let overlay = cam::overlay(image, fused.view(), opts.overlay)?;
    Ok(ScanResult {
        fused,
        per_window,
        overlay,
        grid,
    })
}

/// Slides the window over the whole image and fuses the Crack evidence.
pub fn scan_image<T: Scalar>(model: &ClassifierModel<T>, image: &RgbImage, opts: &ScanOptions) -> Result<ScanResult<T>> {
    let positions = enumerate_windows(image.width() as usize, image.height() as usize, opts.window, opts.step)?;
    log::info!("scanning {} windows", positions.len());
    scan_windows(model, image, &positions, opts)
}
