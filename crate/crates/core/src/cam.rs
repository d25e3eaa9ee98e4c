//! Class activation maps from the dense head, upsampling and red overlays.

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, Prediction};
use crate::scalar::{lit, Scalar};

/// Sampling grid used when resizing a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Corner pixels of source and target coincide.
    #[default]
    Corners,
    /// Pixel centres at half-integer coordinates.
    HalfPixel,
}

#[derive(Debug, Clone)]
pub struct AttentionMap<T> {
    /// `[H', W']`
    pub raw: Array2<T>,
    /// `[H, W]`, the size of the image the map was computed for.
    pub full: Array2<T>,
    pub class_index: Label,
    pub value_range: (T, T),
}

/// `raw[y][x] = sum_c f[y][x][c] * w[c][class]`; `head_weights` columns in
/// canonical class order.
pub fn compute_cam<T: Scalar>(
    feature_maps: ArrayView3<'_, T>,
    head_weights: ArrayView2<'_, T>,
    class: Label,
) -> Result<Array2<T>> {
    let (h, w, c) = feature_maps.dim();
    if head_weights.nrows() != c || head_weights.ncols() != 2 {
        return Err(Error::Shape(format!(
            "feature maps have {c} channels but head weights are {:?}",
            head_weights.dim()
        )));
    }
    let col = head_weights.column(class.index());
    let flat = feature_maps
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous");
    Ok(flat.dot(&col).into_shape_with_order((h, w)).expect("h*w elements"))
}

fn source_coord(i: usize, src: usize, dst: usize, align: Alignment) -> f64 {
    match align {
        Alignment::Corners if dst > 1 => i as f64 * (src - 1) as f64 / (dst - 1) as f64,
        Alignment::Corners => 0.0,
        Alignment::HalfPixel => ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64),
    }
}

/// Interpolation taps `(lo, hi, frac)` along one axis.
fn taps(src: usize, dst: usize, align: Alignment) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let s = source_coord(i, src, dst, align);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(raw: ArrayView2<'_, T>, target: (usize, usize), align: Alignment) -> Result<Array2<T>> {
    let (sh, sw) = raw.dim();
    let (th, tw) = target;
    if sh == 0 || sw == 0 || th == 0 || tw == 0 {
        return Err(Error::Shape(format!("cannot resize {:?} to {:?}", raw.dim(), target)));
    }
    if th < sh || tw < sw {
        return Err(Error::Shape(format!(
            "target {target:?} is smaller than the source {:?}",
            raw.dim()
        )));
    }
    let ys = taps(sh, th, align);
    let xs = taps(sw, tw, align);
    Ok(Array2::from_shape_fn((th, tw), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let (fy, fx) = (lit::<T>(fy), lit::<T>(fx));
        let one = T::one();
        let top = raw[[y0, x0]] * (one - fx) + raw[[y0, x1]] * fx;
        let bottom = raw[[y1, x0]] * (one - fx) + raw[[y1, x1]] * fx;
        top * (one - fy) + bottom * fy
    }))
}

pub fn value_range<T: Scalar>(a: ArrayView2<'_, T>) -> (T, T) {
    a.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Min-max normalization to `[0, 1]`; a constant field maps to zeros.
pub fn normalize<T: Scalar>(a: ArrayView2<'_, T>) -> Array2<f64> {
    let (lo, hi) = value_range(a);
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 || !span.is_finite() {
        return Array2::zeros(a.dim());
    }
    a.mapv(|v| (v.to_f64_lossy() - lo) / span)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub threshold: f64,
    pub alpha: f64,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            alpha: 0.6,
        }
    }
}

/// Blends pixels whose normalized evidence exceeds the threshold toward red.
pub fn overlay<T: Scalar>(image: &RgbImage, field: ArrayView2<'_, T>, style: OverlayStyle) -> Result<RgbImage> {
    let (h, w) = field.dim();
    if (image.width() as usize, image.height() as usize) != (w, h) {
        return Err(Error::Shape(format!(
            "map is {w}x{h} but the image is {}x{}",
            image.width(),
            image.height()
        )));
    }
    let norm = normalize(field);
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = norm[[y as usize, x as usize]];
        if v > style.threshold {
            let a = (style.alpha * v).clamp(0.0, 1.0);
            let red = [255.0, 0.0, 0.0];
            *px = Rgb(std::array::from_fn(|c| {
                ((1.0 - a) * px.0[c] as f64 + a * red[c]).round().clamp(0.0, 255.0) as u8
            }));
        }
    }
    Ok(out)
}

/// Which class the map is projected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamTarget {
    #[default]
    Predicted,
    /// Crack evidence even when the patch is classified NoCrack.
    AlwaysCrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CamOptions {
    pub align: Alignment,
    pub target: CamTarget,
}

/// Map for an already computed prediction, upsampled to `size` (H, W).
pub fn attention_map<T: Scalar>(
    pred: &Prediction<T>,
    size: (usize, usize),
    opts: CamOptions,
) -> Result<AttentionMap<T>> {
    let class = match opts.target {
        CamTarget::Predicted => pred.label,
        CamTarget::AlwaysCrack => Label::Crack,
    };
    let raw = compute_cam(pred.feature_maps.view(), pred.head_weights.view(), class)?;
    let full = upsample_bilinear(raw.view(), size, opts.align)?;
    Ok(AttentionMap {
        value_range: value_range(raw.view()),
        raw,
        full,
        class_index: class,
    })
}

/// Classifies one image and returns its attention map at the image's size.
pub fn localize<T: Scalar>(
    model: &ClassifierModel<T>,
    image: &RgbImage,
    opts: CamOptions,
) -> Result<(Prediction<T>, AttentionMap<T>)> {
    let pred = model
        .predict_images(std::slice::from_ref(image))?
        .pop()
        .expect("one image in, one prediction out");
    let map = attention_map(&pred, (image.height() as usize, image.width() as usize), opts)?;
    Ok((pred, map))
}

/// Stores a field as a little-endian `f64` `.npy` array.
pub fn write_field<T: Scalar>(path: &std::path::Path, field: ArrayView2<'_, T>) -> Result<()> {
    let data = field.mapv(|v| v.to_f64_lossy());
    ndarray_npy::write_npy(path, &data).map_err(|e| Error::artifact(path, e.to_string()))
}
