//! Backbone-specific pixel transforms.

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::{lit, Scalar};

/// Reference ImageNet means in BGR order, on the 0..255 scale.
pub const IMAGENET_BGR_MEAN: [f64; 3] = [103.939, 116.779, 123.68];
/// Reference ImageNet per-channel statistics in RGB order, on the 0..1 scale.
pub const IMAGENET_RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PreprocessMode {
    /// RGB to BGR, then subtract the per-channel means. No scaling.
    BgrCentered,
    /// Affine map of 0..255 onto -1..1.
    SymmetricUnit,
    /// Scale to 0..1, then standardize per channel.
    UnitImagenetNorm,
}

/// Constants a mode depends on; stored alongside every model so inference
/// reproduces training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConstants {
    pub channel_order: String,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub scale: f64,
    pub sample_wise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub mode: PreprocessMode,
    /// For `SymmetricUnit`, stretch each image's own min..max onto -1..1
    /// instead of the fixed 0..255 range.
    #[serde(default)]
    pub sample_wise: bool,
}

impl From<PreprocessMode> for Preprocessor {
    fn from(mode: PreprocessMode) -> Self {
        Self {
            mode,
            sample_wise: false,
        }
    }
}

impl PreprocessConstants {
    /// Equality up to decimal round-off of a JSON round trip.
    pub fn matches(&self, other: &PreprocessConstants) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        self.channel_order == other.channel_order
            && self.sample_wise == other.sample_wise
            && close(self.scale, other.scale)
            && self.mean.iter().zip(&other.mean).all(|(&a, &b)| close(a, b))
            && self.std.iter().zip(&other.std).all(|(&a, &b)| close(a, b))
    }
}

impl Preprocessor {
    pub fn constants(&self) -> PreprocessConstants {
        match self.mode {
            PreprocessMode::BgrCentered => PreprocessConstants {
                channel_order: "BGR".into(),
                mean: IMAGENET_BGR_MEAN,
                std: [1.0; 3],
                scale: 1.0,
                sample_wise: false,
            },
            PreprocessMode::SymmetricUnit => PreprocessConstants {
                channel_order: "RGB".into(),
                mean: [127.5; 3],
                std: [127.5; 3],
                scale: 1.0,
                sample_wise: self.sample_wise,
            },
            PreprocessMode::UnitImagenetNorm => PreprocessConstants {
                channel_order: "RGB".into(),
                mean: IMAGENET_RGB_MEAN,
                std: IMAGENET_RGB_STD,
                scale: 1.0 / 255.0,
                sample_wise: false,
            },
        }
    }

    /// `image` is `[height, width, 3]` RGB; the result keeps that layout
    /// (channel order follows the mode).
    pub fn apply<T: Scalar>(&self, image: ArrayView3<'_, u8>) -> Result<Array3<T>> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let mut out = Array3::<T>::zeros((h, w, 3));
        match self.mode {
            PreprocessMode::BgrCentered => {
                for ((y, x, ch), v) in out.indexed_iter_mut() {
                    let src = image[[y, x, 2 - ch]] as f64;
                    *v = lit(src - IMAGENET_BGR_MEAN[ch]);
                }
            }
            PreprocessMode::SymmetricUnit => {
                let (lo, hi) = if self.sample_wise {
                    let lo = image.iter().copied().min().unwrap_or(0) as f64;
                    let hi = image.iter().copied().max().unwrap_or(255) as f64;
                    (lo, hi)
                } else {
                    (0.0, 255.0)
                };
                let span = hi - lo;
                for (v, &p) in out.iter_mut().zip(image.iter()) {
                    *v = if span > 0.0 {
                        lit(2.0 * (p as f64 - lo) / span - 1.0)
                    } else {
                        lit(0.0)
                    };
                }
            }
            PreprocessMode::UnitImagenetNorm => {
                for ((y, x, ch), v) in out.indexed_iter_mut() {
                    let p = image[[y, x, ch]] as f64 / 255.0;
                    *v = lit((p - IMAGENET_RGB_MEAN[ch]) / IMAGENET_RGB_STD[ch]);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`apply`](Self::apply) for the fixed (non sample-wise)
    /// transforms, returning RGB values on the 0..255 scale.
    pub fn invert<T: Scalar>(&self, x: ArrayView3<'_, T>) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let mut out = Array3::<f64>::zeros((h, w, 3));
        for ((y, xx, ch), v) in out.indexed_iter_mut() {
            *v = match self.mode {
                PreprocessMode::BgrCentered => x[[y, xx, 2 - ch]].to_f64_lossy() + IMAGENET_BGR_MEAN[2 - ch],
                PreprocessMode::SymmetricUnit => (x[[y, xx, ch]].to_f64_lossy() + 1.0) * 127.5,
                PreprocessMode::UnitImagenetNorm => {
                    (x[[y, xx, ch]].to_f64_lossy() * IMAGENET_RGB_STD[ch] + IMAGENET_RGB_MEAN[ch]) * 255.0
                }
            };
        }
        out
    }
}

/// Stacks `[H, W, 3]` arrays into an NCHW batch.
pub fn to_batch<T: Scalar>(images: &[Array3<T>]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty batch".into()));
    };
    let (h, w, c) = first.dim();
    let mut out = Tensor::<T>::zeros((images.len(), c, h, w));
    for (mut slot, img) in out.axis_iter_mut(Axis(0)).zip(images) {
        if img.dim() != (h, w, c) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", img.dim(), (h, w, c))));
        }
        slot.assign(&img.view().permuted_axes([2, 0, 1]));
    }
    Ok(out)
}
