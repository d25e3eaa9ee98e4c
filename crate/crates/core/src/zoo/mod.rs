//! Backbone registry and architecture definitions.
//!
//! Every backbone is the headless feature extractor of the corresponding
//! Keras application: same layers, same layer names and same parameter
//! shapes, so weights exported from Keras load by name.

mod densenet;
mod inception_resnet;
pub mod keras;
mod mobilenet;
mod resnet;
mod vgg;
mod xception;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, GraphBuilder, OptimizerKind};
use crate::preprocess::PreprocessMode;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Backbone {
    VGG16,
    VGG19,
    InceptionResNetV2,
    MobileNetV3Small,
    MobileNetV3Large,
    DenseNet121,
    DenseNet169,
    DenseNet201,
    ResNet50V2,
    ResNet101V2,
    Xception,
}

impl Backbone {
    /// Registry order.
    pub const ALL: [Backbone; 11] = [
        Backbone::VGG16,
        Backbone::VGG19,
        Backbone::InceptionResNetV2,
        Backbone::MobileNetV3Small,
        Backbone::MobileNetV3Large,
        Backbone::DenseNet121,
        Backbone::DenseNet169,
        Backbone::DenseNet201,
        Backbone::ResNet50V2,
        Backbone::ResNet101V2,
        Backbone::Xception,
    ];

    pub fn spec(self) -> &'static BackboneSpec {
        &REGISTRY[self as usize]
    }

    pub fn name(self) -> &'static str {
        self.spec().name
    }

    /// Position in registry order.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    /// Case-insensitive; also accepts `ResNet50`/`ResNet101` for the V2
    /// variants.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        let alias = match key.as_str() {
            "resnet50" => "resnet50v2",
            "resnet101" => "resnet101v2",
            other => other,
        };
        Backbone::ALL
            .into_iter()
            .find(|b| b.name().to_ascii_lowercase() == alias)
            .ok_or_else(|| Error::UnknownBackbone(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BackboneSpec {
    pub backbone: Backbone,
    pub name: &'static str,
    /// Published size of the full network including its original top.
    pub params_millions: f64,
    /// Published topological depth.
    pub depth: u32,
    pub preprocess: PreprocessMode,
    pub optimizer: OptimizerKind,
    pub default_lr: f64,
    /// Feature channels at the backbone output (full width).
    pub feature_channels: usize,
    /// Smallest square input the architecture accepts.
    pub min_input: usize,
}

const fn spec(
    backbone: Backbone,
    name: &'static str,
    params_millions: f64,
    depth: u32,
    preprocess: PreprocessMode,
    default_lr: f64,
    feature_channels: usize,
    min_input: usize,
) -> BackboneSpec {
    let optimizer = match backbone {
        Backbone::VGG16 | Backbone::VGG19 => OptimizerKind::Sgd,
        _ => OptimizerKind::Adam,
    };
    BackboneSpec {
        backbone,
        name,
        params_millions,
        depth,
        preprocess,
        optimizer,
        default_lr,
        feature_channels,
        min_input,
    }
}

use PreprocessMode::{BgrCentered as BGR, SymmetricUnit as SYM, UnitImagenetNorm as NORM};

pub static REGISTRY: [BackboneSpec; 11] = [
    spec(Backbone::VGG16, "VGG16", 138.4, 16, BGR, 1e-4, 512, 32),
    spec(Backbone::VGG19, "VGG19", 143.7, 19, BGR, 1e-4, 512, 32),
    spec(Backbone::InceptionResNetV2, "InceptionResNetV2", 55.9, 449, SYM, 1e-4, 1536, 75),
    spec(Backbone::MobileNetV3Small, "MobileNetV3Small", 2.9, 66, SYM, 1e-4, 576, 32),
    spec(Backbone::MobileNetV3Large, "MobileNetV3Large", 5.4, 217, SYM, 1e-4, 960, 32),
    spec(Backbone::DenseNet121, "DenseNet121", 8.1, 242, NORM, 1e-4, 1024, 32),
    spec(Backbone::DenseNet169, "DenseNet169", 14.3, 338, NORM, 1e-4, 1664, 32),
    spec(Backbone::DenseNet201, "DenseNet201", 20.2, 402, NORM, 1e-4, 1920, 32),
    spec(Backbone::ResNet50V2, "ResNet50V2", 25.6, 103, SYM, 8.5e-5, 2048, 32),
    spec(Backbone::ResNet101V2, "ResNet101V2", 44.7, 205, SYM, 8.5e-5, 2048, 32),
    spec(Backbone::Xception, "Xception", 22.9, 81, SYM, 1e-3, 2048, 71),
];

/// Channel multiplier applied to every layer; 1.0 reproduces the reference
/// architectures exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Width(pub f64);

impl Width {
    pub fn ch(self, n: usize) -> usize {
        if self.0 == 1.0 {
            n
        } else {
            ((n as f64 * self.0).round() as usize).max(1)
        }
    }

    fn divisible(self, n: usize) -> usize {
        mobilenet::make_divisible(n as f64 * self.0)
    }
}

/// Architecture knobs that change the size of the network but not its
/// topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZooOptions {
    pub width: f64,
    pub input_size: usize,
}

impl Default for ZooOptions {
    fn default() -> Self {
        Self {
            width: 1.0,
            input_size: 224,
        }
    }
}

impl ZooOptions {
    pub fn is_reference(&self) -> bool {
        self.width == 1.0
    }
}

/// Builds a randomly initialized headless backbone.
pub fn build_backbone<T: Scalar>(backbone: Backbone, opts: ZooOptions, rng: &mut ChaCha8Rng) -> Result<Graph<T>> {
    let spec = backbone.spec();
    if !(opts.width > 0.0 && opts.width <= 1.0) {
        return Err(Error::Config(format!("width multiplier {} outside (0, 1]", opts.width)));
    }
    if opts.input_size < spec.min_input {
        return Err(Error::Config(format!(
            "{} needs inputs of at least {}px, got {}",
            spec.name, spec.min_input, opts.input_size
        )));
    }
    let w = Width(opts.width);
    let mut b = GraphBuilder::<T>::new(rng);
    let x = b.input(3);
    let out = match backbone {
        Backbone::VGG16 => vgg::build(&mut b, x, [2, 2, 3, 3, 3], w),
        Backbone::VGG19 => vgg::build(&mut b, x, [2, 2, 4, 4, 4], w),
        Backbone::InceptionResNetV2 => inception_resnet::build(&mut b, x, w),
        Backbone::MobileNetV3Small => mobilenet::build(&mut b, x, mobilenet::Variant::Small, w),
        Backbone::MobileNetV3Large => mobilenet::build(&mut b, x, mobilenet::Variant::Large, w),
        Backbone::DenseNet121 => densenet::build(&mut b, x, [6, 12, 24, 16], w),
        Backbone::DenseNet169 => densenet::build(&mut b, x, [6, 12, 32, 32], w),
        Backbone::DenseNet201 => densenet::build(&mut b, x, [6, 12, 48, 32], w),
        Backbone::ResNet50V2 => resnet::build(&mut b, x, [3, 4, 6, 3], w),
        Backbone::ResNet101V2 => resnet::build(&mut b, x, [3, 4, 23, 3], w),
        Backbone::Xception => xception::build(&mut b, x, w),
    };
    Ok(b.finish(out))
}

/// Parameters of the original 1000-class ImageNet top that the headless
/// backbone drops.
pub fn original_top_params(backbone: Backbone, feature_channels: usize) -> usize {
    const CLASSES: usize = 1000;
    match backbone {
        Backbone::VGG16 | Backbone::VGG19 => {
            let flat = 7 * 7 * feature_channels;
            (flat * 4096 + 4096) + (4096 * 4096 + 4096) + (4096 * CLASSES + CLASSES)
        }
        Backbone::MobileNetV3Small | Backbone::MobileNetV3Large => {
            let v = match backbone {
                Backbone::MobileNetV3Small => mobilenet::Variant::Small,
                _ => mobilenet::Variant::Large,
            };
            let last = mobilenet::last_point_channels(v);
            (feature_channels * last + last) + (last * CLASSES + CLASSES)
        }
        _ => feature_channels * CLASSES + CLASSES,
    }
}

/// Total parameters of the full-width headless backbone, built once with a
/// throwaway seed.
pub fn headless_param_count(backbone: Backbone) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = build_backbone::<f32>(backbone, ZooOptions::default(), &mut rng).expect("reference options are valid");
    g.params.count()
}

/// Size of the reference network with its original classification top, the
/// figure the registry's `params_millions` describes.
pub fn reference_param_count(backbone: Backbone) -> usize {
    headless_param_count(backbone) + original_top_params(backbone, backbone.spec().feature_channels)
}
