//! Crack classification, localization and full-image scanning for
//! stone-masonry imagery.

pub mod cam;
pub mod charts;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod scalar;
pub mod scan;
pub mod train;
pub mod zoo;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;

pub type Classifier = model::ClassifierModel<f32>;
pub type Classifier64 = model::ClassifierModel<f64>;
pub type Attention = cam::AttentionMap<f32>;
pub type Grid = scan::ScanGrid<f32>;
pub type Scan = scan::ScanResult<f32>;
