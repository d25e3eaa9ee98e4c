//! Backbone plus global-average-pool/dense/softmax head, and its on-disk
//! artifact.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::nn::loss::softmax;
use crate::nn::{Grads, ParamId, ParamRole, ParamStore, Tensor};
use crate::preprocess::{PreprocessConstants, PreprocessMode, Preprocessor};
use crate::scalar::{lit, Scalar};
use crate::zoo::{self, Backbone, ZooOptions};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const METADATA_FILE: &str = "metadata.json";
/// Environment variable naming the directory of converted pretrained weights.
pub const WEIGHTS_ENV: &str = "STONECRACK_WEIGHTS";
pub const CANONICAL_ORDER: [Label; 2] = [Label::NoCrack, Label::Crack];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    /// Frozen pretrained backbone, only the head learns.
    Transfer,
    /// Every parameter learns.
    Scratch,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transfer" => Ok(Regime::Transfer),
            "scratch" => Ok(Regime::Scratch),
            _ => Err(Error::Config(format!("unknown regime `{s}` (transfer|scratch)"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Transfer => "transfer",
            Regime::Scratch => "scratch",
        })
    }
}

/// Dense layer from pooled features to two logits.
#[derive(Debug, Clone)]
pub struct DenseHead<T> {
    pub params: ParamStore<T>,
    kernel: ParamId,
    bias: ParamId,
}

impl<T: Scalar> DenseHead<T> {
    /// Uniform in ±1/sqrt(fan_in), bias included.
    pub fn new(features: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = 1.0 / (features as f64).sqrt();
        let mut draw = || lit::<T>(rng.random_range(-limit..limit));
        let k = ArrayD::from_shape_simple_fn(IxDyn(&[features, 2]), &mut draw);
        let b = ArrayD::from_shape_simple_fn(IxDyn(&[2]), &mut draw);
        let mut params = ParamStore::new();
        let kernel = params.insert("head/kernel", k, ParamRole::Weight);
        let bias = params.insert("head/bias", b, ParamRole::Weight);
        Self { params, kernel, bias }
    }

    pub fn kernel(&self) -> Array2<T> {
        self.params.value(self.kernel).clone().into_dimensionality::<Ix2>().expect("rank 2")
    }

    pub fn bias(&self) -> Array1<T> {
        self.params.value(self.bias).clone().into_dimensionality::<Ix1>().expect("rank 1")
    }

    pub fn features(&self) -> usize {
        self.params.value(self.kernel).shape()[0]
    }

    pub fn logits(&self, pooled: &Array2<T>) -> Array2<T> {
        pooled.dot(&self.kernel()) + &self.bias()
    }

    /// Accumulates head gradients and returns the gradient for `pooled`.
    pub fn backward(&self, pooled: &Array2<T>, dlogits: &Array2<T>, grads: &mut Grads<T>) -> Array2<T> {
        grads.accumulate(self.kernel, pooled.t().dot(dlogits).into_dyn());
        grads.accumulate(self.bias, dlogits.sum_axis(Axis(0)).into_dyn());
        dlogits.dot(&self.kernel().t())
    }
}

/// Per-sample output of [`ClassifierModel::predict`]; class-indexed values
/// are in canonical `[NoCrack, Crack]` order regardless of the head layout.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub probs: [T; 2],
    pub label: Label,
    /// Pre-pool activations, `[H', W', C]`.
    pub feature_maps: Array3<T>,
    /// `[C, 2]`
    pub head_weights: Array2<T>,
    pub head_bias: [T; 2],
}

impl<T: Scalar> Prediction<T> {
    pub fn prob_crack(&self) -> T {
        self.probs[Label::Crack.index()]
    }
}

/// Ties go to Crack.
pub fn decide<T: Scalar>(probs: [T; 2]) -> Label {
    if probs[Label::Crack.index()] >= probs[Label::NoCrack.index()] {
        Label::Crack
    } else {
        Label::NoCrack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub regime: Regime,
    pub pretrained: bool,
    /// Directory holding `<Backbone>.safetensors` exported from Keras; falls
    /// back to `$STONECRACK_WEIGHTS`.
    pub weights_dir: Option<PathBuf>,
    pub seed: u64,
    pub zoo: ZooOptions,
    pub sample_wise: bool,
}

impl BuildOptions {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            pretrained: regime == Regime::Transfer,
            weights_dir: None,
            seed: 0,
            zoo: ZooOptions::default(),
            sample_wise: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel<T> {
    backbone_kind: Backbone,
    zoo: ZooOptions,
    pub backbone: crate::nn::Graph<T>,
    pub head: DenseHead<T>,
    regime: Regime,
    preprocessor: Preprocessor,
    class_order: [Label; 2],
    seed: u64,
    pretrained: bool,
    pub training_config_digest: Option<String>,
}

fn weights_path(backbone: Backbone, dir: Option<&Path>) -> Result<PathBuf> {
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(WEIGHTS_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::WeightsUnavailable {
                backbone: backbone.name().into(),
                reason: format!(
                    "no weights directory given and ${WEIGHTS_ENV} is unset; export them with tools/export_keras.py"
                ),
            })?,
    };
    let path = dir.join(format!("{}.safetensors", backbone.name()));
    if !path.is_file() {
        return Err(Error::WeightsUnavailable {
            backbone: backbone.name().into(),
            reason: format!("{} not found", path.display()),
        });
    }
    Ok(path)
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn build(backbone: Backbone, opts: &BuildOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut graph = zoo::build_backbone::<T>(backbone, opts.zoo, &mut rng)?;
        if opts.pretrained {
            if !opts.zoo.is_reference() {
                return Err(Error::Config("pretrained weights require width 1.0".into()));
            }
            let path = weights_path(backbone, opts.weights_dir.as_deref())?;
            zoo::keras::load_keras_weights(&mut graph, &path)?;
        } else if opts.regime == Regime::Transfer {
            log::warn!("transfer regime with randomly initialized {backbone}: the frozen features are random");
        }
        graph.params.set_frozen(opts.regime == Regime::Transfer);
        let mut head_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        head_rng.set_stream(1);
        let head = DenseHead::new(graph.out_channels(), &mut head_rng);
        Ok(Self {
            backbone_kind: backbone,
            zoo: opts.zoo,
            backbone: graph,
            head,
            regime: opts.regime,
            preprocessor: Preprocessor {
                mode: backbone.spec().preprocess,
                sample_wise: opts.sample_wise,
            },
            class_order: CANONICAL_ORDER,
            seed: opts.seed,
            pretrained: opts.pretrained,
            training_config_digest: None,
        })
    }

    pub fn backbone_kind(&self) -> Backbone {
        self.backbone_kind
    }

    pub fn zoo_options(&self) -> ZooOptions {
        self.zoo
    }

    pub fn input_size(&self) -> usize {
        self.zoo.input_size
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn preprocessor(&self) -> Preprocessor {
        self.preprocessor
    }

    pub fn class_order(&self) -> [Label; 2] {
        self.class_order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Head output index that scores `label`.
    pub fn head_index(&self, label: Label) -> usize {
        self.class_order.iter().position(|&l| l == label).expect("class order covers both labels")
    }

    pub fn param_count(&self) -> usize {
        self.backbone.params.count() + self.head.params.count()
    }

    pub fn trainable_count(&self) -> usize {
        self.backbone.params.trainable_count() + self.head.params.trainable_count()
    }

    /// Trainable parameters of the head alone: `C * 2 + 2`.
    pub fn head_param_count(&self) -> usize {
        self.head.features() * 2 + 2
    }

    /// Backbone activations for an NCHW batch, `[N, C, H', W']`.
    pub fn features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.forward(batch)
    }

    /// Head-order probabilities for a preprocessed NCHW batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Array2<T>> {
        let f = self.features(batch)?;
        Ok(softmax(&self.head.logits(&pool(&f))))
    }

    fn to_canonical(&self, v: [T; 2]) -> [T; 2] {
        let mut out = [T::zero(); 2];
        for (i, label) in self.class_order.iter().enumerate() {
            out[label.index()] = v[i];
        }
        out
    }

    /// Classifies a batch preprocessed with `mode`, which must be the mode
    /// the model was built for.
    pub fn predict(&self, batch: &Tensor<T>, mode: PreprocessMode) -> Result<Vec<Prediction<T>>> {
        if mode != self.preprocessor.mode {
            return Err(Error::Precondition(format!(
                "input preprocessed as {mode:?} but the model expects {:?}",
                self.preprocessor.mode
            )));
        }
        let f = self.features(batch)?;
        let probs = softmax(&self.head.logits(&pool(&f)));
        let kernel = self.head.kernel();
        let bias = self.head.bias();
        let mut weights = Array2::<T>::zeros((kernel.nrows(), 2));
        for (i, label) in self.class_order.iter().enumerate() {
            weights.column_mut(label.index()).assign(&kernel.column(i));
        }
        let head_bias = self.to_canonical([bias[0], bias[1]]);
        Ok(f.axis_iter(Axis(0))
            .zip(probs.rows())
            .map(|(fm, p)| {
                let probs = self.to_canonical([p[0], p[1]]);
                Prediction {
                    probs,
                    label: decide(probs),
                    feature_maps: fm.permuted_axes([1, 2, 0]).as_standard_layout().into_owned(),
                    head_weights: weights.clone(),
                    head_bias,
                }
            })
            .collect())
    }

    /// Resizes (if needed), preprocesses and classifies RGB images.
    pub fn predict_images(&self, images: &[image::RgbImage]) -> Result<Vec<Prediction<T>>> {
        let batch = self.prepare_batch(images)?;
        self.predict(&batch, self.preprocessor.mode)
    }

    pub fn prepare_batch(&self, images: &[image::RgbImage]) -> Result<Tensor<T>> {
        let size = self.input_size() as u32;
        let arrays = images
            .iter()
            .map(|img| {
                let img = crate::dataset::resize_to(img, size);
                self.preprocessor.apply::<T>(crate::dataset::image_to_array(&img).view())
            })
            .collect::<Result<Vec<_>>>()?;
        crate::preprocess::to_batch(&arrays)
    }

    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            format_version: 1,
            backbone: self.backbone_kind,
            width: self.zoo.width,
            input_size: self.zoo.input_size,
            preprocess_mode: self.preprocessor.mode,
            preprocess_sample_wise: self.preprocessor.sample_wise,
            preprocess_constants: self.preprocessor.constants(),
            regime: self.regime,
            pretrained: self.pretrained,
            class_order: self.class_order,
            head_bias: true,
            seed: self.seed,
            training_config_digest: self.training_config_digest.clone(),
            created_at: Utc::now(),
            dtype: T::DTYPE_NAME.into(),
            weights_sha256: String::new(),
        }
    }

    /// Writes `weights.safetensors` and `metadata.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<ModelMetadata> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stores = [&self.backbone.params, &self.head.params];
        let mut buffers = Vec::new();
        for store in stores {
            for (_, p) in store.iter() {
                let mut bytes = Vec::new();
                let v = p.value.as_standard_layout();
                T::write_le(v.as_slice().expect("standard layout"), &mut bytes);
                buffers.push((p.name.clone(), p.value.shape().to_vec(), bytes));
            }
        }
        let views = buffers
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(T::DTYPE, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::artifact(dir, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let blob = safetensors::serialize(views, None).map_err(|e| Error::artifact(dir, e.to_string()))?;
        let weights = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
        let mut meta = self.metadata();
        meta.weights_sha256 = hex::encode(Sha256::digest(&blob));
        let meta_path = dir.join(METADATA_FILE);
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        Ok(meta)
    }

    /// Reads an artifact written by [`save`](Self::save). Refuses artifacts
    /// whose weights do not match their metadata.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let raw = std::fs::read(&meta_path).map_err(|_| Error::artifact(dir, "metadata.json missing"))?;
        let meta: ModelMetadata =
            serde_json::from_slice(&raw).map_err(|e| Error::artifact(dir, format!("bad metadata.json: {e}")))?;
        let weights = dir.join(WEIGHTS_FILE);
        let blob = std::fs::read(&weights).map_err(|_| Error::artifact(dir, "weights.safetensors missing"))?;
        if hex::encode(Sha256::digest(&blob)) != meta.weights_sha256 {
            return Err(Error::artifact(dir, "weights checksum does not match metadata"));
        }
        let mut order = meta.class_order;
        order.sort_by_key(|l| l.index());
        if order != CANONICAL_ORDER {
            return Err(Error::artifact(dir, "class_order must list NoCrack and Crack once each"));
        }
        let opts = BuildOptions {
            regime: meta.regime,
            pretrained: false,
            weights_dir: None,
            seed: meta.seed,
            zoo: ZooOptions {
                width: meta.width,
                input_size: meta.input_size,
            },
            sample_wise: meta.preprocess_sample_wise,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut graph = zoo::build_backbone::<T>(meta.backbone, opts.zoo, &mut rng)?;
        let st = SafeTensors::deserialize(&blob).map_err(|e| Error::artifact(dir, e.to_string()))?;
        let mut head = DenseHead::new(graph.out_channels(), &mut rng);
        let expected = graph.params.len() + head.params.len();
        if st.len() != expected {
            return Err(Error::artifact(
                dir,
                format!("weights hold {} tensors, architecture has {expected}", st.len()),
            ));
        }
        fill_store(&mut graph.params, &st, dir)?;
        fill_store(&mut head.params, &st, dir)?;
        graph.params.set_frozen(meta.regime == Regime::Transfer);
        let preprocessor = Preprocessor {
            mode: meta.preprocess_mode,
            sample_wise: meta.preprocess_sample_wise,
        };
        if !preprocessor.constants().matches(&meta.preprocess_constants) {
            return Err(Error::artifact(
                dir,
                "recorded preprocessing constants differ from this build's",
            ));
        }
        Ok(Self {
            backbone_kind: meta.backbone,
            zoo: opts.zoo,
            backbone: graph,
            head,
            regime: meta.regime,
            preprocessor,
            class_order: meta.class_order,
            seed: meta.seed,
            pretrained: meta.pretrained,
            training_config_digest: meta.training_config_digest,
        })
    }
}

fn fill_store<T: Scalar>(store: &mut ParamStore<T>, st: &SafeTensors<'_>, dir: &Path) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::artifact(dir, format!("tensor {name} missing")))?;
        let value = zoo::keras::decode::<T>(&name, &view)?;
        if value.shape() != store.value(id).shape() {
            return Err(Error::artifact(
                dir,
                format!("{name}: stored {:?}, expected {:?}", value.shape(), store.value(id).shape()),
            ));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

/// Global average over space: `[N, C, H, W]` to `[N, C]`.
pub fn pool<T: Scalar>(f: &Tensor<T>) -> Array2<T> {
    let (_, _, h, w) = f.dim();
    let inv = T::one() / lit::<T>((h * w) as f64);
    f.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * inv)
}

/// Gradient of [`pool`], spread evenly back over space.
pub fn pool_backward<T: Scalar>(dpooled: &Array2<T>, dims: (usize, usize, usize, usize)) -> Tensor<T> {
    let (n, c, h, w) = dims;
    let inv = T::one() / lit::<T>((h * w) as f64);
    let mut out = Tensor::<T>::zeros((n, c, h, w));
    for ((i, j), &g) in dpooled.indexed_iter() {
        out.slice_mut(ndarray::s![i, j, .., ..]).fill(g * inv);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub backbone: Backbone,
    pub width: f64,
    pub input_size: usize,
    pub preprocess_mode: PreprocessMode,
    pub preprocess_sample_wise: bool,
    pub preprocess_constants: PreprocessConstants,
    pub regime: Regime,
    pub pretrained: bool,
    pub class_order: [Label; 2],
    pub head_bias: bool,
    pub seed: u64,
    pub training_config_digest: Option<String>,
    pub created_at: DateTime<Utc>,
    pub dtype: String,
    pub weights_sha256: String,
}

/// Hex SHA-256 of a serializable value's JSON form.
pub fn digest_of<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}
