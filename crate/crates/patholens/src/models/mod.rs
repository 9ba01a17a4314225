//! Backbone registry, model construction and checkpoint persistence.
//!
//! Eight transfer-learning backbones plus `TinyTestNet`, a ~50k-parameter
//! three-block network used by the test suite and desk-scale runs. Every
//! model exposes the name of its target layer: the last node producing a
//! spatial activation grid, where the CAM methods read activations and
//! gradients.

mod backbones;
mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::config::defaults;
use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::nn::{Graph, Shape};
use crate::preprocess::{ImageTensor, ValueRange};
use ndarray::{Array1, Array2, Array4};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneId {
    Xception,
    DenseNet201,
    ResNet101,
    InceptionV3,
    DenseNet121,
    DenseNet169,
    ResNet152,
    InceptionResNetV2,
    /// Small fixture backbone: 3 conv blocks, two stride-2 stages, 8 final
    /// channels.
    TinyTestNet,
}

impl BackboneId {
    pub const ALL: [BackboneId; 9] = [
        BackboneId::Xception,
        BackboneId::DenseNet201,
        BackboneId::ResNet101,
        BackboneId::InceptionV3,
        BackboneId::DenseNet121,
        BackboneId::DenseNet169,
        BackboneId::ResNet152,
        BackboneId::InceptionResNetV2,
        BackboneId::TinyTestNet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BackboneId::Xception => "Xception",
            BackboneId::DenseNet201 => "DenseNet201",
            BackboneId::ResNet101 => "ResNet101",
            BackboneId::InceptionV3 => "InceptionV3",
            BackboneId::DenseNet121 => "DenseNet121",
            BackboneId::DenseNet169 => "DenseNet169",
            BackboneId::ResNet152 => "ResNet152",
            BackboneId::InceptionResNetV2 => "InceptionResNetV2",
            BackboneId::TinyTestNet => "TinyTestNet",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = BackboneId::ALL.iter().map(|b| b.name()).collect();
                Error::Model(format!(
                    "unknown backbone {s:?}; valid names: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Construction options for [`build_model`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub pretrained: bool,
    /// Weight-initialization seed when not pretrained.
    pub seed: u64,
    /// Override of the backbone's default input size.
    pub input_size: Option<(usize, usize)>,
    /// Directory of converted pretrained checkpoints (`<Backbone>.ckpt`).
    pub pretrained_dir: Option<PathBuf>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { pretrained: false, seed: defaults::SEED, input_size: None, pretrained_dir: None }
    }
}

/// A backbone plus classification head with named feature layers.
#[derive(Debug)]
pub struct TrainedModel {
    pub backbone: BackboneId,
    pub graph: Graph,
    pub class_order: Vec<ClassLabel>,
    pub input_size: (usize, usize),
    pub target_layer: String,
    forward_count: AtomicU64,
}

impl Clone for TrainedModel {
    fn clone(&self) -> Self {
        TrainedModel {
            backbone: self.backbone,
            graph: self.graph.clone(),
            class_order: self.class_order.clone(),
            input_size: self.input_size,
            target_layer: self.target_layer.clone(),
            forward_count: AtomicU64::new(0),
        }
    }
}

/// Last node in topological order whose output has spatial extent > 1x1.
pub fn resolve_target_layer(graph: &Graph, input_size: (usize, usize)) -> Result<String> {
    let shapes = graph.infer_shapes(input_size)?;
    graph
        .nodes()
        .iter()
        .zip(&shapes)
        .rev()
        .find_map(|(node, shape)| match shape {
            Shape::Spatial { h, w, .. } if h * w > 1 => Some(node.name.clone()),
            _ => None,
        })
        .ok_or_else(|| {
            Error::Model("no layer with spatial extent > 1x1; input too small".into())
        })
}

/// Build a registry model with a fresh `num_classes`-way head.
///
/// With `pretrained` set, a converted checkpoint is loaded from
/// `pretrained_dir` (or `$PATHOLENS_PRETRAINED_DIR`); no weights ship with
/// this crate, so an absent checkpoint is an explicit error. Without it, the
/// whole network is seeded-random initialized.
pub fn build_model(backbone: BackboneId, num_classes: usize, opts: &BuildOptions) -> Result<TrainedModel> {
    if num_classes < 2 {
        return Err(Error::Model(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let input_size = opts.input_size.unwrap_or(defaults::input_size_for(backbone));

    if opts.pretrained {
        let dir = opts
            .pretrained_dir
            .clone()
            .or_else(|| std::env::var_os("PATHOLENS_PRETRAINED_DIR").map(PathBuf::from));
        let candidate = dir.as_ref().map(|d| d.join(format!("{}.ckpt", backbone.name())));
        match candidate {
            Some(path) if path.is_file() => {
                let model = load_checkpoint(&path, Some(backbone))?;
                if model.num_classes() != num_classes {
                    return Err(Error::Model(format!(
                        "pretrained checkpoint has {} classes, experiment needs {num_classes}",
                        model.num_classes()
                    )));
                }
                return Ok(model);
            }
            _ => {
                let looked = candidate
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "<no pretrained_dir configured>".to_string());
                return Err(Error::Model(format!(
                    "pretrained weights for {backbone} are not available offline (looked for {looked}); \
                     either place a converted checkpoint there (set [model].pretrained_dir or \
                     PATHOLENS_PRETRAINED_DIR) or set [model].pretrained = false to train from \
                     seeded random initialization"
                )));
            }
        }
    }

    let mut graph = backbones::build_graph(backbone, num_classes)?;
    graph.init_seeded(opts.seed);
    // Validates the whole graph against the input size.
    let target_layer = resolve_target_layer(&graph, input_size)?;
    let class_order = (0..num_classes)
        .map(|index| ClassLabel { name: format!("class_{index}"), index })
        .collect();
    Ok(TrainedModel {
        backbone,
        graph,
        class_order,
        input_size,
        target_layer,
        forward_count: AtomicU64::new(0),
    })
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        self.graph.num_outputs()
    }

    /// Adopt the class order of a manifest; lengths must agree.
    pub fn set_class_order(&mut self, classes: Vec<ClassLabel>) -> Result<()> {
        if classes.len() != self.num_classes() {
            return Err(Error::Model(format!(
                "class order has {} entries, model head has {}",
                classes.len(),
                self.num_classes()
            )));
        }
        self.class_order = classes;
        Ok(())
    }

    /// Number of single-image forward passes performed so far.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn note_forward(&self, n: usize) {
        self.forward_count.fetch_add(n as u64, Ordering::Relaxed);
    }

    /// Stack unit-range images into an NCHW batch, validating dimensions.
    pub fn image_batch(&self, images: &[&ImageTensor]) -> Result<Array4<f64>> {
        let (ih, iw) = self.input_size;
        let mut batch = Array4::zeros((images.len(), 3, ih, iw));
        for (ni, img) in images.iter().enumerate() {
            if img.range != ValueRange::Unit {
                return Err(Error::Model("model inputs must be unit-range images".into()));
            }
            if img.dims() != (ih, iw) {
                return Err(Error::Model(format!(
                    "wrong input dims: expected {ih}x{iw}, got {}x{}",
                    img.dims().0,
                    img.dims().1
                )));
            }
            for y in 0..ih {
                for x in 0..iw {
                    for c in 0..3 {
                        batch[[ni, c, y, x]] = img.data[[y, x, c]];
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Inference-mode logits for an NCHW batch.
    pub fn forward_logits(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        self.note_forward(batch.dim().0);
        Ok(self.graph.forward_infer(batch, false)?.logits)
    }

    /// Row-wise softmax probabilities for a batch of images.
    pub fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Array2<f64>> {
        let batch = self.image_batch(images)?;
        let logits = self.forward_logits(&batch)?;
        Ok(softmax_rows(&logits))
    }

    /// Argmax class per image (ties resolve to the lowest index).
    pub fn predict_labels(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        let proba = self.predict_proba(images)?;
        Ok(proba.outer_iter().map(|row| argmax(&row.to_owned())).collect())
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn argmax(row: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_input_image(size: (usize, usize), seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((size.0, size.1, 3), |_| rng.random_range(0.0..1.0));
        ImageTensor::new(data, ValueRange::Unit).unwrap()
    }

    #[test]
    fn registry_accepts_exactly_the_known_names() {
        for id in BackboneId::ALL {
            assert_eq!(id.name().parse::<BackboneId>().unwrap(), id);
            assert_eq!(id.name().to_lowercase().parse::<BackboneId>().unwrap(), id);
        }
        let err = "VGG16".parse::<BackboneId>().unwrap_err().to_string();
        assert!(err.contains("Xception") && err.contains("InceptionResNetV2"), "{err}");
    }

    #[test]
    fn tiny_testnet_shape_trace() {
        // 32x32 input through two stride-2 stages with an 8-channel final
        // conv: the target layer must be an 8x8x8 grid.
        let model = build_model(BackboneId::TinyTestNet, 5, &BuildOptions::default()).unwrap();
        assert_eq!(model.target_layer, "features");
        let shapes = model.graph.infer_shapes(model.input_size).unwrap();
        let id = model.graph.node_id("features").unwrap();
        assert_eq!(shapes[id], Shape::Spatial { c: 8, h: 8, w: 8 });
    }

    #[test]
    fn tiny_testnet_parameter_count_is_about_50k() {
        let model = build_model(BackboneId::TinyTestNet, 5, &BuildOptions::default()).unwrap();
        let total: usize = model
            .graph
            .param_specs()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum();
        assert!((45_000..55_000).contains(&total), "got {total}");
    }

    #[test]
    fn same_seed_same_initial_logits() {
        let opts = BuildOptions { seed: 0, ..Default::default() };
        let a = build_model(BackboneId::TinyTestNet, 5, &opts).unwrap();
        let b = build_model(BackboneId::TinyTestNet, 5, &opts).unwrap();
        let img = random_input_image(a.input_size, 7);
        let la = a.predict_proba(&[&img]).unwrap();
        let lb = b.predict_proba(&[&img]).unwrap();
        assert_eq!(la, lb);
        let c = build_model(BackboneId::TinyTestNet, 5, &BuildOptions { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(la, c.predict_proba(&[&img]).unwrap());
    }

    #[test]
    fn probabilities_are_normalized() {
        let model = build_model(BackboneId::TinyTestNet, 5, &BuildOptions::default()).unwrap();
        for seed in 0..5 {
            let img = random_input_image(model.input_size, seed);
            let p = model.predict_proba(&[&img]).unwrap();
            assert_eq!(p.dim(), (1, 5));
            assert!((p.row(0).sum() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_logits_give_uniform_probabilities() {
        let mut model = build_model(BackboneId::TinyTestNet, 5, &BuildOptions::default()).unwrap();
        // Zero the head: logits become identically zero.
        model.graph.for_each_param_mut(&mut |name, values| {
            if name.starts_with("head.fc") {
                values.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let img = random_input_image(model.input_size, 3);
        let p = model.predict_proba(&[&img]).unwrap();
        for &v in p.row(0) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_dims_are_reported() {
        let model = build_model(BackboneId::TinyTestNet, 5, &BuildOptions::default()).unwrap();
        let img = random_input_image((16, 16), 0);
        let err = model.predict_proba(&[&img]).unwrap_err().to_string();
        assert!(err.contains("expected 32x32") && err.contains("16x16"), "{err}");
    }

    #[test]
    fn build_rejects_single_class() {
        assert!(build_model(BackboneId::TinyTestNet, 1, &BuildOptions::default()).is_err());
    }

    #[test]
    fn pretrained_unavailable_is_explicit() {
        let opts = BuildOptions { pretrained: true, ..Default::default() };
        let err = build_model(BackboneId::Xception, 5, &opts).unwrap_err().to_string();
        assert!(err.contains("pretrained = false"), "{err}");
    }
}
