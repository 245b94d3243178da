use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use super::TensorError;
use crate::geometry::{Pose, Quat, Vec3};
use crate::scene::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    MaxPool { window: usize },
    Flatten,
    Linear { out_features: usize },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv { out_channels, kernel, stride, padding: 0 }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerSpec::Linear { out_features }
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }
}

/// Per-item activation shape while walking a layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    fn dims(self) -> Vec<usize> {
        match self {
            Shape::Map { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
        }
    }

    fn len(self) -> usize {
        self.dims().iter().product()
    }
}

/// Siamese wiring: a shared extractor and channel reduction applied to each
/// image, then flatten, concatenation (A first) and the classifier stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub extractor: Vec<LayerSpec>,
    pub reduction: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
    /// Pixel standardization `(p - mean) / std` applied to every input image.
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
    /// Fixed per-output factors applied to the classifier output. Lets the
    /// translation outputs work in coarser units than meters.
    #[serde(default)]
    pub output_scale: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

pub const OUTPUTS: usize = 7;

impl NetworkSpec {
    /// The 64×64 desk network.
    pub fn desk() -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input_channels: 1,
            input_height: 64,
            input_width: 64,
            extractor: vec![
                LayerSpec::conv(8, 5, 2),
                Relu,
                MaxPool { window: 2 },
                LayerSpec::conv(16, 3, 1),
                Relu,
                MaxPool { window: 2 },
                LayerSpec::conv(32, 3, 1),
                Relu,
            ],
            reduction: vec![LayerSpec::conv(12, 1, 1), Relu],
            classifier: [256, 128, 64, 64, 32, 16]
                .into_iter()
                .flat_map(|n| [LayerSpec::linear(n), Relu])
                .chain([LayerSpec::linear(OUTPUTS)])
                .collect(),
            input_norm: Some(InputNorm { mean: 0.5, std: 0.25 }),
            output_scale: None,
        }
    }

    fn walk(stage: &'static str, layers: &[LayerSpec], mut s: Shape) -> Result<Shape, TensorError> {
        let bad = |i: usize, what: String| TensorError::Spec(format!("{stage} layer {i}: {what}"));
        for (i, l) in layers.iter().enumerate() {
            s = match (*l, s) {
                (LayerSpec::Conv { out_channels, kernel, stride, padding }, Shape::Map { h, w, .. }) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "convolution extents must be positive".into()));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(bad(i, format!("kernel {kernel} exceeds {h}x{w} input")));
                    }
                    Shape::Map {
                        c: out_channels,
                        h: (h + 2 * padding - kernel) / stride + 1,
                        w: (w + 2 * padding - kernel) / stride + 1,
                    }
                }
                (LayerSpec::MaxPool { window }, Shape::Map { c, h, w }) => {
                    if window == 0 || h < window || w < window {
                        return Err(bad(i, format!("pool window {window} does not fit {h}x{w}")));
                    }
                    Shape::Map { c, h: h / window, w: w / window }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => Shape::Flat(s.len()),
                (LayerSpec::Linear { out_features }, Shape::Flat(_)) if out_features > 0 => Shape::Flat(out_features),
                (l, s) => return Err(bad(i, format!("{l:?} cannot follow shape {:?}", s.dims()))),
            };
        }
        Ok(s)
    }

    /// Reduced per-image feature map shape `[C, H, W]`.
    pub fn feature_shape(&self) -> Result<Vec<usize>, TensorError> {
        let input = Shape::Map { c: self.input_channels, h: self.input_height, w: self.input_width };
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(TensorError::Spec("input extents must be positive".into()));
        }
        let e = Self::walk("extractor", &self.extractor, input)?;
        let r = Self::walk("reduction", &self.reduction, e)?;
        match r {
            Shape::Map { .. } => Ok(r.dims()),
            Shape::Flat(_) => Err(TensorError::Spec("extractor and reduction must keep spatial maps".into())),
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let f: usize = self.feature_shape()?.iter().product();
        if !self.reduction.iter().all(|l| matches!(l, LayerSpec::Relu | LayerSpec::Conv { kernel: 1, .. })) {
            return Err(TensorError::Spec("channel reduction must use 1x1 convolutions".into()));
        }
        if self.classifier.iter().any(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. })) {
            return Err(TensorError::Spec("classifier takes flat features".into()));
        }
        if let Some(n) = &self.input_norm {
            if !(n.mean.is_finite() && n.std.is_finite() && n.std > 0.0) {
                return Err(TensorError::Spec("input normalization needs a finite mean and positive std".into()));
            }
        }
        if let Some(k) = &self.output_scale {
            if k.len() != OUTPUTS || !k.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(TensorError::Spec(format!("output_scale needs {OUTPUTS} positive factors")));
            }
        }
        match Self::walk("classifier", &self.classifier, Shape::Flat(2 * f))? {
            Shape::Flat(OUTPUTS) => Ok(()),
            s => Err(TensorError::Spec(format!("classifier must end in {OUTPUTS} outputs, got {:?}", s.dims()))),
        }
    }

    /// Weight shapes in parameter order, with fan-in.
    fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>, usize)>, TensorError> {
        self.validate()?;
        let mut out = Vec::new();
        let mut s = Shape::Map { c: self.input_channels, h: self.input_height, w: self.input_width };
        let feat: usize = self.feature_shape()?.iter().product();
        for (stage, layers) in [("extractor", &self.extractor), ("reduction", &self.reduction), ("classifier", &self.classifier)] {
            if stage == "classifier" {
                s = Shape::Flat(2 * feat);
            }
            for (i, l) in layers.iter().enumerate() {
                match (*l, s) {
                    (LayerSpec::Conv { out_channels, kernel, .. }, Shape::Map { c, .. }) => {
                        out.push((format!("{stage}.{i}.weight"), vec![out_channels, c, kernel, kernel], c * kernel * kernel));
                        out.push((format!("{stage}.{i}.bias"), vec![out_channels], 0));
                    }
                    (LayerSpec::Linear { out_features }, Shape::Flat(n)) => {
                        out.push((format!("{stage}.{i}.weight"), vec![out_features, n], n));
                        out.push((format!("{stage}.{i}.bias"), vec![out_features], 0));
                    }
                    _ => {}
                }
                s = Self::walk(stage, std::slice::from_ref(l), s)?;
            }
        }
        Ok(out)
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn parameter_layout(&self) -> Result<Vec<(String, Vec<usize>)>, TensorError> {
        Ok(self.param_shapes()?.into_iter().map(|(n, s, _)| (n, s)).collect())
    }
}

/// Weights uniform on `±1/√fan_in`, biases zero.
pub fn init_uniform(spec: &NetworkSpec, seed: u64) -> Result<ParamStore, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for (name, shape, fan_in) in spec.param_shapes()? {
        let n: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
        };
        store.push(name, Tensor { shape, data });
    }
    Ok(store)
}

/// Network output: translation in meters and the raw quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub t: Vec3,
    pub q: [f64; 4],
}

impl Prediction {
    pub fn from_slice(v: &[f64]) -> Self {
        Prediction { t: Vec3::new(v[0], v[1], v[2]), q: [v[3], v[4], v[5], v[6]] }
    }

    pub fn to_array(self) -> [f64; 7] {
        [self.t.x, self.t.y, self.t.z, self.q[0], self.q[1], self.q[2], self.q[3]]
    }

    /// The estimate as a valid pose: quaternion normalized and sign-canonical.
    /// A vanishing quaternion is read as no rotation.
    pub fn to_pose(self) -> Pose {
        let q = Quat::from_array(self.q);
        let rotation = if q.norm() > 1e-12 && q.norm().is_finite() { q.normalize() } else { Quat::IDENTITY };
        Pose::new(rotation, self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    None,
    Params(ParamId, ParamId),
}

/// Parameter nodes bound on one tape, shared by both branches.
pub struct Bound {
    extractor: Vec<Option<(Var, Var)>>,
    reduction: Vec<Option<(Var, Var)>>,
    classifier: Vec<Option<(Var, Var)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    slots: [Vec<Slot>; 3],
}

/// Items per forward chunk; fixed so results do not depend on thread count.
pub const CHUNK: usize = 8;

impl SiameseModel {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, TensorError> {
        let params = init_uniform(&spec, seed)?;
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: NetworkSpec, params: ParamStore) -> Result<Self, TensorError> {
        let layout = spec.parameter_layout()?;
        if layout.len() != params.len() {
            return Err(TensorError::Spec(format!("spec has {} parameter tensors, store has {}", layout.len(), params.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&params.tensors) {
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(TensorError::Spec(format!("{name}: expected shape {shape:?}, got {:?}", t.shape)));
            }
        }
        let mut next = 0;
        let mut slots_for = |layers: &[LayerSpec]| -> Vec<Slot> {
            layers
                .iter()
                .map(|l| {
                    if l.has_params() {
                        next += 2;
                        Slot::Params(ParamId(next - 2), ParamId(next - 1))
                    } else {
                        Slot::None
                    }
                })
                .collect()
        };
        let slots = [slots_for(&spec.extractor), slots_for(&spec.reduction), slots_for(&spec.classifier)];
        Ok(SiameseModel { spec, params, slots })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut bind = |s: &[Slot]| -> Vec<Option<(Var, Var)>> {
            s.iter()
                .map(|slot| match slot {
                    Slot::Params(w, b) => Some((tape.param(*w), tape.param(*b))),
                    Slot::None => None,
                })
                .collect()
        };
        Bound { extractor: bind(&self.slots[0]), reduction: bind(&self.slots[1]), classifier: bind(&self.slots[2]) }
    }

    fn run(tape: &mut Tape, layers: &[LayerSpec], vars: &[Option<(Var, Var)>], mut x: Var) -> Result<Var, TensorError> {
        for (l, v) in layers.iter().zip(vars) {
            x = match (*l, *v) {
                (LayerSpec::Conv { stride, padding, .. }, Some((w, b))) => tape.conv2d(x, w, b, stride, padding)?,
                (LayerSpec::Linear { .. }, Some((w, b))) => tape.linear(x, w, b)?,
                (LayerSpec::Relu, _) => tape.relu(x),
                (LayerSpec::MaxPool { window }, _) => tape.maxpool(x, window)?,
                (LayerSpec::Flatten, _) => tape.flatten(x),
                _ => unreachable!("slots are built from the same layer list"),
            };
        }
        Ok(x)
    }

    /// Extractor followed by channel reduction: `[N, C, H, W]` → reduced map.
    pub fn extract(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        let e = Self::run(tape, &self.spec.extractor, &bound.extractor, x)?;
        Self::run(tape, &self.spec.reduction, &bound.reduction, e)
    }

    /// Flatten both feature maps, concatenate A then B, run the classifier.
    pub fn head(&self, tape: &mut Tape, bound: &Bound, fa: Var, fb: Var) -> Result<Var, TensorError> {
        let (a, b) = (tape.flatten(fa), tape.flatten(fb));
        let joined = tape.concat(a, b)?;
        let out = Self::run(tape, &self.spec.classifier, &bound.classifier, joined)?;
        match &self.spec.output_scale {
            Some(k) => tape.scale_columns(out, k),
            None => Ok(out),
        }
    }

    /// Stacks images into an input batch, checking resolution.
    pub fn image_batch(&self, images: &[&Image]) -> Result<Tensor, TensorError> {
        let (h, w) = (self.spec.input_height, self.spec.input_width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.width != w || img.height != h || self.spec.input_channels != 1 {
                return Err(TensorError::Shape {
                    op: "image input",
                    expected: format!("[{}, {h}, {w}]", self.spec.input_channels),
                    actual: vec![1, img.height, img.width],
                });
            }
            data.extend_from_slice(&img.pixels);
        }
        if let Some(n) = self.spec.input_norm {
            data.iter_mut().for_each(|p| *p = (*p - n.mean) / n.std);
        }
        Ok(Tensor { shape: vec![images.len(), 1, h, w], data })
    }

    /// Reduced feature map of each image, computed in fixed-size chunks.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Tensor>, TensorError> {
        let chunks: Vec<Result<Vec<Tensor>, TensorError>> = images
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new(&self.params);
                let bound = self.bind(&mut tape);
                let x = tape.input(self.image_batch(chunk)?, false);
                let f = self.extract(&mut tape, &bound, x)?;
                let t = tape.value(f);
                let item_shape = t.shape[1..].to_vec();
                Ok((0..t.batch()).map(|n| Tensor { shape: item_shape.clone(), data: t.item(n).to_vec() }).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Classifier output for pairs of precomputed feature maps.
    pub fn predict_features(&self, pairs: &[(&Tensor, &Tensor)]) -> Result<Vec<Prediction>, TensorError> {
        let stack = |items: &mut dyn Iterator<Item = &Tensor>, n: usize| -> Result<Tensor, TensorError> {
            let mut data = Vec::new();
            let mut shape = None;
            for t in items {
                shape.get_or_insert_with(|| t.shape.clone());
                data.extend_from_slice(&t.data);
            }
            let mut s = vec![n];
            s.extend(shape.unwrap_or_default());
            Tensor::new(s, data)
        };
        let chunks: Vec<Result<Vec<Prediction>, TensorError>> = pairs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new(&self.params);
                let bound = self.bind(&mut tape);
                let a = stack(&mut chunk.iter().map(|p| p.0), chunk.len())?;
                let b = stack(&mut chunk.iter().map(|p| p.1), chunk.len())?;
                let (fa, fb) = (tape.input(a, false), tape.input(b, false));
                let out = self.head(&mut tape, &bound, fa, fb)?;
                let t = tape.value(out);
                Ok((0..t.batch()).map(|n| Prediction::from_slice(t.item(n))).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn predict(&self, image_a: &Image, image_b: &Image) -> Result<Prediction, TensorError> {
        let f = self.features(&[image_a, image_b])?;
        Ok(self.predict_features(&[(&f[0], &f[1])])?[0])
    }
}

/// Runs both images through the shared extractor and the classifier.
pub fn siamese_forward(model: &SiameseModel, image_a: &Image, image_b: &Image) -> Result<Prediction, TensorError> {
    model.predict(image_a, image_b)
}
