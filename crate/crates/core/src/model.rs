//! Fully connected networks with analytic gradients.
//!
//! A model is a stack of dense layers. Every layer but the last applies a
//! smooth activation; the last one is linear and is treated as the
//! classifier. Everything before it is the feature extractor.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::loss::{segment_kl, softmax};
use crate::rng::{standard_normal, SimRng};
use crate::tensor::Tensor2;

/// Standard deviation of freshly widened classifier columns (variance 0.01).
pub const WIDEN_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Sigmoid),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation id {other}"))),
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    pub fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// `d slope / d a`, needed when differentiating through a backward pass.
    #[inline]
    pub fn slope_derivative(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 - 2.0 * a,
            Activation::Tanh => -2.0 * a,
        }
    }
}

/// One affine layer; `weights` is `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weights: Tensor2::zeros(input, output), bias: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weights.same_shape(&other.weights) && self.bias.len() == other.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Gradient tree, congruent with a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Dense>,
}

/// Mini-batch of inputs with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor2,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(dim_err(format!("{} inputs with {} labels", inputs.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `a_0 = inputs`, then the output of every hidden layer.
    pub activations: Vec<Tensor2>,
    /// What the classifier actually saw: the features plus an optional offset.
    pub classifier_input: Tensor2,
    pub logits: Tensor2,
    pub probs: Tensor2,
}

impl ForwardPass {
    /// Penultimate activations (before any feature offset).
    pub fn features(&self) -> &Tensor2 {
        self.activations.last().expect("at least the input activation")
    }
}

/// Which objective a backward pass differentiates.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    CrossEntropy,
    /// `ce_weight · CE + sd_weight · Σ_segments KL(softmax(segment) ‖ target segment)`.
    Composite {
        ce_weight: f64,
        sd_weight: f64,
        soft_targets: &'a Tensor2,
        segments: &'a [Range<usize>],
    },
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases. `dims = [input, hidden.., features, classes]`.
    pub fn new_random(dims: &[usize], activation: Activation, rng: &mut SimRng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weights: Tensor2::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    /// Xavier hidden layers with the classifier drawn like widened columns,
    /// `N(0, WIDEN_STD²)`, so an untrained model predicts close to uniform.
    pub fn new_classifier(dims: &[usize], activation: Activation, rng: &mut SimRng) -> Result<Self> {
        let mut m = Self::new_random(dims, activation, rng)?;
        let last = m.layers.last_mut().expect("non-empty");
        for w in last.weights.values_mut() {
            *w = WIDEN_STD * standard_normal(rng);
        }
        Ok(m)
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(dim_err("model without layers"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(dim_err(format!("layer {k}: bias {} vs width {}", l.bias.len(), l.output_dim())));
            }
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(dim_err(format!(
                    "layer widths do not chain: {} then {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier().input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier().output_dim()
    }

    pub fn classifier(&self) -> &Dense {
        self.layers.last().expect("non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn shape_matches(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Extends the classifier to `class_count` outputs. Existing weights are
    /// copied bit-exactly; new weights are `N(0, 0.01)` and new biases zero.
    pub fn widen(&self, class_count: usize, rng: &mut SimRng) -> Result<ModelParams> {
        let current = self.class_count();
        if class_count < current {
            return Err(Error::Contract(format!("cannot shrink classifier from {current} to {class_count}")));
        }
        let mut out = self.clone();
        let extra = class_count - current;
        if extra == 0 {
            return Ok(out);
        }
        let last = out.layers.last_mut().expect("non-empty");
        last.weights = last.weights.widen_cols(extra, |_, _| WIDEN_STD * standard_normal(rng));
        last.bias.extend(std::iter::repeat_n(0.0, extra));
        Ok(out)
    }

    pub fn forward(&self, inputs: &Tensor2) -> Result<ForwardPass> {
        self.forward_with_feature_offset(inputs, None)
    }

    /// Forward pass where `offset` is added to the features before the classifier.
    pub fn forward_with_feature_offset(
        &self,
        inputs: &Tensor2,
        offset: Option<&Tensor2>,
    ) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim() {
            return Err(dim_err(format!("input width {} for model expecting {}", inputs.cols(), self.input_dim())));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(inputs.clone());
        let (hidden, classifier) = self.layers.split_at(self.layers.len() - 1);
        for layer in hidden {
            let mut z = activations.last().unwrap().matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias)?;
            let act = self.activation;
            activations.push(z.map(|v| act.apply(v)));
        }
        let classifier_input = match offset {
            None => activations.last().unwrap().clone(),
            Some(off) => {
                let feats = activations.last().unwrap();
                if !off.same_shape(feats) {
                    return Err(dim_err("feature offset shape"));
                }
                Tensor2::from_fn(feats.rows(), feats.cols(), |i, j| feats.get(i, j) + off.get(i, j))
            }
        };
        let logits = classify(&classifier[0], &classifier_input)?;
        let probs = softmax_rows(&logits);
        Ok(ForwardPass { activations, classifier_input, logits, probs })
    }

    /// Logits of the classifier alone applied to `features`.
    pub fn classify_features(&self, features: &Tensor2) -> Result<Tensor2> {
        classify(self.classifier(), features)
    }

    /// Backpropagates `dlogits` (∂loss/∂logits) through a cached pass.
    /// Returns parameter gradients and the gradient with respect to the inputs.
    pub fn backprop(&self, pass: &ForwardPass, dlogits: &Tensor2) -> Result<(ParamGrads, Tensor2)> {
        let k = self.layers.len();
        let mut grads = vec![Dense::zeros(0, 0); k];
        let last = &self.layers[k - 1];
        grads[k - 1] = Dense { weights: pass.classifier_input.t_matmul(dlogits)?, bias: dlogits.sum_rows() };
        let mut delta = dlogits.matmul_t(&last.weights)?;
        for idx in (0..k - 1).rev() {
            let a = &pass.activations[idx + 1];
            let act = self.activation;
            for (d, &av) in delta.values_mut().iter_mut().zip(a.values()) {
                *d *= act.slope(av);
            }
            grads[idx] = Dense { weights: pass.activations[idx].t_matmul(&delta)?, bias: delta.sum_rows() };
            delta = delta.matmul_t(&self.layers[idx].weights)?;
        }
        Ok((ParamGrads { layers: grads }, delta))
    }

    /// Loss value and parameter gradient of `Σᵢ wᵢ · lossᵢ / B`.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        weights: &[f64],
        spec: LossSpec<'_>,
    ) -> Result<(f64, ParamGrads)> {
        let pass = self.forward(&batch.inputs)?;
        let (loss, dlogits) = loss_and_dlogits(&pass, batch, weights, spec)?;
        let (grads, _) = self.backprop(&pass, &dlogits)?;
        Ok((loss, grads))
    }

    /// Scalar objective only; same conventions as [`ModelParams::loss_and_grad`].
    pub fn loss(&self, batch: &Batch, weights: &[f64], spec: LossSpec<'_>) -> Result<f64> {
        let pass = self.forward(&batch.inputs)?;
        Ok(loss_and_dlogits(&pass, batch, weights, spec)?.0)
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Inverse of [`ModelParams::flatten`], keeping this model's shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        Ok(ModelParams { layers: unflatten_like(&self.layers, flat)?, activation: self.activation })
    }
}

fn classify(layer: &Dense, features: &Tensor2) -> Result<Tensor2> {
    let mut logits = features.matmul(&layer.weights)?;
    logits.add_row_vector(&layer.bias)?;
    Ok(logits)
}

pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

/// Per-sample loss terms and ∂(Σ wᵢ lossᵢ / B)/∂logits.
pub fn loss_and_dlogits(
    pass: &ForwardPass,
    batch: &Batch,
    weights: &[f64],
    spec: LossSpec<'_>,
) -> Result<(f64, Tensor2)> {
    let b = batch.len();
    if weights.len() != b {
        return Err(dim_err(format!("{} sample weights for batch of {b}", weights.len())));
    }
    if pass.probs.rows() != b {
        return Err(dim_err("forward pass does not match batch"));
    }
    let c = pass.probs.cols();
    let (ce_w, sd) = match spec {
        LossSpec::CrossEntropy => (1.0, None),
        LossSpec::Composite { ce_weight, sd_weight, soft_targets, segments } => {
            if soft_targets.rows() != b || soft_targets.cols() != c {
                return Err(dim_err(format!(
                    "soft targets {}x{} for outputs {b}x{c}",
                    soft_targets.rows(),
                    soft_targets.cols()
                )));
            }
            if segments.iter().any(|s| s.end > c || s.start >= s.end) {
                return Err(dim_err("distillation segment outside classifier"));
            }
            (ce_weight, if sd_weight != 0.0 { Some((sd_weight, soft_targets, segments)) } else { None })
        }
    };
    let mut dlogits = Tensor2::zeros(b, c);
    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let label = batch.labels[i];
        if label >= c {
            return Err(Error::Index { index: label, len: c });
        }
        let w = weights[i] * scale;
        let probs = pass.probs.row(i);
        let row = dlogits.row_mut(i);
        if ce_w != 0.0 {
            total += w * ce_w * crate::loss::cross_entropy(probs, label)?;
            for (j, (d, &p)) in row.iter_mut().zip(probs).enumerate() {
                let y = if j == label { 1.0 } else { 0.0 };
                *d += w * ce_w * (p - y);
            }
        }
        if let Some((sd_w, targets, segments)) = sd {
            let logits = pass.logits.row(i);
            let target = targets.row(i);
            for seg in segments.iter() {
                if let Some((kl, g)) = segment_kl(&logits[seg.clone()], &target[seg.clone()]) {
                    total += w * sd_w * kl;
                    for (d, gv) in row[seg.clone()].iter_mut().zip(g) {
                        *d += w * sd_w * gv;
                    }
                }
            }
        }
    }
    Ok((total, dlogits))
}

impl ParamGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self { layers: model.layers.iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn from_flat_like(model: &ModelParams, flat: &[f64]) -> Result<Self> {
        Ok(Self { layers: unflatten_like(&model.layers, flat)? })
    }

    pub fn add(&self, other: &ParamGrads) -> Result<ParamGrads> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> ParamGrads {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { weights: l.weights.map(|v| v * s), bias: l.bias.iter().map(|v| v * s).collect() })
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamGrads) -> Result<f64> {
        let d = self.zip_with(other, |a, b| a - b)?;
        Ok(d.flatten().iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    pub fn squared_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn zip_with(&self, other: &ParamGrads, f: impl Fn(f64, f64) -> f64) -> Result<ParamGrads> {
        if self.layers.len() != other.layers.len()
            || self.layers.iter().zip(&other.layers).any(|(a, b)| !a.same_shape(b))
        {
            return Err(dim_err("gradient trees are not congruent"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let w = a.weights.values().iter().zip(b.weights.values()).map(|(&x, &y)| f(x, y)).collect();
                Dense {
                    weights: Tensor2::from_vec(a.weights.rows(), a.weights.cols(), w).expect("same shape"),
                    bias: a.bias.iter().zip(&b.bias).map(|(&x, &y)| f(x, y)).collect(),
                }
            })
            .collect();
        Ok(ParamGrads { layers })
    }
}

/// `params ← params − lr · grads`.
pub fn sgd_update(model: &ModelParams, grads: &ParamGrads, lr: f64) -> Result<ModelParams> {
    if model.layers.len() != grads.layers.len()
        || model.layers.iter().zip(&grads.layers).any(|(m, g)| !m.same_shape(g))
    {
        return Err(dim_err("gradients do not match model shape"));
    }
    let mut out = model.clone();
    if lr == 0.0 {
        return Ok(out);
    }
    for (layer, g) in out.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in layer.weights.values_mut().iter_mut().zip(g.weights.values()) {
            *w -= lr * gw;
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(out)
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::param_count).sum());
    for l in layers {
        out.extend_from_slice(l.weights.values());
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten_like(shape: &[Dense], flat: &[f64]) -> Result<Vec<Dense>> {
    let total: usize = shape.iter().map(Dense::param_count).sum();
    if flat.len() != total {
        return Err(dim_err(format!("{} flat values for {total} parameters", flat.len())));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(shape.len());
    for l in shape {
        let nw = l.weights.values().len();
        let weights = Tensor2::from_vec(l.input_dim(), l.output_dim(), flat[offset..offset + nw].to_vec())?;
        offset += nw;
        let bias = flat[offset..offset + l.bias.len()].to_vec();
        offset += l.bias.len();
        layers.push(Dense { weights, bias });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::rng::seeded;

    fn random_batch(rng: &mut SimRng, b: usize, dim: usize, classes: usize) -> Batch {
        let inputs = Tensor2::from_fn(b, dim, |_, _| rng.random_range(0.0..1.0));
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(inputs, labels).unwrap()
    }

    #[test]
    fn zero_model_gives_uniform_probs() {
        let model = ModelParams::from_layers(
            vec![Dense::zeros(3, 4), Dense::zeros(4, 5)],
            Activation::Sigmoid,
        )
        .unwrap();
        let pass = model.forward(&Tensor2::from_fn(2, 3, |i, j| (i + j) as f64)).unwrap();
        for row in pass.probs.iter_rows() {
            assert!(row.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn linear_model_closed_form() {
        let layer = Dense { weights: Tensor2::from_rows(&[[0.0, 1.0]]).unwrap(), bias: vec![0.0, 0.0] };
        let model = ModelParams::from_layers(vec![layer], Activation::Sigmoid).unwrap();
        let pass = model.forward(&Tensor2::from_rows(&[[3f64.ln()]]).unwrap()).unwrap();
        assert!((pass.probs.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((pass.probs.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_model_rows_sum_to_one() {
        let mut rng = seeded(3);
        for _ in 0..10 {
            let model = ModelParams::new_random(&[6, 5, 4, 3], Activation::Sigmoid, &mut rng).unwrap();
            let batch = random_batch(&mut rng, 7, 6, 3);
            let pass = model.forward(&batch.inputs).unwrap();
            assert!(pass.features().all_finite());
            assert_eq!(pass.features().cols(), model.feature_dim());
            for row in pass.probs.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut rng = seeded(1);
        let model = ModelParams::new_random(&[4, 3, 2], Activation::Sigmoid, &mut rng).unwrap();
        assert!(matches!(model.forward(&Tensor2::zeros(1, 5)), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let mut rng = seeded(4);
        let model = ModelParams::new_random(&[5, 4, 3], Activation::Sigmoid, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 6, 5, 3);
        let (_, g) = model.loss_and_grad(&batch, &[0.0; 6], LossSpec::CrossEntropy).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = seeded(5);
        for _ in 0..5 {
            let model = ModelParams::new_random(&[5, 6, 4, 3], Activation::Sigmoid, &mut rng).unwrap();
            let batch = random_batch(&mut rng, 4, 5, 3);
            let w = vec![1.0; 4];
            let (_, g) = model.loss_and_grad(&batch, &w, LossSpec::CrossEntropy).unwrap();
            let fd = finite_diff_grad(
                |p| model.with_flat(p).unwrap().loss(&batch, &w, LossSpec::CrossEntropy).unwrap(),
                &model.flatten(),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&g.flatten(), &fd) <= 1e-4);
        }
    }

    #[test]
    fn duplicated_sample_equals_double_weight() {
        let mut rng = seeded(6);
        let model = ModelParams::new_random(&[3, 4, 2], Activation::Sigmoid, &mut rng).unwrap();
        let x = [0.2, 0.7, 0.1];
        let single = Batch::new(Tensor2::from_rows(&[x]).unwrap(), vec![1]).unwrap();
        let double = Batch::new(Tensor2::from_rows(&[x, x]).unwrap(), vec![1, 1]).unwrap();
        let (_, g1) = model.loss_and_grad(&single, &[2.0], LossSpec::CrossEntropy).unwrap();
        let (_, g2) = model.loss_and_grad(&double, &[1.0, 1.0], LossSpec::CrossEntropy).unwrap();
        // The 1/B normalisation differs by a factor of two between the batches.
        assert!(g1.scale(0.5).max_abs_diff(&g2).unwrap() <= 1e-12);
    }

    #[test]
    fn sgd_arithmetic() {
        let layer = Dense { weights: Tensor2::from_rows(&[[1.0]]).unwrap(), bias: vec![0.0] };
        let model = ModelParams::from_layers(vec![layer], Activation::Sigmoid).unwrap();
        let grads = ParamGrads {
            layers: vec![Dense { weights: Tensor2::from_rows(&[[0.5]]).unwrap(), bias: vec![0.0] }],
        };
        let updated = sgd_update(&model, &grads, 2.0).unwrap();
        assert_eq!(updated.layers[0].weights.get(0, 0), 0.0);
        assert_eq!(sgd_update(&model, &grads, 0.0).unwrap(), model);
    }

    #[test]
    fn widen_preserves_old_entries() {
        let mut rng = seeded(8);
        let model = ModelParams::new_random(&[4, 3, 2], Activation::Sigmoid, &mut rng).unwrap();
        let wide = model.widen(5, &mut rng).unwrap();
        assert_eq!(wide.class_count(), 5);
        let (old, new) = (model.classifier(), wide.classifier());
        for i in 0..old.weights.rows() {
            for j in 0..2 {
                assert_eq!(old.weights.get(i, j).to_bits(), new.weights.get(i, j).to_bits());
            }
        }
        assert_eq!(&new.bias[..2], &old.bias[..]);
        assert_eq!(wide.layers[0], model.layers[0]);
        assert!(model.widen(1, &mut rng).is_err());
    }

    #[test]
    fn fresh_classifier_predicts_near_uniform() {
        let mut rng = seeded(9);
        let model = ModelParams::new_classifier(&[16, 24, 32, 10], Activation::Sigmoid, &mut rng).unwrap();
        let w = model.classifier().weights.values();
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - WIDEN_STD).abs() < 0.02, "{std}");
        let x = Tensor2::from_fn(50, 16, |_, _| rng.random_range(0.0..1.0));
        let probs = model.forward(&x).unwrap().probs;
        let h: f64 = probs.iter_rows().map(crate::loss::entropy).sum::<f64>() / 50.0;
        assert!(h > 0.9 * 10f64.ln(), "{h}");
    }
}
