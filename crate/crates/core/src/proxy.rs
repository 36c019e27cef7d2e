//! Proxy server: anonymized gradient pool, label inference, prototype
//! reconstruction by gradient matching, feature-space augmentation and
//! best-old-model tracking.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::column_variance;
use crate::error::{dim_err, Error, Result};
use crate::inversion::{matching_input_grad_fd, matching_loss_and_input_grad, matching_loss, INPUT_FD_STEP};
use crate::model::{Dense, ModelParams};
use crate::rng::{standard_normal, substream, Purpose, SimRng};
use crate::tensor::Tensor2;

/// Loss value above which reconstruction is abandoned.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Maximum step halvings per reconstruction step.
pub const MAX_HALVINGS: usize = 20;

/// Per-layer encoder gradients of one perturbed prototype. Carries no sender identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeGradient {
    pub layers: Vec<Dense>,
    pub inferred_label: Option<usize>,
}

impl PrototypeGradient {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Bytes on the wire: one f64 per parameter.
    pub fn byte_size(&self) -> usize {
        self.param_count() * 8
    }

    pub fn matches(&self, encoder: &ModelParams) -> bool {
        self.layers.len() == encoder.layers.len()
            && self
                .layers
                .iter()
                .zip(&encoder.layers)
                .all(|(g, l)| g.weights.same_shape(&l.weights) && g.bias.len() == l.bias.len())
    }
}

/// What a client uploads; the id is dropped on ingest.
#[derive(Debug, Clone)]
pub struct PrototypeUpload {
    pub client_id: usize,
    pub gradient: PrototypeGradient,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientPool {
    entries: Vec<PrototypeGradient>,
    permutation: Vec<usize>,
    /// Reasons for rejected or quarantined uploads.
    pub rejected: Vec<String>,
}

impl GradientPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PrototypeGradient] {
        &self.entries
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Entries in shuffled order.
    pub fn shuffled(&self) -> impl Iterator<Item = &PrototypeGradient> {
        self.permutation.iter().map(|&i| &self.entries[i])
    }

    /// Appends shape-valid uploads without their sender ids and reshuffles.
    pub fn ingest(&self, uploads: Vec<PrototypeUpload>, encoder: &ModelParams, rng: &mut SimRng) -> GradientPool {
        if uploads.is_empty() {
            return self.clone();
        }
        let mut next = self.clone();
        for PrototypeUpload { client_id, gradient } in uploads {
            if gradient.matches(encoder) {
                next.entries.push(gradient);
            } else {
                next.rejected.push(format!("upload from client {client_id}: shape mismatch"));
            }
        }
        next.permutation = (0..next.entries.len()).collect();
        next.permutation.shuffle(rng);
        next
    }

    /// Removes everything, keeping the rejection ledger.
    pub fn drain(&mut self) -> Vec<PrototypeGradient> {
        let order = std::mem::take(&mut self.permutation);
        let mut entries: Vec<Option<PrototypeGradient>> = std::mem::take(&mut self.entries).into_iter().map(Some).collect();
        order.into_iter().filter_map(|i| entries[i].take()).collect()
    }
}

/// Label from the sign of the last-layer bias gradient (`p − onehot(y)`).
pub fn infer_label(g: &PrototypeGradient) -> Result<usize> {
    let bias = &g.layers.last().ok_or(Error::LabelInference)?.bias;
    bias.iter()
        .enumerate()
        .filter(|(_, &b)| b < 0.0)
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or(Error::LabelInference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGradStrategy {
    /// Differentiates through the backward pass.
    Analytic,
    /// Central differences over input coordinates.
    FiniteDifference,
}

/// `L_IR` and `∇_x L_IR` under the chosen strategy.
pub fn input_gradient_of_lir(
    x: &[f64],
    g: &PrototypeGradient,
    label: usize,
    encoder: &ModelParams,
    strategy: InputGradStrategy,
) -> Result<(f64, Vec<f64>)> {
    match strategy {
        InputGradStrategy::Analytic => matching_loss_and_input_grad(encoder, x, label, &g.layers),
        InputGradStrategy::FiniteDifference => {
            let loss = matching_loss(encoder, x, label, &g.layers)?;
            let grad = matching_input_grad_fd(encoder, x, label, &g.layers, INPUT_FD_STEP)?;
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("matching loss gradient".into()));
            }
            Ok((loss, grad))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionParams {
    pub steps: usize,
    pub update_rate: f64,
    pub strategy: InputGradStrategy,
}

impl Default for ReconstructionParams {
    fn default() -> Self {
        Self { steps: 300, update_rate: 1.0, strategy: InputGradStrategy::Analytic }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: Vec<f64>,
    pub label: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
    pub usable: bool,
}

/// Gradient descent on `L_IR` from a standard-normal start.
///
/// Each step first tries twice the last accepted rate (capped at `1e6·μ`),
/// halving up to [`MAX_HALVINGS`] times until the loss does not increase.
/// Stops early when no halving is accepted.
pub fn reconstruct_prototype(
    g: &PrototypeGradient,
    label: usize,
    encoder: &ModelParams,
    params: &ReconstructionParams,
    rng: &mut SimRng,
) -> Result<Reconstruction> {
    let x0: Vec<f64> = (0..encoder.input_dim()).map(|_| standard_normal(rng)).collect();
    reconstruct_from(x0, g, label, encoder, params)
}

pub fn reconstruct_from(
    mut x: Vec<f64>,
    g: &PrototypeGradient,
    label: usize,
    encoder: &ModelParams,
    params: &ReconstructionParams,
) -> Result<Reconstruction> {
    if !g.matches(encoder) {
        return Err(dim_err("prototype gradient does not match the encoder"));
    }
    if x.len() != encoder.input_dim() {
        return Err(dim_err("initial image width"));
    }
    let (mut loss, mut grad) = input_gradient_of_lir(&x, g, label, encoder, params.strategy)?;
    let initial_loss = loss;
    let mut out = Reconstruction { image: Vec::new(), label, initial_loss, final_loss: loss, steps_taken: 0, usable: true };
    if loss > DIVERGENCE_LIMIT {
        out.usable = false;
        out.image = x;
        return Ok(out);
    }
    let cap = params.update_rate * 1e6;
    let mut rate = params.update_rate / 2.0;
    for step in 0..params.steps {
        if loss == 0.0 {
            break;
        }
        let mut trial_rate = (rate * 2.0).min(cap);
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(a, b)| a - trial_rate * b).collect();
            match input_gradient_of_lir(&candidate, g, label, encoder, params.strategy) {
                Ok((l, gr)) if l <= loss => {
                    x = candidate;
                    loss = l;
                    grad = gr;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::Numeric(_)) => trial_rate *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            break;
        }
        rate = trial_rate;
        out.steps_taken = step + 1;
    }
    out.image = x;
    out.final_loss = loss;
    Ok(out)
}

/// Feature-augmentation state carried across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationState {
    pub omega: f64,
    pub xi: f64,
    pub upsilon: usize,
    /// Per-class feature variance from the latest estimate.
    pub variance: BTreeMap<usize, Vec<f64>>,
}

impl AugmentationState {
    pub fn new(xi: f64, upsilon: usize) -> Result<Self> {
        if !(xi > 0.0 && xi <= 1.0) || upsilon == 0 {
            return Err(Error::Config(format!("augmentation radius {xi} / count {upsilon} out of range")));
        }
        Ok(Self { omega: 0.0, xi, upsilon, variance: BTreeMap::new() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeature {
    pub feature: Vec<f64>,
    pub label: usize,
}

/// Per-class variance of labelled features: own-class variance when the
/// class has ≥ 2 features, otherwise the pooled variance, otherwise ones.
pub fn estimate_class_variance(features: &Tensor2, labels: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let d = features.cols();
    let pooled = if features.rows() >= 2 { column_variance(features) } else { vec![1.0; d] };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    by_class
        .into_iter()
        .map(|(c, idx)| {
            let v = if idx.len() >= 2 { column_variance(&features.select_rows(&idx)) } else { pooled.clone() };
            (c, v)
        })
        .collect()
}

/// Noise `ω·n`, `n ~ N(0, σ²)`, projected onto the ball of radius `sqrt(ξ·Σσ²)`.
pub fn bounded_noise(variance: &[f64], omega: f64, xi: f64, rng: &mut SimRng) -> Vec<f64> {
    let mut noise: Vec<f64> = variance.iter().map(|v| omega * v.sqrt() * standard_normal(rng)).collect();
    let bound = (xi * variance.iter().sum::<f64>()).sqrt();
    let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > bound {
        let s = if norm > 0.0 { bound / norm } else { 0.0 };
        noise.iter_mut().for_each(|v| *v *= s);
    }
    noise
}

/// `υ` noisy copies of `F(x̄)` per reconstructed image, using `state.variance`
/// (re-estimated from these images' features for classes it lacks).
pub fn augment_prototypes(
    images: &[(Vec<f64>, usize)],
    model: &ModelParams,
    state: &AugmentationState,
    rng: &mut SimRng,
) -> Result<Vec<AugmentedFeature>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<&[f64]> = images.iter().map(|(x, _)| x.as_slice()).collect();
    let feats = model.forward(&Tensor2::from_rows(&rows)?)?.features().clone();
    let labels: Vec<usize> = images.iter().map(|&(_, y)| y).collect();
    let estimated = estimate_class_variance(&feats, &labels);
    let mut out = Vec::with_capacity(images.len() * state.upsilon);
    for (i, &y) in labels.iter().enumerate() {
        let var = state.variance.get(&y).unwrap_or(&estimated[&y]);
        for _ in 0..state.upsilon {
            let noise = bounded_noise(var, state.omega, state.xi, rng);
            out.push(AugmentedFeature {
                feature: feats.row(i).iter().zip(&noise).map(|(f, n)| f + n).collect(),
                label: y,
            });
        }
    }
    Ok(out)
}

/// `ω^t = (C^o·ω^{t−1} + Σ_c Tr(Δ_c)/d) / (C^o + C^t)`.
pub fn update_scale(omega_prev: f64, traces: &[f64], c_old: usize, c_new: usize) -> Result<f64> {
    if c_new == 0 {
        return Err(Error::Contract("scale update needs at least one new class".into()));
    }
    Ok((c_old as f64 * omega_prev + traces.iter().sum::<f64>()) / (c_old + c_new) as f64)
}

/// Top-1 accuracy of the classifier on augmented features. Labels beyond
/// the classifier width count as errors.
pub fn feature_accuracy(model: &ModelParams, features: &[AugmentedFeature]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Contract("no features to score".into()));
    }
    let rows: Vec<&[f64]> = features.iter().map(|f| f.feature.as_slice()).collect();
    let logits = model.classify_features(&Tensor2::from_rows(&rows)?)?;
    let hits = logits
        .iter_rows()
        .zip(features)
        .filter(|(row, f)| argmax(row) == Some(f.label))
        .count();
    Ok(hits as f64 / features.len() as f64)
}

pub fn argmax(row: &[f64]) -> Option<usize> {
    row.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
        Some((_, b)) if b >= v => best,
        _ => Some((i, v)),
    })
    .map(|(i, _)| i)
}

/// Keeps the best-scoring global model of the current task and the final
/// best of the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModelTracker {
    pub best_prev: Option<ModelParams>,
    pub best_current: Option<ModelParams>,
    pub best_score: f64,
    pub current_task: usize,
    pub warnings: Vec<String>,
}

impl Default for BestModelTracker {
    fn default() -> Self {
        Self { best_prev: None, best_current: None, best_score: f64::NEG_INFINITY, current_task: 1, warnings: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BestPair<'a> {
    pub previous: Option<&'a ModelParams>,
    pub current: Option<&'a ModelParams>,
}

impl BestModelTracker {
    /// Scores `model`; replaces the incumbent only on strict improvement.
    pub fn track_best(&mut self, model: &ModelParams, features: &[AugmentedFeature]) -> Result<Option<f64>> {
        if features.is_empty() {
            self.warnings.push(format!("task {}: no augmented features to score", self.current_task));
            return Ok(None);
        }
        let score = feature_accuracy(model, features)?;
        if score > self.best_score {
            self.best_score = score;
            self.best_current = Some(model.clone());
        }
        Ok(Some(score))
    }

    /// Moves to the next task. A task without any scored model keeps the older snapshot.
    pub fn rollover(&mut self) {
        if let Some(cur) = self.best_current.take() {
            self.best_prev = Some(cur);
        } else {
            self.warnings.push(format!("task {}: no model scored before rollover", self.current_task));
        }
        self.best_score = f64::NEG_INFINITY;
        self.current_task += 1;
    }

    pub fn best_pair(&self) -> BestPair<'_> {
        BestPair { previous: self.best_prev.as_ref(), current: self.best_current.as_ref() }
    }
}

/// Header line `LGAI <rows> <cols> <label>` followed by row-major reals, one row per line.
pub fn write_flat_image(path: impl AsRef<Path>, image: &[f64], rows: usize, cols: usize, label: usize) -> Result<()> {
    if rows * cols != image.len() {
        return Err(dim_err(format!("{} values for a {rows}x{cols} image", image.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "LGAI {rows} {cols} {label}")?;
    for r in image.chunks(cols.max(1)) {
        let line: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_flat_image(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if header.len() != 4 || header[0] != "LGAI" {
        return Err(Error::Format("missing LGAI header".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("header field {s:?}: {e}")));
    let (rows, cols, label) = (parse(header[1])?, parse(header[2])?, parse(header[3])?);
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("value {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    if values.len() != rows * cols {
        return Err(Error::Format(format!("expected {} values, found {}", rows * cols, values.len())));
    }
    Ok((values, rows, cols, label))
}

/// The proxy as a single actor: receives uploads, reconstructs, augments and scores.
#[derive(Debug, Clone)]
pub struct ProxyServer {
    pub encoder: ModelParams,
    pub pool: GradientPool,
    /// Usable reconstructions in arrival order.
    pub store: Vec<Reconstruction>,
    pub augmentation: AugmentationState,
    pub tracker: BestModelTracker,
    pub params: ReconstructionParams,
    /// Classes with at least one reconstruction, as of the last scale update.
    pub known_classes: std::collections::BTreeSet<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReceiveOutcome {
    pub received: usize,
    pub reconstructed: usize,
    pub discarded: usize,
}

impl ProxyServer {
    pub fn new(encoder: ModelParams, augmentation: AugmentationState, params: ReconstructionParams) -> Self {
        Self {
            encoder,
            pool: GradientPool::new(),
            store: Vec::new(),
            augmentation,
            tracker: BestModelTracker::default(),
            params,
            known_classes: Default::default(),
            warnings: Vec::new(),
        }
    }

    /// Ingests uploads, infers labels and rebuilds the prototype images.
    pub fn receive(&mut self, uploads: Vec<PrototypeUpload>, seed: u64, coords: [u64; 2]) -> Result<ReceiveOutcome> {
        let received = uploads.len();
        let mut shuffle = substream(seed, Purpose::PoolShuffle, &coords);
        self.pool = self.pool.ingest(uploads, &self.encoder, &mut shuffle);
        let entries = self.pool.drain();
        let mut labelled = Vec::with_capacity(entries.len());
        for mut g in entries {
            match infer_label(&g) {
                Ok(y) => {
                    g.inferred_label = Some(y);
                    labelled.push((g, y));
                }
                Err(e) => self.pool.rejected.push(format!("quarantined: {e}")),
            }
        }
        let results: Vec<Result<Reconstruction>> = labelled
            .par_iter()
            .enumerate()
            .map(|(i, (g, y))| {
                let mut rng = substream(seed, Purpose::Reconstruction, &[coords[0], coords[1], i as u64]);
                reconstruct_prototype(g, *y, &self.encoder, &self.params, &mut rng)
            })
            .collect();
        let mut out = ReceiveOutcome { received, ..Default::default() };
        for r in results {
            let r = r?;
            if r.usable && r.final_loss.is_finite() {
                out.reconstructed += 1;
                self.store.push(r);
            } else {
                out.discarded += 1;
                self.warnings.push(format!("reconstruction for class {} diverged", r.label));
            }
        }
        Ok(out)
    }

    /// Re-estimates variances under `model`, updates the scale for newly
    /// seen classes, augments every stored prototype and scores `model`.
    pub fn score(&mut self, model: &ModelParams, seed: u64, coords: [u64; 2]) -> Result<Option<f64>> {
        if self.store.is_empty() {
            return self.tracker.track_best(model, &[]);
        }
        let rows: Vec<&[f64]> = self.store.iter().map(|r| r.image.as_slice()).collect();
        let feats = model.forward(&Tensor2::from_rows(&rows)?)?.features().clone();
        let labels: Vec<usize> = self.store.iter().map(|r| r.label).collect();
        let variance = estimate_class_variance(&feats, &labels);
        let new: Vec<usize> = variance.keys().filter(|c| !self.known_classes.contains(c)).copied().collect();
        if !new.is_empty() {
            let d = feats.cols().max(1) as f64;
            let traces: Vec<f64> = new.iter().map(|c| variance[c].iter().sum::<f64>() / d).collect();
            self.augmentation.omega =
                update_scale(self.augmentation.omega, &traces, self.known_classes.len(), new.len())?;
            self.known_classes.extend(new);
        }
        self.augmentation.variance = variance;
        let images: Vec<(Vec<f64>, usize)> = self.store.iter().map(|r| (r.image.clone(), r.label)).collect();
        let mut rng = substream(seed, Purpose::Augmentation, &coords);
        let features = augment_prototypes(&images, model, &self.augmentation, &mut rng)?;
        self.tracker.track_best(model, &features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::encode_prototype_gradients;
    use crate::model::Activation;
    use crate::rng::seeded;
    use rand::Rng;

    fn encoder(seed: u64) -> ModelParams {
        ModelParams::new_random(&[16, 8, 6, 6, 5], Activation::Sigmoid, &mut seeded(seed)).unwrap()
    }

    fn grad_with_bias(bias: Vec<f64>) -> PrototypeGradient {
        let n = bias.len();
        PrototypeGradient { layers: vec![Dense { weights: Tensor2::zeros(2, n), bias }], inferred_label: None }
    }

    #[test]
    fn sign_rule() {
        assert_eq!(infer_label(&grad_with_bias(vec![0.2, -0.8, 0.6])).unwrap(), 1);
        assert_eq!(infer_label(&grad_with_bias(vec![-0.1, -0.8, 0.6])).unwrap(), 1);
        assert!(matches!(infer_label(&grad_with_bias(vec![0.2, 0.8])), Err(Error::LabelInference)));
    }

    #[test]
    fn ingest_behaviour() {
        let enc = encoder(1);
        let pool = GradientPool::new();
        assert_eq!(pool.ingest(Vec::new(), &enc, &mut seeded(0)), pool);
        let x = vec![0.5; 16];
        let uploads: Vec<PrototypeUpload> = (0..6)
            .map(|i| PrototypeUpload { client_id: i, gradient: encode_prototype_gradients(&x, i % 5, &enc).unwrap() })
            .chain(std::iter::once(PrototypeUpload { client_id: 9, gradient: grad_with_bias(vec![1.0]) }))
            .collect();
        let a = pool.ingest(uploads.clone(), &enc, &mut seeded(3));
        let b = pool.ingest(uploads, &enc, &mut seeded(3));
        assert_eq!(a.len(), 6);
        assert_eq!(a.rejected.len(), 1);
        assert_eq!(a.permutation(), b.permutation());
        let mut sorted = a.permutation().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn reconstruction_at_preimage_is_stationary() {
        let enc = encoder(2);
        let mut rng = seeded(4);
        let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let g = encode_prototype_gradients(&x, 2, &enc).unwrap();
        let r = reconstruct_from(x.clone(), &g, 2, &enc, &ReconstructionParams::default()).unwrap();
        assert_eq!(r.final_loss, 0.0);
        assert_eq!(r.image, x);
        let (_, grad) = input_gradient_of_lir(&x, &g, 2, &enc, InputGradStrategy::FiniteDifference).unwrap();
        assert!(grad.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-3);
    }

    #[test]
    fn zero_steps_returns_init() {
        let enc = encoder(3);
        let g = encode_prototype_gradients(&[0.3; 16], 1, &enc).unwrap();
        let params = ReconstructionParams { steps: 0, ..Default::default() };
        let r = reconstruct_prototype(&g, 1, &enc, &params, &mut seeded(8)).unwrap();
        let mut rng = seeded(8);
        let init: Vec<f64> = (0..16).map(|_| standard_normal(&mut rng)).collect();
        assert_eq!(r.image, init);
    }

    #[test]
    fn reconstruction_is_monotone_and_reduces_loss() {
        let enc = encoder(5);
        let mut rng = seeded(6);
        let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let g = encode_prototype_gradients(&x, 4, &enc).unwrap();
        let r = reconstruct_prototype(&g, 4, &enc, &ReconstructionParams::default(), &mut rng).unwrap();
        assert!(r.usable);
        assert!(r.final_loss <= 0.01 * r.initial_loss, "{} vs {}", r.final_loss, r.initial_loss);
    }

    #[test]
    fn strategies_agree() {
        let enc = encoder(7);
        let mut rng = seeded(7);
        let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let probe: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let g = encode_prototype_gradients(&x, 0, &enc).unwrap();
        let (_, a) = input_gradient_of_lir(&probe, &g, 0, &enc, InputGradStrategy::Analytic).unwrap();
        let (_, n) = input_gradient_of_lir(&probe, &g, 0, &enc, InputGradStrategy::FiniteDifference).unwrap();
        assert!(crate::gradcheck::max_relative_error(&a, &n) <= 1e-3);
    }

    #[test]
    fn zero_scale_augmentation_is_exact() {
        let model = ModelParams::new_random(&[4, 3, 2], Activation::Sigmoid, &mut seeded(1)).unwrap();
        let images = vec![(vec![0.1, 0.2, 0.3, 0.4], 0), (vec![0.9, 0.1, 0.3, 0.2], 1)];
        let state = AugmentationState::new(0.1, 5).unwrap();
        let out = augment_prototypes(&images, &model, &state, &mut seeded(2)).unwrap();
        assert_eq!(out.len(), 10);
        let f = model.forward(&Tensor2::from_rows(&[images[0].0.clone()]).unwrap()).unwrap();
        assert_eq!(out[0].feature, f.features().row(0));
    }

    #[test]
    fn oversized_noise_lands_on_bound() {
        let var = vec![1.0, 4.0, 0.25];
        let n = bounded_noise(&var, 100.0, 0.1, &mut seeded(3));
        let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - (0.1f64 * 5.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let var = vec![0.5, 1.0, 2.0];
        let mut rng = seeded(11);
        let mut mean = [0.0; 3];
        let draws = 10_000;
        for _ in 0..draws {
            for (m, v) in mean.iter_mut().zip(bounded_noise(&var, 0.5, 1.0, &mut rng)) {
                *m += v / draws as f64;
            }
        }
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() <= 3.0 * (0.5 * v.sqrt()) / 100.0, "{m}");
        }
    }

    #[test]
    fn scale_recursion() {
        assert_eq!(update_scale(123.0, &[1.0, 1.0], 0, 2).unwrap(), 1.0);
        let mut rng = seeded(12);
        let mut omega = 0.0;
        let mut brute = 0.0;
        let mut c_old = 0usize;
        for _ in 0..5 {
            let traces: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
            omega = update_scale(omega, &traces, c_old, 3).unwrap();
            let mut s = c_old as f64 * brute;
            for t in &traces {
                s += t;
            }
            brute = s / (c_old + 3) as f64;
            c_old += 3;
            assert!((omega - brute).abs() <= 1e-12);
        }
        assert!(update_scale(0.0, &[], 3, 0).is_err());
    }

    #[test]
    fn variance_fallbacks() {
        let f = Tensor2::from_rows(&[[0.0, 2.0], [2.0, 2.0], [1.0, 5.0]]).unwrap();
        let v = estimate_class_variance(&f, &[0, 0, 1]);
        assert_eq!(v[&0], vec![1.0, 0.0]);
        assert_eq!(v[&1], column_variance(&f));
        let one = estimate_class_variance(&Tensor2::from_rows(&[[3.0, 4.0]]).unwrap(), &[2]);
        assert_eq!(one[&2], vec![1.0, 1.0]);
    }

    fn scored_model(bias: [f64; 2]) -> ModelParams {
        ModelParams::from_layers(vec![Dense { weights: Tensor2::zeros(1, 2), bias: bias.to_vec() }], Activation::Sigmoid)
            .unwrap()
    }

    #[test]
    fn tracker_rules() {
        let feats: Vec<AugmentedFeature> =
            (0..10).map(|i| AugmentedFeature { feature: vec![0.0], label: usize::from(i >= 4) }).collect();
        let mut t = BestModelTracker::default();
        assert!(t.best_pair().previous.is_none());
        let m0 = scored_model([1.0, 0.0]);
        let m1 = scored_model([0.0, 1.0]);
        assert_eq!(t.track_best(&m0, &feats).unwrap(), Some(0.4));
        assert_eq!(t.best_current.as_ref(), Some(&m0));
        t.track_best(&m1, &feats).unwrap();
        assert_eq!(t.best_current.as_ref(), Some(&m1));
        let m1b = scored_model([0.0, 2.0]);
        t.track_best(&m1b, &feats).unwrap();
        assert_eq!(t.best_current.as_ref(), Some(&m1));
        assert_eq!(t.track_best(&m0, &[]).unwrap(), None);
        assert_eq!(t.warnings.len(), 1);
        t.rollover();
        assert_eq!(t.best_pair().previous, Some(&m1));
        assert!(t.best_pair().current.is_none());
    }

    #[test]
    fn flat_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.txt");
        let img: Vec<f64> = (0..6).map(|i| i as f64 / 7.0).collect();
        write_flat_image(&p, &img, 2, 3, 4).unwrap();
        assert_eq!(read_flat_image(&p).unwrap(), (img, 2, 3, 4));
        assert!(write_flat_image(&p, &[1.0], 2, 2, 0).is_err());
    }
}
