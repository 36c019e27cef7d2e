//! Local side of the protocol: category-balanced reweighting, per-task
//! semantic distillation, local SGD, entropy-based task-transition detection
//! and prototype perturbation/encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, rank_by_distance_to_mean, training_union, ExemplarMemory, Samples, TaskStream};
use crate::error::{dim_err, Error, Result};
use crate::inversion::ce_param_gradients;
use crate::loss::{cross_entropy, entropy};
use crate::model::{sgd_update, Batch, LossSpec, ModelParams, ParamGrads};
use crate::proxy::PrototypeGradient;
use crate::rng::{standard_normal, SimRng};
use crate::tensor::Tensor2;

/// Global class → task map and the per-task class ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLedger {
    pub task_of_class: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl TaskLedger {
    /// Built from a stream whose classes are already in stream order.
    pub fn from_ordered(stream: &TaskStream) -> Self {
        let mut task_of_class = Vec::new();
        let mut segments = Vec::new();
        for (t, (&old, &new)) in stream.old_counts.iter().zip(&stream.new_counts).enumerate() {
            task_of_class.extend(std::iter::repeat_n(t, new));
            segments.push(old..old + new);
        }
        Self { task_of_class, segments }
    }

    pub fn task_of(&self, class: usize) -> Result<usize> {
        self.task_of_class
            .get(class)
            .copied()
            .ok_or(Error::Index { index: class, len: self.task_of_class.len() })
    }

    /// Task segments clipped to a classifier of `width` outputs.
    pub fn segments_within(&self, width: usize) -> Vec<Range<usize>> {
        self.segments
            .iter()
            .filter(|s| s.start < width)
            .map(|s| s.start..s.end.min(width))
            .collect()
    }
}

/// Client-local old/new class counts `C_l^o`, `C_l^t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub old: usize,
    pub new: usize,
}

impl ClassCounts {
    /// Sharpening exponent `C_l^o / (C_l^o + C_l^t)`; zero when nothing is known.
    pub fn exponent(self) -> f64 {
        let total = self.old + self.new;
        if total == 0 { 0.0 } else { self.old as f64 / total as f64 }
    }
}

/// Local training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalHyperparams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Entropy rise that signals new classes.
    pub r_e: f64,
    /// Scale of the latent noise used to perturb prototypes.
    pub epsilon: f64,
    pub perturb_steps: usize,
    pub perturb_lr: f64,
    /// Reweight CE by sharpened per-task gradient means.
    pub balance: bool,
    /// Add the per-task distillation term when a teacher exists.
    pub distill: bool,
}

impl Default for LocalHyperparams {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1.0,
            lr: 2.0,
            epochs: 20,
            batch: 32,
            r_e: 1.2,
            epsilon: 0.1,
            perturb_steps: 50,
            perturb_lr: 1.0,
            balance: true,
            distill: true,
        }
    }
}

impl LocalHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.r_e.is_finite() && self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config("r_e and epsilon must be finite, epsilon non-negative".into()));
        }
        if !(self.lr > 0.0) || !(self.perturb_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a client keeps between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub local_model: Option<ModelParams>,
    pub old_model: Option<ModelParams>,
    pub memory: ExemplarMemory,
    pub prev_entropy: Option<f64>,
    /// Client-local task counter, advanced by detected transitions.
    pub task_index: usize,
    pub counts: ClassCounts,
    pub transition_flag: bool,
    /// Data of the client's current task (`T_l^t`).
    pub task_data: Samples,
    /// Set when the client enters a new local task; cleared once prototypes are sent.
    pub owes_prototypes: bool,
    /// Global task in which prototypes were last sent.
    pub last_prototype_task: Option<usize>,
}

impl ClientState {
    pub fn new(client_id: usize, memory_budget: usize, dim: usize) -> Self {
        Self {
            client_id,
            local_model: None,
            old_model: None,
            memory: ExemplarMemory::new(memory_budget),
            prev_entropy: None,
            task_index: 1,
            counts: ClassCounts::default(),
            transition_flag: false,
            task_data: Samples::empty(dim),
            owes_prototypes: false,
            last_prototype_task: None,
        }
    }

    /// Recomputes `C_l^o` (stored classes absent from the task data) and `C_l^t`.
    pub fn refresh_counts(&mut self) {
        let current: BTreeSet<usize> = self.task_data.labels.iter().copied().collect();
        let old = self.memory.classes.keys().filter(|c| !current.contains(c)).count();
        self.counts = ClassCounts { old, new: current.len() };
    }

    pub fn training_union(&self) -> Result<Samples> {
        training_union(&self.task_data, &self.memory, self.task_data.dim())
    }
}

/// `V_i = P(x_i)[y_i] − 1` for every row.
pub fn gradient_values(probs: &Tensor2, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != labels.len() {
        return Err(dim_err(format!("{} prediction rows for {} labels", probs.rows(), labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= probs.cols() {
                return Err(Error::Index { index: y, len: probs.cols() });
            }
            Ok((probs.get(i, y) - 1.0).clamp(-1.0, 0.0))
        })
        .collect()
}

/// Sharpened per-task means `V_κ^s = mean_{i ∈ κ} |V_i|^e`, only for tasks present in the batch.
pub fn sharpened_task_means(
    values: &[f64],
    labels: &[usize],
    ledger: &TaskLedger,
    counts: ClassCounts,
) -> Result<BTreeMap<usize, f64>> {
    let e = counts.exponent();
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&v, &y) in values.iter().zip(labels) {
        let entry = acc.entry(ledger.task_of(y)?).or_insert((0.0, 0));
        entry.0 += v.abs().powf(e);
        entry.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Per-sample weights `|V_i|^e / V_{κ(i)}^s`; a zero task mean yields weight 1.
pub fn balance_weights(values: &[f64], labels: &[usize], ledger: &TaskLedger, counts: ClassCounts) -> Result<Vec<f64>> {
    let e = counts.exponent();
    let means = sharpened_task_means(values, labels, ledger, counts)?;
    values
        .iter()
        .zip(labels)
        .map(|(&v, &y)| {
            let m = means[&ledger.task_of(y)?];
            Ok(if m > 0.0 { v.abs().powf(e) / m } else { 1.0 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CblOutput {
    pub loss: f64,
    pub weights: Vec<f64>,
}

/// Category-balanced reweighted cross-entropy. Weights are returned for reuse by [`sdl_loss`].
pub fn cbl_loss(model: &ModelParams, batch: &Batch, ledger: &TaskLedger, counts: ClassCounts) -> Result<CblOutput> {
    let pass = model.forward(&batch.inputs)?;
    let values = gradient_values(&pass.probs, &batch.labels)?;
    let weights = balance_weights(&values, &batch.labels, ledger, counts)?;
    let mut loss = 0.0;
    for (i, (&w, &y)) in weights.iter().zip(&batch.labels).enumerate() {
        loss += w * cross_entropy(pass.probs.row(i), y)?;
    }
    Ok(CblOutput { loss: loss / batch.len() as f64, weights })
}

pub fn one_hots(labels: &[usize], width: usize) -> Result<Tensor2> {
    let mut out = Tensor2::zeros(labels.len(), width);
    for (i, &y) in labels.iter().enumerate() {
        if y >= width {
            return Err(Error::Index { index: y, len: width });
        }
        out.set(i, y, 1.0);
    }
    Ok(out)
}

/// Soft targets: the teacher's probabilities replace the first `C^o` entries of each one-hot.
pub fn build_soft_targets(old_probs: &Tensor2, one_hots: &Tensor2) -> Result<Tensor2> {
    let c_old = old_probs.cols();
    if old_probs.rows() != one_hots.rows() || c_old > one_hots.cols() {
        return Err(dim_err(format!(
            "teacher output {}x{} against targets {}x{}",
            old_probs.rows(),
            c_old,
            one_hots.rows(),
            one_hots.cols()
        )));
    }
    if c_old == 0 {
        return Err(Error::Contract("soft targets need a teacher with at least one class".into()));
    }
    Ok(Tensor2::from_fn(one_hots.rows(), one_hots.cols(), |i, j| {
        if j < c_old { old_probs.get(i, j) } else { one_hots.get(i, j) }
    }))
}

fn soft_targets_for(old_model: &ModelParams, batch: &Batch, width: usize) -> Result<Tensor2> {
    if old_model.class_count() > width {
        return Err(dim_err("teacher is wider than the student"));
    }
    let old_probs = old_model.forward(&batch.inputs)?.probs;
    build_soft_targets(&old_probs, &one_hots(&batch.labels, width)?)
}

/// Per-task semantic distillation:
/// `(1/B) Σᵢ wᵢ Σ_κ KL(norm P_i[κ] ‖ norm Y_i[κ])`, skipping empty target segments.
pub fn sdl_loss(
    model: &ModelParams,
    old_model: Option<&ModelParams>,
    batch: &Batch,
    ledger: &TaskLedger,
    weights: &[f64],
) -> Result<f64> {
    let old = old_model.ok_or_else(|| Error::Contract("distillation without a teacher".into()))?;
    let width = model.class_count();
    let targets = soft_targets_for(old, batch, width)?;
    let segments = ledger.segments_within(width);
    model.loss(
        batch,
        weights,
        LossSpec::Composite { ce_weight: 0.0, sd_weight: 1.0, soft_targets: &targets, segments: &segments },
    )
}

/// The full local objective `γ1·L_CB + γ2·L_SD` with detached weights.
#[derive(Debug, Clone)]
pub struct LocalObjective<'a> {
    pub ledger: &'a TaskLedger,
    pub counts: ClassCounts,
    pub teacher: Option<&'a ModelParams>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub balance: bool,
}

impl LocalObjective<'_> {
    /// Sample weights computed from the model's current predictions.
    pub fn weights(&self, model: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
        if !self.balance {
            return Ok(vec![1.0; batch.len()]);
        }
        let pass = model.forward(&batch.inputs)?;
        let values = gradient_values(&pass.probs, &batch.labels)?;
        balance_weights(&values, &batch.labels, self.ledger, self.counts)
    }

    /// Loss and gradient with the given (frozen) weights.
    pub fn evaluate(&self, model: &ModelParams, batch: &Batch, weights: &[f64]) -> Result<(f64, ParamGrads)> {
        match self.teacher.filter(|_| self.gamma2 != 0.0) {
            None => {
                let (l, g) = model.loss_and_grad(batch, weights, LossSpec::CrossEntropy)?;
                Ok((self.gamma1 * l, g.scale(self.gamma1)))
            }
            Some(teacher) => {
                let width = model.class_count();
                let targets = soft_targets_for(teacher, batch, width)?;
                let segments = self.ledger.segments_within(width);
                model.loss_and_grad(
                    batch,
                    weights,
                    LossSpec::Composite {
                        ce_weight: self.gamma1,
                        sd_weight: self.gamma2,
                        soft_targets: &targets,
                        segments: &segments,
                    },
                )
            }
        }
    }

    pub fn loss_and_grad(&self, model: &ModelParams, batch: &Batch) -> Result<(f64, ParamGrads)> {
        let w = self.weights(model, batch)?;
        self.evaluate(model, batch, &w)
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: ModelParams,
    /// `|T_l^t ∪ M_l|`, the aggregation weight.
    pub sample_count: usize,
    pub no_data: bool,
    /// Mean objective over the last epoch.
    pub last_epoch_loss: f64,
}

/// Starts from `global_model` and runs `epochs` passes of mini-batch SGD on
/// the local objective over the training union. Updates `state.local_model`.
pub fn local_train(
    state: &mut ClientState,
    hyper: &LocalHyperparams,
    global_model: &ModelParams,
    ledger: &TaskLedger,
    rng: &mut SimRng,
) -> Result<LocalOutcome> {
    let union = state.training_union()?;
    if union.is_empty() {
        state.local_model = Some(global_model.clone());
        return Ok(LocalOutcome { model: global_model.clone(), sample_count: 0, no_data: true, last_epoch_loss: 0.0 });
    }
    if let Some(&bad) = union.labels.iter().find(|&&y| y >= global_model.class_count()) {
        return Err(Error::Contract(format!("label {bad} not covered by the global classifier")));
    }
    let teacher = if hyper.distill { state.old_model.as_ref() } else { None };
    let objective = LocalObjective {
        ledger,
        counts: state.counts,
        teacher,
        gamma1: hyper.gamma1,
        gamma2: if teacher.is_some() { hyper.gamma2 } else { 0.0 },
        balance: hyper.balance,
    };
    let mut model = global_model.clone();
    let mut last_epoch_loss = 0.0;
    for _ in 0..hyper.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(union.len(), hyper.batch, rng);
        for idx in &batches {
            let batch = union.subset(idx).to_batch()?;
            let (loss, grads) = objective.loss_and_grad(&model, &batch)?;
            model = sgd_update(&model, &grads, hyper.lr)?;
            sum += loss;
        }
        last_epoch_loss = sum / batches.len() as f64;
    }
    if model.layers.iter().any(|l| !l.weights.all_finite() || l.bias.iter().any(|b| !b.is_finite())) {
        return Err(Error::Numeric(format!("client {} diverged", state.client_id)));
    }
    state.local_model = Some(model.clone());
    Ok(LocalOutcome { model, sample_count: union.len(), no_data: false, last_epoch_loss })
}

/// Mean Shannon entropy of the model's predictions on `inputs`.
pub fn average_entropy(model: &ModelParams, inputs: &Tensor2) -> Result<f64> {
    let probs = model.forward(inputs)?.probs;
    Ok(probs.iter_rows().map(entropy).sum::<f64>() / probs.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub transitioned: bool,
    pub entropy: f64,
}

/// Entropy test on the client's task data. Returns `None` when the client
/// holds no task data. A rise of at least `r_e` over the previous value
/// flags a transition and advances the client's task counter.
pub fn detect_transition(state: &mut ClientState, model: &ModelParams, r_e: f64) -> Result<Option<Detection>> {
    if state.task_data.is_empty() {
        state.transition_flag = false;
        return Ok(None);
    }
    let h = average_entropy(model, &state.task_data.inputs)?;
    let transitioned = state.prev_entropy.is_some_and(|prev| h - prev >= r_e);
    state.prev_entropy = Some(h);
    state.transition_flag = transitioned;
    if transitioned {
        state.task_index += 1;
    }
    Ok(Some(Detection { transitioned, entropy: h }))
}

/// Index of the sample whose feature is nearest the class mean feature.
pub fn select_prototype(class_inputs: &Tensor2, model: &ModelParams) -> Result<usize> {
    if class_inputs.rows() == 0 {
        return Err(Error::Contract("prototype selection on an empty class".into()));
    }
    let feats = model.forward(class_inputs)?.features().clone();
    let order: Vec<usize> = (0..feats.rows()).collect();
    Ok(rank_by_distance_to_mean(&feats, &order)[0])
}

/// Per-dimension population variance of the model's features on `inputs`.
pub fn feature_variance(model: &ModelParams, inputs: &Tensor2) -> Result<Vec<f64>> {
    let feats = model.forward(inputs)?.features().clone();
    Ok(column_variance(&feats))
}

pub fn column_variance(rows: &Tensor2) -> Vec<f64> {
    let n = rows.rows().max(1) as f64;
    let mean: Vec<f64> = rows.sum_rows().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; rows.cols()];
    for row in rows.iter_rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    var
}

/// `CE(classifier(F(x) + offset), y)` and its gradient with respect to `x`.
pub fn perturbation_loss_and_grad(model: &ModelParams, x: &[f64], label: usize, offset: &[f64]) -> Result<(f64, Vec<f64>)> {
    let input = Tensor2::from_vec(1, x.len(), x.to_vec())?;
    let off = Tensor2::from_vec(1, offset.len(), offset.to_vec())?;
    let pass = model.forward_with_feature_offset(&input, Some(&off))?;
    let loss = cross_entropy(pass.probs.row(0), label)?;
    let mut dlogits = pass.probs.clone();
    if label >= dlogits.cols() {
        return Err(Error::Index { index: label, len: dlogits.cols() });
    }
    dlogits.set(0, label, dlogits.get(0, label) - 1.0);
    let (_, dx) = model.backprop(&pass, &dlogits)?;
    Ok((loss, dx.into_values()))
}

/// Moves `x` down the CE gradient computed through noisy latent features
/// `F(x) + ε·n`, `n ~ N(0, σ²)` redrawn every step; the result is clipped to `[0,1]`.
#[allow(clippy::too_many_arguments)]
pub fn perturb_prototype(
    x: &[f64],
    label: usize,
    model: &ModelParams,
    variance: &[f64],
    epsilon: f64,
    rate: f64,
    steps: usize,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    if variance.len() != model.feature_dim() {
        return Err(dim_err("feature variance width"));
    }
    if steps == 0 {
        return Ok(x.to_vec());
    }
    let mut cur = x.to_vec();
    for _ in 0..steps {
        let offset: Vec<f64> = variance.iter().map(|v| epsilon * v.sqrt() * standard_normal(rng)).collect();
        let (_, g) = perturbation_loss_and_grad(model, &cur, label, &offset)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prototype perturbation gradient".into()));
        }
        for (c, gv) in cur.iter_mut().zip(&g) {
            *c -= rate * gv;
        }
    }
    Ok(cur.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Per-layer CE gradients of `(x, y)` through the fixed encoder.
pub fn encode_prototype_gradients(x: &[f64], label: usize, encoder: &ModelParams) -> Result<PrototypeGradient> {
    Ok(PrototypeGradient { layers: ce_param_gradients(encoder, x, label)?, inferred_label: None })
}
