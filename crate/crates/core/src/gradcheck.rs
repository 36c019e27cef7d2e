//! Central finite differences and the gradient verification suite.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{build_soft_targets, cbl_loss, one_hots, perturbation_loss_and_grad, ClassCounts, TaskLedger};
use crate::error::{Error, Result};
use crate::inversion::{ce_param_gradients, matching_loss_and_input_grad, INPUT_FD_STEP};
use crate::model::{Activation, Batch, Dense, LossSpec, ModelParams};
use crate::rng::{standard_normal, substream, Purpose, SimRng};
use crate::tensor::Tensor2;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`max_relative_error`]; coordinates whose gradient
/// is smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = f(&x);
        x[i] = point[i] - h;
        let minus = f(&x);
        x[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective not finite around coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `maxᵢ |aᵢ − nᵢ| / max(|aᵢ|, |nᵢ|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// Objectives covered by [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckedLoss {
    CrossEntropy,
    Balanced,
    Distillation,
    Reconstruction,
    Perturbation,
    Encoder,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 6] = [
        CheckedLoss::CrossEntropy,
        CheckedLoss::Balanced,
        CheckedLoss::Distillation,
        CheckedLoss::Reconstruction,
        CheckedLoss::Perturbation,
        CheckedLoss::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::CrossEntropy => "cross_entropy",
            CheckedLoss::Balanced => "balanced_ce",
            CheckedLoss::Distillation => "distillation",
            CheckedLoss::Reconstruction => "reconstruction_input",
            CheckedLoss::Perturbation => "perturbation_input",
            CheckedLoss::Encoder => "encoder_params",
        }
    }

    /// Conventional symbol of the objective.
    pub fn symbol(self) -> &'static str {
        match self {
            CheckedLoss::CrossEntropy => "L_CE",
            CheckedLoss::Balanced => "L_CB",
            CheckedLoss::Distillation => "L_SD",
            CheckedLoss::Reconstruction => "L_IR",
            CheckedLoss::Perturbation => "L_PC",
            CheckedLoss::Encoder => "L_G",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub configs: usize,
    pub seed: u64,
    /// Flips the sign of one analytic gradient (tests the checker itself).
    pub fault: Option<CheckedLoss>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { configs: 20, seed: 0, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: CheckedLoss,
    pub configs: usize,
    pub max_rel_error: f64,
}

impl LossReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares analytic and central-difference gradients of every objective
/// over `configs` seeded random configurations each.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<LossReport>> {
    CheckedLoss::ALL
        .iter()
        .map(|&loss| {
            let mut worst: f64 = 0.0;
            for cfg in 0..opts.configs {
                let mut rng = substream(opts.seed, Purpose::Test, &[loss as u64, cfg as u64]);
                let (mut analytic, numeric) = check_one(loss, &mut rng)?;
                if opts.fault == Some(loss) {
                    analytic.iter_mut().for_each(|g| *g = -*g);
                }
                worst = worst.max(max_relative_error(&analytic, &numeric));
            }
            Ok(LossReport { loss, configs: opts.configs, max_rel_error: worst })
        })
        .collect()
}

fn uniform_tensor(rng: &mut SimRng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
}

fn small_model(rng: &mut SimRng, input: usize, classes: usize) -> Result<ModelParams> {
    let hidden = rng.random_range(3..7);
    let feat = rng.random_range(3..6);
    let act = if rng.random_bool(0.5) { Activation::Sigmoid } else { Activation::Tanh };
    let mut m = ModelParams::new_random(&[input, hidden, feat, classes], act, rng)?;
    for l in m.layers.iter_mut() {
        l.bias.iter_mut().for_each(|b| *b = 0.3 * standard_normal(rng));
    }
    Ok(m)
}

fn param_check(model: &ModelParams, batch: &Batch, weights: &[f64], spec: LossSpec<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, grads) = model.loss_and_grad(batch, weights, spec)?;
    let numeric = finite_diff_grad(
        |flat| model.with_flat(flat).and_then(|m| m.loss(batch, weights, spec)).unwrap_or(f64::NAN),
        &model.flatten(),
        DEFAULT_STEP,
    )?;
    Ok((grads.flatten(), numeric))
}

fn check_one(loss: CheckedLoss, rng: &mut SimRng) -> Result<(Vec<f64>, Vec<f64>)> {
    let input = rng.random_range(3..7);
    let tasks = rng.random_range(2..4);
    let per_task = rng.random_range(1..4);
    let classes = tasks * per_task;
    let ledger = TaskLedger {
        task_of_class: (0..classes).map(|c| c / per_task).collect(),
        segments: (0..tasks).map(|t| t * per_task..(t + 1) * per_task).collect(),
    };
    let b = rng.random_range(2..7);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let batch = Batch::new(uniform_tensor(rng, b, input), labels.clone())?;
    match loss {
        CheckedLoss::CrossEntropy => {
            let model = small_model(rng, input, classes)?;
            param_check(&model, &batch, &vec![1.0; b], LossSpec::CrossEntropy)
        }
        CheckedLoss::Balanced => {
            let model = small_model(rng, input, classes)?;
            let counts = ClassCounts { old: rng.random_range(0..5), new: rng.random_range(1..5) };
            let weights = cbl_loss(&model, &batch, &ledger, counts)?.weights;
            param_check(&model, &batch, &weights, LossSpec::CrossEntropy)
        }
        CheckedLoss::Distillation => {
            let model = small_model(rng, input, classes)?;
            let old_tasks = rng.random_range(1..tasks);
            let teacher = small_model(rng, input, per_task * old_tasks)?;
            let targets = build_soft_targets(&teacher.forward(&batch.inputs)?.probs, &one_hots(&labels, classes)?)?;
            let weights: Vec<f64> = (0..b).map(|_| rng.random_range(0.2..2.0)).collect();
            let spec = LossSpec::Composite {
                ce_weight: rng.random_range(0.0..1.5),
                sd_weight: 1.0,
                soft_targets: &targets,
                segments: &ledger.segments,
            };
            param_check(&model, &batch, &weights, spec)
        }
        CheckedLoss::Reconstruction => {
            let encoder = small_model(rng, input, classes)?;
            let target: Vec<Dense> = ce_param_gradients(&encoder, batch.inputs.row(0), labels[0])?;
            let probe = batch.inputs.row(1).to_vec();
            let y = labels[0];
            let (_, analytic) = matching_loss_and_input_grad(&encoder, &probe, y, &target)?;
            let numeric = finite_diff_grad(
                |x| crate::inversion::matching_loss(&encoder, x, y, &target).unwrap_or(f64::NAN),
                &probe,
                INPUT_FD_STEP,
            )?;
            Ok((analytic, numeric))
        }
        CheckedLoss::Perturbation => {
            let model = small_model(rng, input, classes)?;
            let offset: Vec<f64> = (0..model.feature_dim()).map(|_| 0.1 * standard_normal(rng)).collect();
            let x = batch.inputs.row(0).to_vec();
            let (_, analytic) = perturbation_loss_and_grad(&model, &x, labels[0], &offset)?;
            let numeric = finite_diff_grad(
                |p| perturbation_loss_and_grad(&model, p, labels[0], &offset).map(|r| r.0).unwrap_or(f64::NAN),
                &x,
                DEFAULT_STEP,
            )?;
            Ok((analytic, numeric))
        }
        CheckedLoss::Encoder => {
            let encoder = small_model(rng, input, classes)?;
            let x = batch.inputs.row(0);
            let layers = ce_param_gradients(&encoder, x, labels[0])?;
            let single = Batch::new(Tensor2::from_vec(1, input, x.to_vec())?, vec![labels[0]])?;
            let numeric = finite_diff_grad(
                |flat| encoder.with_flat(flat).and_then(|m| m.loss(&single, &[1.0], LossSpec::CrossEntropy)).unwrap_or(f64::NAN),
                &encoder.flatten(),
                DEFAULT_STEP,
            )?;
            let analytic = layers.iter().flat_map(|l| l.weights.values().iter().chain(&l.bias).copied()).collect();
            Ok((analytic, numeric))
        }
    }
}
