//! Gradient-matching objective used to rebuild prototypes from encoder
//! gradients, with an analytic input gradient obtained by differentiating
//! through the backward pass.

use crate::error::{dim_err, Error, Result};
use crate::gradcheck::finite_diff_grad;
use crate::loss::softmax;
use crate::model::{Dense, ModelParams};
use crate::tensor::Tensor2;

/// Central-difference step for the input-gradient oracle.
pub const INPUT_FD_STEP: f64 = 1e-4;

/// Per-layer CE gradients of a single labelled input through the encoder.
pub fn ce_param_gradients(encoder: &ModelParams, x: &[f64], label: usize) -> Result<Vec<Dense>> {
    let trace = Trace::new(encoder, x, label)?;
    Ok(trace.param_grads())
}

/// `Σ_layers ‖∇W CE(x̄) − target_W‖² + ‖∇b CE(x̄) − target_b‖²`.
pub fn matching_loss(encoder: &ModelParams, x: &[f64], label: usize, target: &[Dense]) -> Result<f64> {
    let trace = Trace::new(encoder, x, label)?;
    check_target(encoder, target)?;
    Ok(trace.residuals(target).1)
}

/// Matching loss and its analytic gradient with respect to `x`.
pub fn matching_loss_and_input_grad(
    encoder: &ModelParams,
    x: &[f64],
    label: usize,
    target: &[Dense],
) -> Result<(f64, Vec<f64>)> {
    check_target(encoder, target)?;
    let trace = Trace::new(encoder, x, label)?;
    let (residuals, loss) = trace.residuals(target);
    let grad = trace.input_adjoint(encoder, &residuals);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("matching loss gradient".into()));
    }
    Ok((loss, grad))
}

/// Finite-difference version of the input gradient (the oracle path).
pub fn matching_input_grad_fd(
    encoder: &ModelParams,
    x: &[f64],
    label: usize,
    target: &[Dense],
    h: f64,
) -> Result<Vec<f64>> {
    check_target(encoder, target)?;
    finite_diff_grad(|p| matching_loss(encoder, p, label, target).unwrap_or(f64::NAN), x, h)
}

fn check_target(encoder: &ModelParams, target: &[Dense]) -> Result<()> {
    if target.len() != encoder.layers.len()
        || target
            .iter()
            .zip(&encoder.layers)
            .any(|(t, l)| !t.weights.same_shape(&l.weights) || t.bias.len() != l.bias.len())
    {
        return Err(dim_err("target gradient does not match the encoder"));
    }
    Ok(())
}

/// Forward and backward quantities of a single sample.
struct Trace {
    /// `a_0 = x`, then hidden activations.
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
    /// `deltas[k]` is ∂CE/∂z of layer k (0-based).
    deltas: Vec<Vec<f64>>,
    /// `pre[k] = W_k δ_k`, the back-propagated signal before the activation slope (k ≥ 1).
    pre: Vec<Vec<f64>>,
    activation: crate::model::Activation,
}

impl Trace {
    fn new(encoder: &ModelParams, x: &[f64], label: usize) -> Result<Self> {
        if x.len() != encoder.input_dim() {
            return Err(dim_err(format!("input of {} for encoder expecting {}", x.len(), encoder.input_dim())));
        }
        let c = encoder.class_count();
        if label >= c {
            return Err(Error::Index { index: label, len: c });
        }
        let k = encoder.layers.len();
        let act = encoder.activation;
        let mut acts = vec![x.to_vec()];
        let mut logits = Vec::new();
        for (idx, layer) in encoder.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut z = layer.bias.clone();
            for (i, &a) in input.iter().enumerate() {
                for (zj, &w) in z.iter_mut().zip(layer.weights.row(i)) {
                    *zj += a * w;
                }
            }
            if idx + 1 < k {
                acts.push(z.iter().map(|&v| act.apply(v)).collect());
            } else {
                logits = z;
            }
        }
        let probs = softmax(&logits);
        let mut deltas = vec![Vec::new(); k];
        let mut pre = vec![Vec::new(); k];
        let mut delta: Vec<f64> = probs.clone();
        delta[label] -= 1.0;
        for idx in (0..k).rev() {
            deltas[idx] = delta.clone();
            if idx == 0 {
                break;
            }
            let w = &encoder.layers[idx].weights;
            let u: Vec<f64> = (0..w.rows()).map(|i| crate::tensor::dot(w.row(i), &delta)).collect();
            delta = u.iter().zip(&acts[idx]).map(|(&ui, &a)| ui * act.slope(a)).collect();
            pre[idx] = u;
        }
        Ok(Self { acts, probs, deltas, pre, activation: act })
    }

    fn param_grads(&self) -> Vec<Dense> {
        self.deltas
            .iter()
            .zip(&self.acts)
            .map(|(delta, a)| Dense {
                weights: Tensor2::from_fn(a.len(), delta.len(), |i, j| a[i] * delta[j]),
                bias: delta.clone(),
            })
            .collect()
    }

    /// Residual tree `∇CE − target` and the squared-norm loss.
    fn residuals(&self, target: &[Dense]) -> (Vec<Dense>, f64) {
        let grads = self.param_grads();
        let mut loss = 0.0;
        let res = grads
            .into_iter()
            .zip(target)
            .map(|(g, t)| {
                let w: Vec<f64> = g.weights.values().iter().zip(t.weights.values()).map(|(a, b)| a - b).collect();
                let b: Vec<f64> = g.bias.iter().zip(&t.bias).map(|(a, b)| a - b).collect();
                loss += w.iter().chain(&b).map(|v| v * v).sum::<f64>();
                Dense { weights: Tensor2::from_vec(g.weights.rows(), g.weights.cols(), w).unwrap(), bias: b }
            })
            .collect();
        (res, loss)
    }

    /// Reverse-mode pass through the backward computation, then through the forward one.
    fn input_adjoint(&self, encoder: &ModelParams, res: &[Dense]) -> Vec<f64> {
        let k = encoder.layers.len();
        let act = self.activation;
        let mut act_adj: Vec<Vec<f64>> = self.acts.iter().map(|a| vec![0.0; a.len()]).collect();
        let mut delta_adj: Vec<Vec<f64>> = vec![Vec::new(); k];

        for idx in 0..k {
            let a = &self.acts[idx];
            let r = &res[idx];
            let cols = r.bias.len();
            // from gW = a ⊗ δ and gb = δ
            let mut dbar: Vec<f64> = r.bias.iter().map(|v| 2.0 * v).collect();
            for (i, &ai) in a.iter().enumerate() {
                let rrow = r.weights.row(i);
                let mut acc = 0.0;
                for j in 0..cols {
                    dbar[j] += 2.0 * ai * rrow[j];
                    acc += 2.0 * rrow[j] * self.deltas[idx][j];
                }
                act_adj[idx][i] += acc;
            }
            // from δ_{idx-1} = (W_idx δ_idx) ⊙ slope(a_idx)
            if idx >= 1 {
                let w = &encoder.layers[idx].weights;
                let prev_adj = &delta_adj[idx - 1];
                for i in 0..w.rows() {
                    let ai = a[i];
                    let t = prev_adj[i] * act.slope(ai);
                    for (dj, &wij) in dbar.iter_mut().zip(w.row(i)) {
                        *dj += wij * t;
                    }
                    act_adj[idx][i] += prev_adj[i] * self.pre[idx][i] * act.slope_derivative(ai);
                }
            }
            delta_adj[idx] = dbar;
        }

        // δ_K = softmax(z_K) − y
        let dk = &delta_adj[k - 1];
        let inner: f64 = self.probs.iter().zip(dk).map(|(p, d)| p * d).sum();
        let mut z_adj: Vec<f64> = self.probs.iter().zip(dk).map(|(p, d)| p * (d - inner)).collect();

        for idx in (0..k).rev() {
            let w = &encoder.layers[idx].weights;
            for i in 0..w.rows() {
                act_adj[idx][i] += crate::tensor::dot(w.row(i), &z_adj);
            }
            if idx == 0 {
                break;
            }
            z_adj = act_adj[idx].iter().zip(&self.acts[idx]).map(|(g, &a)| g * act.slope(a)).collect();
        }
        std::mem::take(&mut act_adj[0])
    }
}
