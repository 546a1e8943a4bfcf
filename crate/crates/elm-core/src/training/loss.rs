//! Losses with hand-written gradients: joint BCE + MSE for teacher fitting
//! (with a burn-in mask) and last-step softmax cross-entropy for
//! classification.

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

/// Logit clamp for numerical safety in the BCE value.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Joint spike/voltage loss over one sequence.
///
/// `outputs` is T x 2 ([voltage_pred, spike_logit] per step); targets are
/// per-step voltage and 0/1 spikes. Steps before `burn_in_steps` contribute
/// zero loss and exactly zero gradient. The voltage target is scaled by
/// `voltage_scale` before the squared error, so the model learns the scaled
/// trace. Returns (mean loss over unmasked steps, per-step output grads).
pub fn neuronio_loss(
    outputs: &[f64],
    voltage_target: &[f64],
    spike_target: &[f64],
    burn_in_steps: usize,
    voltage_scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let t_len = voltage_target.len();
    if outputs.len() != 2 * t_len || spike_target.len() != t_len {
        return Err(Error::Shape("neuronio_loss: length mismatch".into()));
    }
    if t_len == 0 {
        return Err(Error::Invalid("neuronio_loss: empty sequence".into()));
    }
    if burn_in_steps >= t_len {
        return Err(Error::Invalid(format!(
            "neuronio_loss: burn-in {burn_in_steps} must be < sequence length {t_len}"
        )));
    }
    let n = (t_len - burn_in_steps) as f64;
    let mut grads = vec![0.0; outputs.len()];
    let mut loss = 0.0;
    for t in burn_in_steps..t_len {
        let v_pred = outputs[2 * t];
        let z = outputs[2 * t + 1].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let v_tgt = voltage_scale * voltage_target[t];
        let y = spike_target[t];

        let dv = v_pred - v_tgt;
        loss += dv * dv;
        grads[2 * t] = 2.0 * dv / n;

        // Stable BCE-with-logits: max(z,0) - z y + ln(1 + exp(-|z|)).
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grads[2 * t + 1] = (sigmoid(z) - y) / n;
    }
    Ok((loss / n, grads))
}

/// Softmax cross-entropy on the final step's outputs only.
pub fn last_step_ce(outputs: &[f64], n_classes: usize, label: usize) -> Result<(f64, Vec<f64>)> {
    if n_classes == 0 || outputs.len() % n_classes != 0 || outputs.is_empty() {
        return Err(Error::Shape("last_step_ce: outputs not T x n_classes".into()));
    }
    if label >= n_classes {
        return Err(Error::Invalid(format!("last_step_ce: label {label} >= {n_classes}")));
    }
    let t_last = outputs.len() / n_classes - 1;
    let logits = &outputs[t_last * n_classes..];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let loss = log_z - logits[label];
    let mut grads = vec![0.0; outputs.len()];
    for k in 0..n_classes {
        let p = (logits[k] - log_z).exp();
        grads[t_last * n_classes + k] = p - if k == label { 1.0 } else { 0.0 };
    }
    Ok((loss, grads))
}
