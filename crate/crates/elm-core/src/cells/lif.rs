//! Leaky integrate-and-fire neuron and its adaptive variant.
//!
//! The update uses the exact exponential-Euler (convex combination) form,
//! which matches the trace update style of the other cells and is exact for
//! piecewise-constant input:
//!
//!   kappa = exp(-dt/tau)
//!   v_pre = kappa.v + (1-kappa).(w.x + bias)
//!   spike = [v_pre >= threshold]        (ties fire)
//!   v'    = v_reset if spike else v_pre
//!
//! ALIF adds an adaptation state raising the effective threshold:
//!   a_dec = exp(-dt/tau_a).a;  spike = [v_pre >= threshold + a_dec]
//!   a' = a_dec + strength.spike
//!
//! As a trainable model the cell outputs [v_pre, gain.(v_pre - threshold_eff)]
//! per step (pre-reset membrane and a spike logit). The hard threshold makes
//! the loss surface non-differentiable; the backward pass uses a triangular
//! surrogate max(0, 1 - |v - thr|/width) for spike paths and detaches the
//! reset branch, so gradient checks report the surrogate instead of comparing
//! against finite differences.

use crate::cells::{check_flat_len, Cell, Mode, Section, Smoothness};
use crate::error::{Error, Result};
use crate::numerics::{logit, sigmoid, sigmoid_bounding, Rng};

#[derive(Debug, Clone)]
pub struct LifConfig {
    pub d_s: usize,
    pub tau_init_ms: f64,
    pub tau_bounds: (f64, f64),
    pub threshold: f64,
    pub v_reset: f64,
    pub bias_init: f64,
    /// Fixed slope of the spike logit read out alongside the membrane.
    pub logit_gain: f64,
    pub surr_width: f64,
    /// ALIF only: adaptation timescale init and (fixed) jump strength.
    pub tau_a_init_ms: f64,
    pub adapt_strength: f64,
}

impl LifConfig {
    pub fn new(d_s: usize) -> Self {
        LifConfig {
            d_s,
            tau_init_ms: 20.0,
            tau_bounds: (1.0, 500.0),
            threshold: 1.0,
            v_reset: 0.0,
            bias_init: 0.0,
            logit_gain: 4.0,
            surr_width: 1.0,
            tau_a_init_ms: 100.0,
            adapt_strength: 0.0,
        }
    }
}

fn theta_for_tau(tau: f64, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = bounds;
    logit(((tau - lo) / (hi - lo)).clamp(1e-3, 1.0 - 1e-3))
}

fn tau_from_theta(theta: f64, bounds: (f64, f64)) -> f64 {
    bounds.0 + (bounds.1 - bounds.0) * sigmoid_bounding(theta)
}

pub struct LifTape {
    steps: usize,
    xs: Vec<f64>,
    dts: Vec<f64>,
    v_prev: Vec<f64>,
    v_pre: Vec<f64>,
    drive: Vec<f64>,
    spikes: Vec<u8>,
    a_prev: Vec<f64>, // raw adaptation state entering the step; empty for LIF
}

impl LifTape {
    pub fn spikes(&self) -> &[u8] {
        &self.spikes
    }

    /// Pre-reset membrane trace (the voltage regression target for teachers).
    pub fn voltage(&self) -> &[f64] {
        &self.v_pre
    }
}

/// Shared implementation; `adaptive` selects LIF vs ALIF behavior.
pub struct LifCell {
    cfg: LifConfig,
    adaptive: bool,
    w: Vec<f64>,
    bias: f64,
    theta_tau: f64,
    theta_tau_a: f64,
}

pub type AlifCell = LifCell;

impl LifCell {
    pub fn new_lif(cfg: LifConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(cfg, false, rng)
    }

    pub fn new_alif(cfg: LifConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(cfg, true, rng)
    }

    fn build(cfg: LifConfig, adaptive: bool, rng: &mut Rng) -> Result<Self> {
        if cfg.d_s == 0 {
            return Err(Error::Invalid("lif: d_s must be >= 1".into()));
        }
        let (lo, hi) = cfg.tau_bounds;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Invalid(format!("lif: tau bounds need 0 < lo < hi, got ({lo}, {hi})")));
        }
        if cfg.threshold <= cfg.v_reset {
            return Err(Error::Invalid("lif: threshold must exceed reset value".into()));
        }
        let mut rng_w = rng.substream("lif.weights");
        let b = 1.0 / (cfg.d_s as f64).sqrt();
        let w = (0..cfg.d_s).map(|_| rng_w.range(-b, b)).collect();
        Ok(LifCell {
            theta_tau: theta_for_tau(cfg.tau_init_ms, cfg.tau_bounds),
            theta_tau_a: theta_for_tau(cfg.tau_a_init_ms, cfg.tau_bounds),
            w,
            bias: cfg.bias_init,
            adaptive,
            cfg,
        })
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    pub fn config(&self) -> &LifConfig {
        &self.cfg
    }

    pub fn tau_ms(&self) -> f64 {
        tau_from_theta(self.theta_tau, self.cfg.tau_bounds)
    }

    pub fn tau_a_ms(&self) -> f64 {
        tau_from_theta(self.theta_tau_a, self.cfg.tau_bounds)
    }

    /// Direct parameter setters for teacher construction.
    pub fn set_weights(&mut self, w: &[f64], bias: f64) -> Result<()> {
        if w.len() != self.cfg.d_s {
            return Err(Error::Shape("lif: weight length mismatch".into()));
        }
        self.w.copy_from_slice(w);
        self.bias = bias;
        Ok(())
    }

    pub fn set_tau_ms(&mut self, tau: f64) {
        self.theta_tau = theta_for_tau(tau, self.cfg.tau_bounds);
    }

    /// Single step; returns ((v', a'), spike, v_readout).
    pub fn step(&self, v: f64, a: f64, x: &[f64], dt: f64) -> Result<((f64, f64), u8, f64)> {
        if x.len() != self.cfg.d_s {
            return Err(Error::Shape("lif step: input length mismatch".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Invalid("lif step: dt must be > 0".into()));
        }
        let kappa = (-dt / self.tau_ms()).exp();
        let drive: f64 =
            self.w.iter().zip(x.iter()).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        let v_pre = kappa * v + (1.0 - kappa) * drive;
        let a_dec = if self.adaptive { (-dt / self.tau_a_ms()).exp() * a } else { 0.0 };
        let thr = self.cfg.threshold + a_dec;
        let spike = if v_pre >= thr { 1u8 } else { 0u8 };
        let v_next = if spike == 1 { self.cfg.v_reset } else { v_pre };
        let a_next = a_dec + self.cfg.adapt_strength * spike as f64;
        Ok(((v_next, a_next), spike, v_pre))
    }
}

impl Cell for LifCell {
    type Tape = LifTape;

    fn input_dim(&self) -> usize {
        self.cfg.d_s
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn rollout(&self, xs: &[f64], dts: &[f64], _mode: Mode) -> Result<(Vec<f64>, Self::Tape)> {
        let d_s = self.cfg.d_s;
        let steps = dts.len();
        if xs.len() != steps * d_s {
            return Err(Error::Shape("lif rollout: inputs length mismatch".into()));
        }
        let mut tape = LifTape {
            steps,
            xs: xs.to_vec(),
            dts: dts.to_vec(),
            v_prev: vec![0.0; steps],
            v_pre: vec![0.0; steps],
            drive: vec![0.0; steps],
            spikes: vec![0; steps],
            a_prev: if self.adaptive { vec![0.0; steps] } else { Vec::new() },
        };
        let mut outputs = vec![0.0; steps * 2];
        let mut v = 0.0;
        let mut a = 0.0;
        for t in 0..steps {
            let dt = dts[t];
            if !(dt > 0.0) {
                return Err(Error::Invalid(format!("lif rollout: dt must be > 0 at step {t}")));
            }
            tape.v_prev[t] = v;
            if self.adaptive {
                tape.a_prev[t] = a;
            }
            let ((v_next, a_next), spike, v_pre) =
                self.step(v, a, &xs[t * d_s..(t + 1) * d_s], dt)?;
            let a_dec = if self.adaptive { (-dt / self.tau_a_ms()).exp() * a } else { 0.0 };
            tape.v_pre[t] = v_pre;
            tape.drive[t] =
                self.w.iter().zip(&xs[t * d_s..(t + 1) * d_s]).map(|(w, x)| w * x).sum::<f64>()
                    + self.bias;
            tape.spikes[t] = spike;
            outputs[t * 2] = v_pre;
            outputs[t * 2 + 1] =
                self.cfg.logit_gain * (v_pre - self.cfg.threshold - a_dec);
            if !v_pre.is_finite() {
                return Err(Error::NonFinite { seq: 0, step: t });
            }
            v = v_next;
            a = a_next;
        }
        Ok((outputs, tape))
    }

    fn backward(&self, tape: &LifTape, out_grads: &[f64]) -> Result<Vec<f64>> {
        let d_s = self.cfg.d_s;
        let steps = tape.steps;
        if out_grads.len() != steps * 2 {
            return Err(Error::Shape("lif backward: out_grads length mismatch".into()));
        }
        if tape.xs.len() != steps * d_s {
            return Err(Error::Shape("lif backward: tape/params shape mismatch".into()));
        }
        let tau = self.tau_ms();
        let tau_a = self.tau_a_ms();
        let (lo, hi) = self.cfg.tau_bounds;
        let gain = self.cfg.logit_gain;
        let width = self.cfg.surr_width;

        let mut g_w = vec![0.0; d_s];
        let mut g_bias = 0.0;
        let mut g_tau = 0.0;
        let mut g_tau_a = 0.0;

        let mut dv = 0.0; // adjoint of the post-reset state
        let mut da = 0.0;

        for t in (0..steps).rev() {
            let dt = tape.dts[t];
            let kappa = (-dt / tau).exp();
            let kappa_a = (-dt / tau_a).exp();
            let x = &tape.xs[t * d_s..(t + 1) * d_s];
            let spike = tape.spikes[t] as f64;
            let v_pre = tape.v_pre[t];
            let a_prev_state = if self.adaptive { tape.a_prev[t] } else { 0.0 };
            let a_dec = kappa_a * a_prev_state;
            let thr_eff = self.cfg.threshold + if self.adaptive { a_dec } else { 0.0 };

            // Triangular surrogate for the threshold crossing.
            let surr = (1.0 - (v_pre - thr_eff).abs() / width).max(0.0);

            // Output paths: y0 = v_pre, y1 = gain (v_pre - thr_eff).
            let gy0 = out_grads[t * 2];
            let gy1 = out_grads[t * 2 + 1];
            let mut dv_pre = gy0 + gain * gy1;
            let mut da_dec = -gain * gy1;

            // a' = a_dec + strength . spike feeds the future (da carries in).
            da_dec += da;
            let dspike = self.cfg.adapt_strength * da;
            dv_pre += surr * dspike;
            da_dec += -surr * dspike;

            // Reset branch detached: v' = v_pre for the state path when not
            // spiking; on a spike the state resets to a constant.
            dv_pre += dv * (1.0 - spike);

            // v_pre = kappa v_prev + (1-kappa) drive.
            let dkappa = (tape.v_prev[t] - tape.drive[t]) * dv_pre;
            g_tau += dkappa * kappa * dt / (tau * tau);
            let ddrive = (1.0 - kappa) * dv_pre;
            for i in 0..d_s {
                g_w[i] += ddrive * x[i];
            }
            g_bias += ddrive;
            dv = kappa * dv_pre;

            if self.adaptive {
                // a_dec = kappa_a . a_prev_state
                g_tau_a += a_prev_state * da_dec * kappa_a * dt / (tau_a * tau_a);
                da = kappa_a * da_dec;
            }
        }

        let sg = sigmoid(self.theta_tau);
        let g_theta = g_tau * (hi - lo) * sg * (1.0 - sg);
        let mut flat = Vec::with_capacity(self.count_params());
        flat.extend_from_slice(&g_w);
        flat.push(g_bias);
        flat.push(g_theta);
        if self.adaptive {
            let sga = sigmoid(self.theta_tau_a);
            flat.push(g_tau_a * (hi - lo) * sga * (1.0 - sga));
        }
        Ok(flat)
    }

    fn layout(&self) -> Vec<Section> {
        let mut out = vec![
            Section::new("w", self.cfg.d_s),
            Section::new("bias", 1),
            Section::new("theta_tau", 1),
        ];
        if self.adaptive {
            out.push(Section::new("theta_tau_a", 1));
        }
        out
    }

    fn trainable(&self) -> Vec<f64> {
        let mut flat = self.w.clone();
        flat.push(self.bias);
        flat.push(self.theta_tau);
        if self.adaptive {
            flat.push(self.theta_tau_a);
        }
        flat
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        check_flat_len(self.count_params(), flat.len())?;
        let d_s = self.cfg.d_s;
        self.w.copy_from_slice(&flat[..d_s]);
        self.bias = flat[d_s];
        self.theta_tau = flat[d_s + 1];
        if self.adaptive {
            self.theta_tau_a = flat[d_s + 2];
        }
        Ok(())
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::NonDifferentiable
    }
}
