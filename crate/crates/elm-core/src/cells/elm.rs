//! Expressive leaky memory (ELM) neuron cell and its branch variant.
//!
//! Per step with elapsed time dt:
//!   kappa_s = exp(-dt/tau_s)            s' = kappa_s.s + w_s.x
//!   kappa_m = exp(-dt/tau_m)            c  = kappa_m.m
//!   delta_m = tanh(MLP([r(s'), c]))     r = branch sums of s' (or s' itself)
//!   original: m' = c + lambda(1-kappa_m).delta_m
//!   improved: m' = c + (1-kappa_lambda).delta_m, kappa_lambda = exp(-dt.lambda/tau_m)
//!   y = w_y.m' + b_y
//!
//! Memory timescales are trainable through a sigmoid rectification
//! tau = lo + (hi-lo).sigmoid(theta), keeping them strictly inside (lo, hi).
//! Synapse weights are stored unconstrained and rectified with max(0, .);
//! they are trainable only in the branch variant.

use crate::cells::{check_flat_len, Cell, Mode, Section, Smoothness};
use crate::error::{Error, Result};
use crate::numerics::{
    all_finite, bias_uniform_init, kaiming_uniform_init, logit, sigmoid, sigmoid_bounding,
    Matrix, Rng,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElmVariant {
    Original,
    Improved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauSpacing {
    Linear,
    Log,
}

/// Initialization targets for the memory timescales.
#[derive(Debug, Clone, Copy)]
pub struct TauInit {
    pub spacing: TauSpacing,
    pub lo_ms: f64,
    pub hi_ms: f64,
}

/// Assignment of synapses to branches: `d_tree` windows of `d_brch`
/// consecutive synapses, equally spaced across the synapse vector; windows
/// overlap when `d_tree * d_brch > d_s` (oversampling).
#[derive(Debug, Clone)]
pub struct BranchLayout {
    pub d_tree: usize,
    pub d_brch: usize,
    pub window_starts: Vec<usize>,
}

impl BranchLayout {
    /// Stride rule: `start[j] = round(j * (d_s - d_brch) / (d_tree - 1))`,
    /// with a single window starting at 0 when `d_tree == 1`.
    pub fn new(d_s: usize, d_tree: usize, d_brch: usize) -> Result<Self> {
        if d_tree == 0 || d_brch == 0 {
            return Err(Error::Invalid("branch layout: d_tree and d_brch must be >= 1".into()));
        }
        if d_brch > d_s {
            return Err(Error::Invalid(format!(
                "branch layout: d_brch {d_brch} exceeds synapse count {d_s}"
            )));
        }
        let span = (d_s - d_brch) as f64;
        let window_starts: Vec<usize> = (0..d_tree)
            .map(|j| {
                if d_tree == 1 {
                    0
                } else {
                    (j as f64 * span / (d_tree - 1) as f64).round() as usize
                }
            })
            .collect();
        for &start in &window_starts {
            if start + d_brch > d_s {
                return Err(Error::Invalid(format!(
                    "branch layout: window [{start}, {}) out of range for d_s {d_s}",
                    start + d_brch
                )));
            }
        }
        Ok(BranchLayout { d_tree, d_brch, window_starts })
    }

    /// Branch activations: each branch is the plain sum of its window of
    /// synaptic traces (the traces already carry the synapse weights).
    pub fn reduce(&self, traces: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_tree];
        self.reduce_into(traces, &mut out);
        out
    }

    #[inline]
    fn reduce_into(&self, traces: &[f64], out: &mut [f64]) {
        for (j, &start) in self.window_starts.iter().enumerate() {
            out[j] = traces[start..start + self.d_brch].iter().sum();
        }
    }

    #[inline]
    fn scatter_add(&self, branch_grads: &[f64], trace_grads: &mut [f64]) {
        for (j, &start) in self.window_starts.iter().enumerate() {
            let g = branch_grads[j];
            if g == 0.0 {
                continue;
            }
            for t in &mut trace_grads[start..start + self.d_brch] {
                *t += g;
            }
        }
    }
}

/// Standalone form of the branch reduction.
pub fn branch_reduce(layout: &BranchLayout, traces: &[f64]) -> Result<Vec<f64>> {
    let needed = layout.window_starts.iter().map(|s| s + layout.d_brch).max().unwrap_or(0);
    if traces.len() < needed {
        return Err(Error::Shape(format!(
            "branch_reduce: trace length {} shorter than layout extent {needed}",
            traces.len()
        )));
    }
    Ok(layout.reduce(traces))
}

#[derive(Debug, Clone)]
pub struct ElmConfig {
    pub d_s: usize,
    pub d_m: usize,
    pub d_o: usize,
    /// Hidden width; defaults to 2 * d_m.
    pub d_mlp: Option<usize>,
    /// Number of hidden layers; 0 gives purely linear integration.
    pub l_mlp: usize,
    pub variant: ElmVariant,
    pub lambda: f64,
    pub tau_s_ms: f64,
    pub tau_m_init: TauInit,
    pub tau_bounds: (f64, f64),
    /// `(d_tree, d_brch)`; enables the branch variant with trainable w_s.
    pub branch: Option<(usize, usize)>,
    pub w_s_init: f64,
    pub dropout_p: f64,
    /// Conditioning for a heavily imbalanced binary head (the spike logit of
    /// teacher fitting): zero-initializes readout row 1 and sets its bias to
    /// the given label log-odds, so the head's ranking direction is set by
    /// the first gradients instead of a random sign.
    pub spike_head_bias: Option<f64>,
}

impl ElmConfig {
    /// Recommended defaults: d_mlp = 2 d_m, one hidden layer, lambda = 5,
    /// tau_s = 5 ms, tau_m log-spaced on [1, 150] ms with matching bounds.
    pub fn new(d_s: usize, d_m: usize, d_o: usize) -> Self {
        ElmConfig {
            d_s,
            d_m,
            d_o,
            d_mlp: None,
            l_mlp: 1,
            variant: ElmVariant::Original,
            lambda: 5.0,
            tau_s_ms: 5.0,
            tau_m_init: TauInit { spacing: TauSpacing::Log, lo_ms: 1.0, hi_ms: 150.0 },
            tau_bounds: (1.0, 150.0),
            branch: None,
            w_s_init: 0.5,
            dropout_p: 0.0,
            spike_head_bias: None,
        }
    }
}

/// Per-step hidden state.
#[derive(Debug, Clone)]
pub struct ElmState {
    pub s: Vec<f64>,
    pub m: Vec<f64>,
}

impl ElmState {
    pub fn zeros(d_s: usize, d_m: usize) -> Self {
        ElmState { s: vec![0.0; d_s], m: vec![0.0; d_m] }
    }
}

/// Recorded forward intermediates for one sequence.
pub struct ElmTape {
    xs: Vec<f64>,
    dts: Vec<f64>,
    steps: usize,
    s: Vec<f64>,        // T x d_s, post-update traces
    m: Vec<f64>,        // T x d_m, post-update memory
    kappa_m: Vec<f64>,  // T x d_m
    kappa_lam: Vec<f64>, // T x d_m, improved variant only
    pre: Vec<f64>,      // T x (l_mlp * d_mlp) hidden pre-activations
    delta_m: Vec<f64>,  // T x d_m
    drop: Option<Vec<f64>>, // T x (l_mlp * d_mlp) mask scales, train mode only
    m0: Vec<f64>,
}

pub struct ElmCell {
    cfg: ElmConfig,
    d_mlp: usize,
    d_in: usize, // MLP input width minus d_m: d_tree or d_s
    branch: Option<BranchLayout>,
    w_s_raw: Vec<f64>,
    tau_s: Vec<f64>,
    theta_m: Vec<f64>,
    mlp_w: Vec<Matrix>, // l_mlp hidden layers then the output layer
    mlp_b: Vec<Vec<f64>>,
    w_y: Matrix,
    b_y: Vec<f64>,
}

impl ElmCell {
    pub fn new(cfg: ElmConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.d_s == 0 || cfg.d_m == 0 || cfg.d_o == 0 {
            return Err(Error::Invalid("elm: d_s, d_m, d_o must be >= 1".into()));
        }
        if !(cfg.lambda > 0.0) {
            return Err(Error::Invalid(format!("elm: lambda must be > 0, got {}", cfg.lambda)));
        }
        let (lo, hi) = cfg.tau_bounds;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Invalid(format!("elm: tau bounds need 0 < lo < hi, got ({lo}, {hi})")));
        }
        if !(cfg.tau_s_ms > 0.0) {
            return Err(Error::Invalid("elm: tau_s must be > 0".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout_p) {
            return Err(Error::Invalid("elm: dropout_p must lie in [0, 1)".into()));
        }
        let branch = match cfg.branch {
            Some((d_tree, d_brch)) => Some(BranchLayout::new(cfg.d_s, d_tree, d_brch)?),
            None => None,
        };
        let d_in = branch.as_ref().map_or(cfg.d_s, |b| b.d_tree);
        let d_mlp = cfg.d_mlp.unwrap_or(2 * cfg.d_m);
        if cfg.l_mlp > 0 && d_mlp == 0 {
            return Err(Error::Invalid("elm: d_mlp must be >= 1 when l_mlp > 0".into()));
        }

        let theta_m = init_theta(&cfg.tau_m_init, cfg.tau_bounds, cfg.d_m)?;

        let mut rng_mlp = rng.substream("elm.mlp");
        let mut mlp_w = Vec::new();
        let mut mlp_b = Vec::new();
        let mut fan_in = d_in + cfg.d_m;
        for _ in 0..cfg.l_mlp {
            mlp_w.push(kaiming_uniform_init(&mut rng_mlp, fan_in, d_mlp)?);
            mlp_b.push(bias_uniform_init(&mut rng_mlp, fan_in, d_mlp));
            fan_in = d_mlp;
        }
        mlp_w.push(kaiming_uniform_init(&mut rng_mlp, fan_in, cfg.d_m)?);
        mlp_b.push(bias_uniform_init(&mut rng_mlp, fan_in, cfg.d_m));

        // Memory units reach O(lambda) while kaiming assumes O(1) inputs;
        // rescale the memory columns of the first layer (and the readout,
        // which consumes m directly) so activations start well-conditioned.
        let m_scale = 1.0 / cfg.lambda.max(1.0);
        if m_scale < 1.0 {
            let w0 = &mut mlp_w[0];
            for r in 0..w0.rows() {
                for c in d_in..w0.cols() {
                    w0.set(r, c, w0.get(r, c) * m_scale);
                }
            }
        }

        let mut rng_out = rng.substream("elm.readout");
        let mut w_y = kaiming_uniform_init(&mut rng_out, cfg.d_m, cfg.d_o)?;
        let mut b_y = bias_uniform_init(&mut rng_out, cfg.d_m, cfg.d_o);
        if let Some(log_odds) = cfg.spike_head_bias {
            if cfg.d_o < 2 {
                return Err(Error::Invalid("elm: spike_head_bias needs d_o >= 2".into()));
            }
            for j in 0..cfg.d_m {
                w_y.set(1, j, 0.0);
            }
            b_y[1] = log_odds;
        }

        Ok(ElmCell {
            w_s_raw: vec![cfg.w_s_init; cfg.d_s],
            tau_s: vec![cfg.tau_s_ms; cfg.d_s],
            theta_m,
            mlp_w,
            mlp_b,
            w_y,
            b_y,
            d_mlp,
            d_in,
            branch,
            cfg,
        })
    }

    pub fn config(&self) -> &ElmConfig {
        &self.cfg
    }

    pub fn variant(&self) -> ElmVariant {
        self.cfg.variant
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.lambda
    }

    pub fn d_m(&self) -> usize {
        self.cfg.d_m
    }

    /// Effective memory timescales, strictly inside the configured bounds.
    pub fn tau_m(&self) -> Vec<f64> {
        let (lo, hi) = self.cfg.tau_bounds;
        self.theta_m.iter().map(|&t| lo + (hi - lo) * sigmoid_bounding(t)).collect()
    }

    /// Rectified synapse weights.
    pub fn w_s_eff(&self) -> Vec<f64> {
        self.w_s_raw.iter().map(|&w| w.max(0.0)).collect()
    }

    fn w_s_trainable(&self) -> bool {
        self.branch.is_some()
    }

    pub fn zero_state(&self) -> ElmState {
        ElmState::zeros(self.cfg.d_s, self.cfg.d_m)
    }

    /// Single exact step; pure in all arguments.
    pub fn step(&self, state: &ElmState, x: &[f64], dt_ms: f64) -> Result<(ElmState, Vec<f64>)> {
        if x.len() != self.cfg.d_s {
            return Err(Error::Shape(format!(
                "elm step: input length {} != d_s {}",
                x.len(),
                self.cfg.d_s
            )));
        }
        if !(dt_ms > 0.0) {
            return Err(Error::Invalid(format!("elm step: dt must be > 0, got {dt_ms}")));
        }
        let (outputs, tape) = self.rollout_from(state, x, &[dt_ms], Mode::Eval)?;
        let t_last = tape.steps - 1;
        let state = ElmState {
            s: tape.s[t_last * self.cfg.d_s..(t_last + 1) * self.cfg.d_s].to_vec(),
            m: tape.m[t_last * self.cfg.d_m..(t_last + 1) * self.cfg.d_m].to_vec(),
        };
        Ok((state, outputs))
    }

    /// Rollout from an explicit initial state (the trait rollout starts from
    /// zeros, matching s0 = 0, m0 = 0).
    pub fn rollout_from(
        &self,
        state0: &ElmState,
        xs: &[f64],
        dts: &[f64],
        mode: Mode,
    ) -> Result<(Vec<f64>, ElmTape)> {
        let d_s = self.cfg.d_s;
        let d_m = self.cfg.d_m;
        let d_o = self.cfg.d_o;
        let l = self.cfg.l_mlp;
        let steps = dts.len();
        if xs.len() != steps * d_s {
            return Err(Error::Shape(format!(
                "elm rollout: inputs length {} != steps {steps} x d_s {d_s}",
                xs.len()
            )));
        }
        if state0.s.len() != d_s || state0.m.len() != d_m {
            return Err(Error::Shape("elm rollout: initial state dims mismatch".into()));
        }

        let mut tape = ElmTape {
            xs: xs.to_vec(),
            dts: dts.to_vec(),
            steps,
            s: vec![0.0; steps * d_s],
            m: vec![0.0; steps * d_m],
            kappa_m: vec![0.0; steps * d_m],
            kappa_lam: if self.cfg.variant == ElmVariant::Improved {
                vec![0.0; steps * d_m]
            } else {
                Vec::new()
            },
            pre: vec![0.0; steps * l * self.d_mlp],
            delta_m: vec![0.0; steps * d_m],
            drop: None,
            m0: state0.m.clone(),
        };
        let mut outputs = vec![0.0; steps * d_o];
        if steps == 0 {
            return Ok((outputs, tape));
        }

        let p = self.cfg.dropout_p;
        let mut drop_rng = match mode {
            Mode::Train { rng } if p > 0.0 && l > 0 => {
                tape.drop = Some(vec![0.0; steps * l * self.d_mlp]);
                Some(rng)
            }
            _ => None,
        };
        let keep_scale = 1.0 / (1.0 - p);

        let tau_m = self.tau_m();
        let w_eff = self.w_s_eff();
        let lambda = self.cfg.lambda;

        let mut s = state0.s.clone();
        let mut m = state0.m.clone();
        let mut z = vec![0.0; self.d_in + d_m];
        let mut h = vec![0.0; self.d_mlp.max(self.d_in + d_m)];
        let mut h_next = vec![0.0; self.d_mlp];
        let mut u = vec![0.0; d_m];

        let mut prev_dt = f64::NAN;
        let mut kappa_s = vec![0.0; d_s];
        let mut kappa_m = vec![0.0; d_m];
        let mut kappa_lam = vec![0.0; d_m];

        for t in 0..steps {
            let dt = dts[t];
            if !(dt > 0.0) {
                return Err(Error::Invalid(format!("elm rollout: dt must be > 0 at step {t}")));
            }
            if dt != prev_dt {
                for i in 0..d_s {
                    kappa_s[i] = (-dt / self.tau_s[i]).exp();
                }
                for j in 0..d_m {
                    kappa_m[j] = (-dt / tau_m[j]).exp();
                    if self.cfg.variant == ElmVariant::Improved {
                        kappa_lam[j] = (-dt * lambda / tau_m[j]).exp();
                    }
                }
                prev_dt = dt;
            }

            let x = &xs[t * d_s..(t + 1) * d_s];
            for i in 0..d_s {
                s[i] = kappa_s[i] * s[i] + w_eff[i] * x[i];
            }

            // MLP input: [branch(s) or s, decayed memory].
            match &self.branch {
                Some(b) => b.reduce_into(&s, &mut z[..self.d_in]),
                None => z[..d_s].copy_from_slice(&s),
            }
            for j in 0..d_m {
                z[self.d_in + j] = kappa_m[j] * m[j];
            }

            let mut cur: &[f64] = &z;
            for k in 0..l {
                let pre = &mut tape.pre[(t * l + k) * self.d_mlp..(t * l + k + 1) * self.d_mlp];
                self.mlp_w[k].matvec_into(cur, &mut h_next[..self.d_mlp]);
                for (j, pj) in pre.iter_mut().enumerate() {
                    *pj = h_next[j] + self.mlp_b[k][j];
                }
                for j in 0..self.d_mlp {
                    let mut a = pre[j].max(0.0);
                    if let Some(rng) = drop_rng.as_deref_mut() {
                        let scale = if rng.uniform() < p { 0.0 } else { keep_scale };
                        tape.drop.as_mut().unwrap()[(t * l + k) * self.d_mlp + j] = scale;
                        a *= scale;
                    }
                    h[j] = a;
                }
                cur = &h[..self.d_mlp];
            }
            self.mlp_w[l].matvec_into(cur, &mut u);
            let dm_row = &mut tape.delta_m[t * d_m..(t + 1) * d_m];
            for j in 0..d_m {
                dm_row[j] = (u[j] + self.mlp_b[l][j]).tanh();
            }

            for j in 0..d_m {
                let c = kappa_m[j] * m[j];
                let coeff = match self.cfg.variant {
                    ElmVariant::Original => lambda * (1.0 - kappa_m[j]),
                    ElmVariant::Improved => 1.0 - kappa_lam[j],
                };
                m[j] = c + coeff * dm_row[j];
            }

            let y = &mut outputs[t * d_o..(t + 1) * d_o];
            self.w_y.matvec_into(&m, y);
            for (yj, bj) in y.iter_mut().zip(self.b_y.iter()) {
                *yj += bj;
            }

            if !(all_finite(&s) && all_finite(&m) && all_finite(y)) {
                return Err(Error::NonFinite { seq: 0, step: t });
            }

            tape.s[t * d_s..(t + 1) * d_s].copy_from_slice(&s);
            tape.m[t * d_m..(t + 1) * d_m].copy_from_slice(&m);
            tape.kappa_m[t * d_m..(t + 1) * d_m].copy_from_slice(&kappa_m);
            if self.cfg.variant == ElmVariant::Improved {
                tape.kappa_lam[t * d_m..(t + 1) * d_m].copy_from_slice(&kappa_lam);
            }
        }

        Ok((outputs, tape))
    }
}

fn init_theta(init: &TauInit, bounds: (f64, f64), d_m: usize) -> Result<Vec<f64>> {
    let (lo, hi) = bounds;
    if !(init.lo_ms > 0.0 && init.lo_ms <= init.hi_ms) {
        return Err(Error::Invalid(format!(
            "elm: tau init range ({}, {}) must satisfy 0 < lo <= hi",
            init.lo_ms, init.hi_ms
        )));
    }
    let targets: Vec<f64> = match (init.spacing, d_m) {
        (_, 0) => Vec::new(),
        (TauSpacing::Linear, 1) => vec![0.5 * (init.lo_ms + init.hi_ms)],
        (TauSpacing::Log, 1) => vec![(init.lo_ms * init.hi_ms).sqrt()],
        (TauSpacing::Linear, n) => (0..n)
            .map(|j| init.lo_ms + (init.hi_ms - init.lo_ms) * j as f64 / (n - 1) as f64)
            .collect(),
        (TauSpacing::Log, n) => {
            let (la, lb) = (init.lo_ms.ln(), init.hi_ms.ln());
            (0..n).map(|j| (la + (lb - la) * j as f64 / (n - 1) as f64).exp()).collect()
        }
    };
    // Invert tau = lo + (hi-lo) sigmoid(theta); fractions are clamped away
    // from {0, 1} so targets on the bounds stay strictly inside them.
    targets
        .into_iter()
        .map(|tau| {
            let frac = ((tau - lo) / (hi - lo)).clamp(1e-3, 1.0 - 1e-3);
            Ok(logit(frac))
        })
        .collect()
}

struct ElmGrads {
    w_s: Vec<f64>,
    theta_m: Vec<f64>,
    mlp_w: Vec<Matrix>,
    mlp_b: Vec<Vec<f64>>,
    w_y: Matrix,
    b_y: Vec<f64>,
}

impl Cell for ElmCell {
    type Tape = ElmTape;

    fn input_dim(&self) -> usize {
        self.cfg.d_s
    }

    fn output_dim(&self) -> usize {
        self.cfg.d_o
    }

    fn rollout(&self, xs: &[f64], dts: &[f64], mode: Mode) -> Result<(Vec<f64>, Self::Tape)> {
        self.rollout_from(&self.zero_state(), xs, dts, mode)
    }

    fn backward(&self, tape: &ElmTape, out_grads: &[f64]) -> Result<Vec<f64>> {
        let d_s = self.cfg.d_s;
        let d_m = self.cfg.d_m;
        let d_o = self.cfg.d_o;
        let l = self.cfg.l_mlp;
        let steps = tape.steps;
        if out_grads.len() != steps * d_o {
            return Err(Error::Shape(format!(
                "elm backward: out_grads length {} != steps {steps} x d_o {d_o}",
                out_grads.len()
            )));
        }
        if tape.s.len() != steps * d_s || tape.m.len() != steps * d_m {
            return Err(Error::Shape("elm backward: tape/params shape mismatch".into()));
        }

        let tau_m = self.tau_m();
        let (lo, hi) = self.cfg.tau_bounds;
        let lambda = self.cfg.lambda;
        let w_eff = self.w_s_eff();

        let mut g = ElmGrads {
            w_s: vec![0.0; d_s],
            theta_m: vec![0.0; d_m],
            mlp_w: self.mlp_w.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            mlp_b: self.mlp_b.iter().map(|b| vec![0.0; b.len()]).collect(),
            w_y: Matrix::zeros(self.w_y.rows(), self.w_y.cols()),
            b_y: vec![0.0; d_o],
        };

        let mut dtau = vec![0.0; d_m];
        let mut ds = vec![0.0; d_s];
        let mut dm = vec![0.0; d_m];

        let mut z = vec![0.0; self.d_in + d_m];
        // Hidden activations recomputed from taped pre-activations.
        let mut hs: Vec<Vec<f64>> = (0..l).map(|_| vec![0.0; self.d_mlp]).collect();
        let mut du = vec![0.0; d_m];
        let mut dh = vec![0.0; self.d_mlp.max(self.d_in + d_m)];
        let mut dh_prev = vec![0.0; self.d_mlp.max(self.d_in + d_m)];

        let mut prev_dt = f64::NAN;
        let mut kappa_s = vec![0.0; d_s];

        for t in (0..steps).rev() {
            let dt = tape.dts[t];
            if dt != prev_dt {
                for i in 0..d_s {
                    kappa_s[i] = (-dt / self.tau_s[i]).exp();
                }
                prev_dt = dt;
            }
            let x = &tape.xs[t * d_s..(t + 1) * d_s];
            let s_t = &tape.s[t * d_s..(t + 1) * d_s];
            let m_t = &tape.m[t * d_m..(t + 1) * d_m];
            let m_prev = if t == 0 { &tape.m0[..] } else { &tape.m[(t - 1) * d_m..t * d_m] };
            let kappa_m = &tape.kappa_m[t * d_m..(t + 1) * d_m];
            let delta_m = &tape.delta_m[t * d_m..(t + 1) * d_m];

            // Readout.
            let gy = &out_grads[t * d_o..(t + 1) * d_o];
            g.w_y.add_outer(gy, m_t);
            for (b, &v) in g.b_y.iter_mut().zip(gy.iter()) {
                *b += v;
            }
            self.w_y.matvec_t_add(gy, &mut dm);

            // Memory mix m = c + coeff . delta_m.
            let mut d_delta = vec![0.0; d_m];
            let mut dc = vec![0.0; d_m];
            for j in 0..d_m {
                let coeff = match self.cfg.variant {
                    ElmVariant::Original => lambda * (1.0 - kappa_m[j]),
                    ElmVariant::Improved => 1.0 - tape.kappa_lam[t * d_m + j],
                };
                d_delta[j] = coeff * dm[j];
                dc[j] = dm[j];
                match self.cfg.variant {
                    ElmVariant::Original => {
                        // d coeff / d kappa_m = -lambda
                        let dkap = -lambda * delta_m[j] * dm[j];
                        dtau[j] += dkap * kappa_m[j] * dt / (tau_m[j] * tau_m[j]);
                    }
                    ElmVariant::Improved => {
                        let klam = tape.kappa_lam[t * d_m + j];
                        let dklam = -delta_m[j] * dm[j];
                        dtau[j] += dklam * klam * dt * lambda / (tau_m[j] * tau_m[j]);
                    }
                }
            }

            // Recompute MLP input and hidden activations from the tape.
            match &self.branch {
                Some(b) => b.reduce_into(s_t, &mut z[..self.d_in]),
                None => z[..d_s].copy_from_slice(s_t),
            }
            for j in 0..d_m {
                z[self.d_in + j] = kappa_m[j] * m_prev[j];
            }
            for k in 0..l {
                let pre = &tape.pre[(t * l + k) * self.d_mlp..(t * l + k + 1) * self.d_mlp];
                for j in 0..self.d_mlp {
                    let mut a = pre[j].max(0.0);
                    if let Some(drop) = &tape.drop {
                        a *= drop[(t * l + k) * self.d_mlp + j];
                    }
                    hs[k][j] = a;
                }
            }

            // tanh head.
            for j in 0..d_m {
                du[j] = (1.0 - delta_m[j] * delta_m[j]) * d_delta[j];
            }

            // MLP reverse.
            let top_in: &[f64] = if l == 0 { &z } else { &hs[l - 1] };
            g.mlp_w[l].add_outer(&du, top_in);
            for (b, &v) in g.mlp_b[l].iter_mut().zip(du.iter()) {
                *b += v;
            }
            let mut width = if l == 0 { self.d_in + d_m } else { self.d_mlp };
            dh[..width].fill(0.0);
            self.mlp_w[l].matvec_t_add(&du, &mut dh[..width]);
            for k in (0..l).rev() {
                let pre = &tape.pre[(t * l + k) * self.d_mlp..(t * l + k + 1) * self.d_mlp];
                // Through dropout mask and ReLU gate.
                for j in 0..self.d_mlp {
                    let mut gj = dh[j];
                    if let Some(drop) = &tape.drop {
                        gj *= drop[(t * l + k) * self.d_mlp + j];
                    }
                    // ReLU subgradient at 0 is 0.
                    dh[j] = if pre[j] > 0.0 { gj } else { 0.0 };
                }
                let below: &[f64] = if k == 0 { &z } else { &hs[k - 1] };
                g.mlp_w[k].add_outer(&dh[..self.d_mlp], below);
                for (b, &v) in g.mlp_b[k].iter_mut().zip(dh[..self.d_mlp].iter()) {
                    *b += v;
                }
                width = if k == 0 { self.d_in + d_m } else { self.d_mlp };
                dh_prev[..width].fill(0.0);
                self.mlp_w[k].matvec_t_add(&dh[..self.d_mlp], &mut dh_prev[..width]);
                std::mem::swap(&mut dh, &mut dh_prev);
            }

            // Split the MLP input gradient.
            match &self.branch {
                Some(b) => b.scatter_add(&dh[..self.d_in], &mut ds),
                None => {
                    for i in 0..d_s {
                        ds[i] += dh[i];
                    }
                }
            }
            for j in 0..d_m {
                dc[j] += dh[self.d_in + j];
            }

            // c = kappa_m . m_prev.
            for j in 0..d_m {
                let dkap = m_prev[j] * dc[j];
                dtau[j] += dkap * kappa_m[j] * dt / (tau_m[j] * tau_m[j]);
                dm[j] = kappa_m[j] * dc[j];
            }

            // s = kappa_s . s_prev + w_eff . x.
            if self.w_s_trainable() {
                for i in 0..d_s {
                    if self.w_s_raw[i] > 0.0 {
                        g.w_s[i] += ds[i] * x[i];
                    }
                }
            }
            let _ = &w_eff; // weights enter ds only through x, already in traces
            for i in 0..d_s {
                ds[i] *= kappa_s[i];
            }
        }

        // Chain tau -> theta through the sigmoid bounding.
        for j in 0..d_m {
            let sg = sigmoid(self.theta_m[j]);
            g.theta_m[j] = dtau[j] * (hi - lo) * sg * (1.0 - sg);
        }

        // Flatten in layout order.
        let mut flat = Vec::with_capacity(self.count_params());
        if self.w_s_trainable() {
            flat.extend_from_slice(&g.w_s);
        }
        flat.extend_from_slice(&g.theta_m);
        for k in 0..=l {
            flat.extend_from_slice(g.mlp_w[k].data());
            flat.extend_from_slice(&g.mlp_b[k]);
        }
        flat.extend_from_slice(g.w_y.data());
        flat.extend_from_slice(&g.b_y);
        Ok(flat)
    }

    fn layout(&self) -> Vec<Section> {
        let mut out = Vec::new();
        if self.w_s_trainable() {
            out.push(Section::new("w_s", self.cfg.d_s));
        }
        out.push(Section::new("theta_m", self.cfg.d_m));
        for k in 0..=self.cfg.l_mlp {
            let w = &self.mlp_w[k];
            out.push(Section::new(&format!("mlp.w{k}"), w.rows() * w.cols()));
            out.push(Section::new(&format!("mlp.b{k}"), self.mlp_b[k].len()));
        }
        out.push(Section::new("w_y", self.cfg.d_o * self.cfg.d_m));
        out.push(Section::new("b_y", self.cfg.d_o));
        out
    }

    fn trainable(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.count_params());
        if self.w_s_trainable() {
            flat.extend_from_slice(&self.w_s_raw);
        }
        flat.extend_from_slice(&self.theta_m);
        for k in 0..=self.cfg.l_mlp {
            flat.extend_from_slice(self.mlp_w[k].data());
            flat.extend_from_slice(&self.mlp_b[k]);
        }
        flat.extend_from_slice(self.w_y.data());
        flat.extend_from_slice(&self.b_y);
        flat
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        check_flat_len(self.count_params(), flat.len())?;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s
        };
        if self.w_s_trainable() {
            self.w_s_raw.copy_from_slice(take(self.cfg.d_s));
        }
        self.theta_m.copy_from_slice(take(self.cfg.d_m));
        for k in 0..=self.cfg.l_mlp {
            let n = self.mlp_w[k].rows() * self.mlp_w[k].cols();
            self.mlp_w[k].data_mut().copy_from_slice(take(n));
            let nb = self.mlp_b[k].len();
            self.mlp_b[k].copy_from_slice(take(nb));
        }
        let ny = self.cfg.d_o * self.cfg.d_m;
        self.w_y.data_mut().copy_from_slice(take(ny));
        self.b_y.copy_from_slice(take(self.cfg.d_o));
        Ok(())
    }

    fn smoothness(&self) -> Smoothness {
        if self.cfg.l_mlp == 0 {
            Smoothness::Smooth
        } else {
            Smoothness::PiecewiseSmooth
        }
    }

    fn kink_margin(&self, tape: &ElmTape) -> f64 {
        if self.cfg.l_mlp == 0 {
            return f64::INFINITY;
        }
        tape.pre.iter().fold(f64::INFINITY, |acc, &a| acc.min(a.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Cell;

    fn small_cell(variant: ElmVariant) -> ElmCell {
        let mut rng = Rng::new(42);
        let mut cfg = ElmConfig::new(3, 2, 2);
        cfg.variant = variant;
        ElmCell::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_parameter_fixed_point() {
        let mut cell = small_cell(ElmVariant::Original);
        let zeros = vec![0.0; cell.count_params()];
        cell.set_trainable(&zeros).unwrap();
        // theta = 0 is fine; zero MLP and readout give delta_m = 0, y = 0.
        let state = cell.zero_state();
        let (next, y) = cell.step(&state, &[1.0, -1.0, 1.0], 1.0).unwrap();
        assert!(next.m.iter().all(|&v| v == 0.0));
        assert!(y.iter().all(|&v| v == 0.0));
        // Traces still integrate input through the fixed w_s = 0.5.
        assert!(next.s.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pure_trace_decay_with_zero_input() {
        let mut rng = Rng::new(1);
        let mut cfg = ElmConfig::new(4, 2, 1);
        cfg.tau_s_ms = 10.0;
        let mut cell = ElmCell::new(cfg, &mut rng).unwrap();
        let zeros = vec![0.0; cell.count_params()];
        cell.set_trainable(&zeros).unwrap();
        let s0: Vec<f64> = (0..4).map(|i| 1.0 + i as f64).collect();
        let state = ElmState { s: s0.clone(), m: vec![0.0; 2] };
        let k = 5usize;
        let xs = vec![0.0; k * 4];
        let dts = vec![1.0; k];
        let (_, tape) = cell.rollout_from(&state, &xs, &dts, Mode::Eval).unwrap();
        let kappa = (-1.0f64 / 10.0).exp();
        let expect = kappa.powi(k as i32);
        for i in 0..4 {
            let got = tape.s[(k - 1) * 4 + i];
            assert!((got - s0[i] * expect).abs() < 1e-12, "trace {i}: {got}");
        }
    }

    #[test]
    fn memory_bounded_by_lambda() {
        // lambda = 10, |delta_m| <= 1 always => sup |m| <= 10 from m0 = 0.
        let mut rng = Rng::new(9);
        let mut cfg = ElmConfig::new(3, 2, 1);
        cfg.lambda = 10.0;
        cfg.tau_bounds = (1.0, 50.0);
        cfg.tau_m_init = TauInit { spacing: TauSpacing::Log, lo_ms: 1.0, hi_ms: 50.0 };
        let cell = ElmCell::new(cfg, &mut rng).unwrap();
        let steps = 10_000;
        let mut xs = Vec::with_capacity(steps * 3);
        for _ in 0..steps * 3 {
            xs.push(rng.clone().range(-2.0, 2.0));
        }
        let mut r = Rng::new(77);
        for x in xs.iter_mut() {
            *x = r.range(-2.0, 2.0);
        }
        let dts = vec![1.0; steps];
        let (_, tape) = cell.rollout(&xs, &dts, Mode::Eval).unwrap();
        let max_m = tape.m.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max_m <= 10.0, "max |m| = {max_m}");
    }

    #[test]
    fn branch_windows_and_reduce() {
        let layout = BranchLayout::new(12, 3, 4).unwrap();
        assert_eq!(layout.window_starts, vec![0, 4, 8]);
        let ones = vec![1.0; 12];
        assert_eq!(layout.reduce(&ones), vec![4.0, 4.0, 4.0]);
        let single = BranchLayout::new(12, 1, 12).unwrap();
        assert_eq!(single.window_starts, vec![0]);
        assert_eq!(single.reduce(&ones), vec![12.0]);
    }

    #[test]
    fn branch_layout_rejects_oversized_window() {
        assert!(BranchLayout::new(8, 2, 9).is_err());
    }

    #[test]
    fn branch_oversampling_overlaps() {
        // d_tree * d_brch > d_s: windows overlap but stay in range.
        let layout = BranchLayout::new(20, 10, 15).unwrap();
        assert_eq!(layout.window_starts.len(), 10);
        assert!(layout.window_starts.iter().all(|&s| s + 15 <= 20));
        assert_eq!(*layout.window_starts.last().unwrap(), 5);
    }

    #[test]
    fn branch_degenerates_to_vanilla() {
        // d_tree = d_s, d_brch = 1 with equal w_s is step-for-step vanilla.
        let rng = Rng::new(5);
        let mut cfg = ElmConfig::new(5, 3, 2);
        cfg.w_s_init = 0.5;
        let vanilla = ElmCell::new(cfg.clone(), &mut rng.clone()).unwrap();
        cfg.branch = Some((5, 1));
        let branch = ElmCell::new(cfg, &mut rng.clone()).unwrap();

        let steps = 20;
        let mut r = Rng::new(321);
        let xs: Vec<f64> = (0..steps * 5).map(|_| r.range(-1.0, 1.0)).collect();
        let dts = vec![2.0; steps];
        let (ya, _) = vanilla.rollout(&xs, &dts, Mode::Eval).unwrap();
        let (yb, _) = branch.rollout(&xs, &dts, Mode::Eval).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn tau_strictly_inside_bounds() {
        let mut rng = Rng::new(3);
        let mut cfg = ElmConfig::new(2, 4, 1);
        cfg.tau_bounds = (1.0, 100.0);
        cfg.tau_m_init = TauInit { spacing: TauSpacing::Log, lo_ms: 1.0, hi_ms: 100.0 };
        let mut cell = ElmCell::new(cfg, &mut rng).unwrap();
        for extreme in [-1e9, -37.0, 0.0, 37.0, 1e9] {
            let mut flat = cell.trainable();
            // theta_m sits first (no branch), d_m = 4.
            for th in flat.iter_mut().take(4) {
                *th = extreme;
            }
            cell.set_trainable(&flat).unwrap();
            for tau in cell.tau_m() {
                assert!(tau > 1.0 && tau < 100.0, "tau {tau} escaped bounds");
            }
        }
    }

    #[test]
    fn linear_single_memory_matches_scalar_recurrence() {
        // l_mlp = 0, d_m = 1 reduces to a leaky integrator with tanh
        // saturation; match the closed-form scalar recurrence.
        let mut rng = Rng::new(8);
        let mut cfg = ElmConfig::new(1, 1, 1);
        cfg.l_mlp = 0;
        cfg.lambda = 3.0;
        cfg.tau_s_ms = 4.0;
        cfg.tau_bounds = (1.0, 30.0);
        cfg.tau_m_init = TauInit { spacing: TauSpacing::Linear, lo_ms: 1.0, hi_ms: 30.0 };
        let cell = ElmCell::new(cfg, &mut rng).unwrap();

        let flat = cell.trainable();
        // layout: theta_m(1), mlp.w0(2), mlp.b0(1), w_y(1), b_y(1)
        let theta = flat[0];
        let (a_s, a_m, b0, wy, by) = (flat[1], flat[2], flat[3], flat[4], flat[5]);
        let tau = 1.0 + 29.0 * sigmoid(theta);

        let mut r = Rng::new(99);
        let steps = 50;
        let xs: Vec<f64> = (0..steps).map(|_| r.range(-1.0, 1.0)).collect();
        let dt = 1.5;
        let (ys, _) = cell.rollout(&xs, &vec![dt; steps], Mode::Eval).unwrap();

        let (ks, km) = ((-dt / 4.0f64).exp(), (-dt / tau).exp());
        let (mut s, mut m) = (0.0f64, 0.0f64);
        for t in 0..steps {
            s = ks * s + 0.5 * xs[t];
            let c = km * m;
            m = c + 3.0 * (1.0 - km) * (a_s * s + a_m * c + b0).tanh();
            let y = wy * m + by;
            assert!((y - ys[t]).abs() < 1e-12, "step {t}: {y} vs {}", ys[t]);
        }
    }

    #[test]
    fn param_count_hand_example() {
        // d_s=1, d_m=1, d_mlp=2, d_o=1: 2*2+2 + 2+1 + 1+1 + 1 = 12.
        let mut rng = Rng::new(0);
        let mut cfg = ElmConfig::new(1, 1, 1);
        cfg.d_mlp = Some(2);
        let cell = ElmCell::new(cfg, &mut rng).unwrap();
        assert_eq!(cell.count_params(), 12);
    }

    #[test]
    fn param_count_neuronio_scale() {
        let mut rng = Rng::new(0);
        let cfg = ElmConfig::new(1278, 20, 2);
        let cell = ElmCell::new(cfg, &mut rng).unwrap();
        assert_eq!(cell.count_params(), 52_842);
    }

    #[test]
    fn branch_adds_synapse_weights_to_count() {
        let mut rng = Rng::new(0);
        let mut cfg = ElmConfig::new(1278, 20, 2);
        cfg.branch = Some((45, 100));
        let branch = ElmCell::new(cfg, &mut rng).unwrap();
        let mut cfg2 = ElmConfig::new(1278, 20, 2);
        cfg2.branch = None;
        let vanilla = ElmCell::new(cfg2, &mut rng).unwrap();
        // Branch swaps the d_s-wide MLP input for d_tree and adds d_s weights.
        let expect_vanilla = vanilla.count_params();
        let diff = (1278 + 20) * 40 - (45 + 20) * 40;
        assert_eq!(branch.count_params(), expect_vanilla - diff + 1278);
    }

    #[test]
    fn variant_agreement_for_slow_memory() {
        // |lambda(1-k) - (1-k^lambda)| / (lambda(1-k)) < 1% when tau >= 100 lambda dt.
        let dt = 1.0;
        for lambda in [1.0, 2.0, 5.0, 10.0] {
            let mut tau = 100.0 * lambda * dt;
            while tau <= 1e6 {
                let k = (-dt / tau as f64).exp();
                let orig = lambda * (1.0 - k);
                let imp = 1.0 - (-dt * lambda / tau).exp();
                let rel = (orig - imp).abs() / orig;
                assert!(rel < 0.01, "lambda {lambda} tau {tau}: rel {rel}");
                tau *= 2.0;
            }
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let cell = small_cell(ElmVariant::Improved);
        let mut r = Rng::new(4);
        let xs: Vec<f64> = (0..30).map(|_| r.range(-1.0, 1.0)).collect();
        let dts = vec![1.0; 10];
        let (y1, _) = cell.rollout(&xs, &dts, Mode::Eval).unwrap();
        let (y2, _) = cell.rollout(&xs, &dts, Mode::Eval).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn zero_length_rollout_is_empty() {
        let cell = small_cell(ElmVariant::Original);
        let (ys, tape) = cell.rollout(&[], &[], Mode::Eval).unwrap();
        assert!(ys.is_empty());
        assert_eq!(tape.steps, 0);
    }

    #[test]
    fn rejects_dt_zero() {
        let cell = small_cell(ElmVariant::Original);
        assert!(cell.rollout(&[0.0; 3], &[0.0], Mode::Eval).is_err());
    }
}
