//! Standard 4-gate LSTM baseline with a linear readout, optional chrono bias
//! initialization for long effective timescales, per-step output dropout, and
//! variational recurrent dropout (one mask per sequence). The elapsed-time
//! argument is ignored: timescales are implicit in the gating.

use crate::cells::{check_flat_len, Cell, Mode, Section, Smoothness};
use crate::error::{Error, Result};
use crate::numerics::{
    all_finite, bias_uniform_init, kaiming_uniform_init, sigmoid, Matrix, Rng,
};

#[derive(Debug, Clone)]
pub struct LstmConfig {
    pub d_x: usize,
    pub d_h: usize,
    pub d_o: usize,
    /// Chrono initialization horizon T_max; forget biases are drawn as
    /// log(U(1, T_max - 1)) and input biases as their negation.
    pub chrono_t_max: Option<f64>,
    pub dropout_p: f64,
    pub recurrent_dropout_p: f64,
}

impl LstmConfig {
    pub fn new(d_x: usize, d_h: usize, d_o: usize) -> Self {
        LstmConfig {
            d_x,
            d_h,
            d_o,
            chrono_t_max: None,
            dropout_p: 0.0,
            recurrent_dropout_p: 0.0,
        }
    }
}

/// Forget-bias draws for chrono initialization: b_f ~ log(U(1, T_max - 1)).
/// T_max = 2 forces b_f = 0 exactly; T_max < 2 is rejected.
pub fn chrono_forget_biases(rng: &mut Rng, d_h: usize, t_max: f64) -> Result<Vec<f64>> {
    if t_max < 2.0 {
        return Err(Error::Invalid(format!("chrono init needs T_max >= 2, got {t_max}")));
    }
    Ok((0..d_h)
        .map(|_| if t_max == 2.0 { 0.0 } else { rng.range(1.0, t_max - 1.0).ln() })
        .collect())
}

// Gate order inside the packed 4*d_h rows.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_G: usize = 2;
const GATE_O: usize = 3;

pub struct LstmTape {
    steps: usize,
    xs: Vec<f64>,
    gates: Vec<f64>,  // T x 4 d_h post-activations, gate-major [i f g o]
    c: Vec<f64>,      // T x d_h cell states
    tanh_c: Vec<f64>, // T x d_h
    h: Vec<f64>,      // T x d_h hidden states
    rmask: Option<Vec<f64>>, // d_h variational mask scales
    omask: Option<Vec<f64>>, // T x d_h output mask scales
}

pub struct LstmCell {
    cfg: LstmConfig,
    w: Matrix, // 4 d_h x (d_x + d_h), input [x; h]
    b: Vec<f64>,
    w_y: Matrix,
    b_y: Vec<f64>,
}

impl LstmCell {
    pub fn new(cfg: LstmConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.d_x == 0 || cfg.d_h == 0 || cfg.d_o == 0 {
            return Err(Error::Invalid("lstm: all dims must be >= 1".into()));
        }
        for p in [cfg.dropout_p, cfg.recurrent_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Invalid("lstm: dropout probabilities must lie in [0, 1)".into()));
            }
        }
        let d_h = cfg.d_h;
        let fan_in = cfg.d_x + d_h;
        let mut rng_w = rng.substream("lstm.gates");
        let w = kaiming_uniform_init(&mut rng_w, fan_in, 4 * d_h)?;
        let mut b = vec![0.0; 4 * d_h];
        if let Some(t_max) = cfg.chrono_t_max {
            let mut rng_c = rng.substream("lstm.chrono");
            let bf = chrono_forget_biases(&mut rng_c, d_h, t_max)?;
            for j in 0..d_h {
                b[GATE_F * d_h + j] = bf[j];
                b[GATE_I * d_h + j] = -bf[j];
            }
        }
        let mut rng_y = rng.substream("lstm.readout");
        let w_y = kaiming_uniform_init(&mut rng_y, d_h, cfg.d_o)?;
        let b_y = bias_uniform_init(&mut rng_y, d_h, cfg.d_o);
        Ok(LstmCell { cfg, w, b, w_y, b_y })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }

    pub fn forget_biases(&self) -> &[f64] {
        &self.b[GATE_F * self.cfg.d_h..(GATE_F + 1) * self.cfg.d_h]
    }
}

impl Cell for LstmCell {
    type Tape = LstmTape;

    fn input_dim(&self) -> usize {
        self.cfg.d_x
    }

    fn output_dim(&self) -> usize {
        self.cfg.d_o
    }

    fn rollout(&self, xs: &[f64], dts: &[f64], mode: Mode) -> Result<(Vec<f64>, Self::Tape)> {
        let (d_x, d_h, d_o) = (self.cfg.d_x, self.cfg.d_h, self.cfg.d_o);
        let steps = dts.len();
        if xs.len() != steps * d_x {
            return Err(Error::Shape(format!(
                "lstm rollout: inputs length {} != steps {steps} x d_x {d_x}",
                xs.len()
            )));
        }
        let mut tape = LstmTape {
            steps,
            xs: xs.to_vec(),
            gates: vec![0.0; steps * 4 * d_h],
            c: vec![0.0; steps * d_h],
            tanh_c: vec![0.0; steps * d_h],
            h: vec![0.0; steps * d_h],
            rmask: None,
            omask: None,
        };
        let mut outputs = vec![0.0; steps * d_o];
        if steps == 0 {
            return Ok((outputs, tape));
        }

        if let Mode::Train { rng } = mode {
            let rp = self.cfg.recurrent_dropout_p;
            if rp > 0.0 {
                let keep = 1.0 / (1.0 - rp);
                tape.rmask =
                    Some((0..d_h).map(|_| if rng.uniform() < rp { 0.0 } else { keep }).collect());
            }
            let op = self.cfg.dropout_p;
            if op > 0.0 {
                let keep = 1.0 / (1.0 - op);
                tape.omask = Some(
                    (0..steps * d_h)
                        .map(|_| if rng.uniform() < op { 0.0 } else { keep })
                        .collect(),
                );
            }
        }

        let mut h = vec![0.0; d_h];
        let mut c = vec![0.0; d_h];
        let mut xh = vec![0.0; d_x + d_h];
        let mut a = vec![0.0; 4 * d_h];
        let mut h_y = vec![0.0; d_h];

        for t in 0..steps {
            xh[..d_x].copy_from_slice(&xs[t * d_x..(t + 1) * d_x]);
            match &tape.rmask {
                Some(rm) => {
                    for j in 0..d_h {
                        xh[d_x + j] = h[j] * rm[j];
                    }
                }
                None => xh[d_x..].copy_from_slice(&h),
            }
            self.w.matvec_into(&xh, &mut a);
            let gates = &mut tape.gates[t * 4 * d_h..(t + 1) * 4 * d_h];
            for j in 0..d_h {
                gates[GATE_I * d_h + j] = sigmoid(a[GATE_I * d_h + j] + self.b[GATE_I * d_h + j]);
                gates[GATE_F * d_h + j] = sigmoid(a[GATE_F * d_h + j] + self.b[GATE_F * d_h + j]);
                gates[GATE_G * d_h + j] = (a[GATE_G * d_h + j] + self.b[GATE_G * d_h + j]).tanh();
                gates[GATE_O * d_h + j] = sigmoid(a[GATE_O * d_h + j] + self.b[GATE_O * d_h + j]);
            }
            for j in 0..d_h {
                c[j] = gates[GATE_F * d_h + j] * c[j] + gates[GATE_I * d_h + j] * gates[GATE_G * d_h + j];
                let tc = c[j].tanh();
                tape.tanh_c[t * d_h + j] = tc;
                h[j] = gates[GATE_O * d_h + j] * tc;
            }
            tape.c[t * d_h..(t + 1) * d_h].copy_from_slice(&c);
            tape.h[t * d_h..(t + 1) * d_h].copy_from_slice(&h);

            match &tape.omask {
                Some(om) => {
                    for j in 0..d_h {
                        h_y[j] = h[j] * om[t * d_h + j];
                    }
                }
                None => h_y.copy_from_slice(&h),
            }
            let y = &mut outputs[t * d_o..(t + 1) * d_o];
            self.w_y.matvec_into(&h_y, y);
            for (yj, bj) in y.iter_mut().zip(self.b_y.iter()) {
                *yj += bj;
            }
            if !(all_finite(&h) && all_finite(&c) && all_finite(y)) {
                return Err(Error::NonFinite { seq: 0, step: t });
            }
        }
        Ok((outputs, tape))
    }

    fn backward(&self, tape: &LstmTape, out_grads: &[f64]) -> Result<Vec<f64>> {
        let (d_x, d_h, d_o) = (self.cfg.d_x, self.cfg.d_h, self.cfg.d_o);
        let steps = tape.steps;
        if out_grads.len() != steps * d_o {
            return Err(Error::Shape("lstm backward: out_grads length mismatch".into()));
        }
        if tape.h.len() != steps * d_h {
            return Err(Error::Shape("lstm backward: tape/params shape mismatch".into()));
        }

        let mut g_w = Matrix::zeros(4 * d_h, d_x + d_h);
        let mut g_b = vec![0.0; 4 * d_h];
        let mut g_wy = Matrix::zeros(d_o, d_h);
        let mut g_by = vec![0.0; d_o];

        let mut dh = vec![0.0; d_h];
        let mut dc = vec![0.0; d_h];
        let mut da = vec![0.0; 4 * d_h];
        let mut xh = vec![0.0; d_x + d_h];
        let mut dxh = vec![0.0; d_x + d_h];
        let mut h_y = vec![0.0; d_h];

        for t in (0..steps).rev() {
            let gates = &tape.gates[t * 4 * d_h..(t + 1) * 4 * d_h];
            let c_t = &tape.c[t * d_h..(t + 1) * d_h];
            let tanh_c = &tape.tanh_c[t * d_h..(t + 1) * d_h];
            let h_t = &tape.h[t * d_h..(t + 1) * d_h];
            let h_prev = if t == 0 { None } else { Some(&tape.h[(t - 1) * d_h..t * d_h]) };
            let c_prev = if t == 0 { None } else { Some(&tape.c[(t - 1) * d_h..t * d_h]) };

            // Readout.
            let gy = &out_grads[t * d_o..(t + 1) * d_o];
            match &tape.omask {
                Some(om) => {
                    for j in 0..d_h {
                        h_y[j] = h_t[j] * om[t * d_h + j];
                    }
                }
                None => h_y.copy_from_slice(h_t),
            }
            g_wy.add_outer(gy, &h_y);
            for (b, &v) in g_by.iter_mut().zip(gy.iter()) {
                *b += v;
            }
            let mut dhy = vec![0.0; d_h];
            self.w_y.matvec_t_add(gy, &mut dhy);
            match &tape.omask {
                Some(om) => {
                    for j in 0..d_h {
                        dh[j] += dhy[j] * om[t * d_h + j];
                    }
                }
                None => {
                    for j in 0..d_h {
                        dh[j] += dhy[j];
                    }
                }
            }

            // h = o . tanh(c); c = f . c_prev + i . g.
            for j in 0..d_h {
                let (i, f, gg, o) = (
                    gates[GATE_I * d_h + j],
                    gates[GATE_F * d_h + j],
                    gates[GATE_G * d_h + j],
                    gates[GATE_O * d_h + j],
                );
                let do_ = tanh_c[j] * dh[j];
                dc[j] += o * (1.0 - tanh_c[j] * tanh_c[j]) * dh[j];
                let cp = c_prev.map_or(0.0, |c| c[j]);
                let di = gg * dc[j];
                let df = cp * dc[j];
                let dg = i * dc[j];
                da[GATE_I * d_h + j] = i * (1.0 - i) * di;
                da[GATE_F * d_h + j] = f * (1.0 - f) * df;
                da[GATE_G * d_h + j] = (1.0 - gg * gg) * dg;
                da[GATE_O * d_h + j] = o * (1.0 - o) * do_;
                dc[j] *= f; // becomes dc_prev
                let _ = c_t;
            }

            // Packed input [x; h_in].
            xh[..d_x].copy_from_slice(&tape.xs[t * d_x..(t + 1) * d_x]);
            match (&tape.rmask, h_prev) {
                (Some(rm), Some(hp)) => {
                    for j in 0..d_h {
                        xh[d_x + j] = hp[j] * rm[j];
                    }
                }
                (None, Some(hp)) => xh[d_x..].copy_from_slice(hp),
                (_, None) => xh[d_x..].fill(0.0),
            }
            g_w.add_outer(&da, &xh);
            for (b, &v) in g_b.iter_mut().zip(da.iter()) {
                *b += v;
            }
            dxh.fill(0.0);
            self.w.matvec_t_add(&da, &mut dxh);
            for j in 0..d_h {
                let m = tape.rmask.as_ref().map_or(1.0, |rm| rm[j]);
                dh[j] = dxh[d_x + j] * m;
            }
        }

        let mut flat = Vec::with_capacity(self.count_params());
        flat.extend_from_slice(g_w.data());
        flat.extend_from_slice(&g_b);
        flat.extend_from_slice(g_wy.data());
        flat.extend_from_slice(&g_by);
        Ok(flat)
    }

    fn layout(&self) -> Vec<Section> {
        let (d_x, d_h, d_o) = (self.cfg.d_x, self.cfg.d_h, self.cfg.d_o);
        vec![
            Section::new("w_g", 4 * d_h * (d_x + d_h)),
            Section::new("b_g", 4 * d_h),
            Section::new("w_y", d_o * d_h),
            Section::new("b_y", d_o),
        ]
    }

    fn trainable(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.count_params());
        flat.extend_from_slice(self.w.data());
        flat.extend_from_slice(&self.b);
        flat.extend_from_slice(self.w_y.data());
        flat.extend_from_slice(&self.b_y);
        flat
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        check_flat_len(self.count_params(), flat.len())?;
        let nw = self.w.rows() * self.w.cols();
        let nb = self.b.len();
        let ny = self.w_y.rows() * self.w_y.cols();
        self.w.data_mut().copy_from_slice(&flat[..nw]);
        self.b.copy_from_slice(&flat[nw..nw + nb]);
        self.w_y.data_mut().copy_from_slice(&flat[nw + nb..nw + nb + ny]);
        self.b_y.copy_from_slice(&flat[nw + nb + ny..]);
        Ok(())
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::Smooth
    }
}
