//! Deterministic generators for the desk-scale datasets: surrogate teacher
//! neuron I/O, synthetic spike-encoded digits with the adding construction,
//! temporal rebinning, and a long-range delayed-recall task. Every generator
//! is a pure function of (config, seed).

mod io;

pub use io::{load_dataset, save_dataset, DatasetMeta};

use crate::cells::lif::{LifCell, LifConfig};
use crate::cells::{Cell, Mode};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Largest magnitude stored in a raster cell; Poisson draws beyond it are
/// clipped (with a warning) so every value stays a small signed integer.
pub const RASTER_MAX: i32 = 127;

/// Binned spike counts; sign encodes the fixed E/I identity of the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeRaster {
    pub channels: usize,
    pub steps: usize,
    /// Real time per step in milliseconds.
    pub dt_ms_num: u32,
    pub dt_ms_den: u32,
    pub values: Vec<i32>, // steps x channels, row-major
}

impl SpikeRaster {
    pub fn zeros(channels: usize, steps: usize, dt_ms: f64) -> Self {
        SpikeRaster {
            channels,
            steps,
            dt_ms_num: (dt_ms * 1000.0).round() as u32,
            dt_ms_den: 1000,
            values: vec![0; steps * channels],
        }
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt_ms_num as f64 / self.dt_ms_den as f64
    }

    #[inline]
    pub fn get(&self, step: usize, channel: usize) -> i32 {
        self.values[step * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, step: usize, channel: usize, v: i32) {
        self.values[step * self.channels + channel] = v;
    }

    pub fn total_signed(&self) -> i64 {
        self.values.iter().map(|&v| v as i64).sum()
    }

    pub fn total_events(&self) -> u64 {
        self.values.iter().map(|&v| v.unsigned_abs() as u64).sum()
    }

    /// Row-major f64 view (steps x channels) for feeding cells.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Simulated teacher input/output: presynaptic raster plus per-step voltage
/// (pre-reset membrane) and spike targets.
#[derive(Debug, Clone)]
pub struct TeacherTrace {
    pub raster: SpikeRaster,
    pub voltage: Vec<f64>,
    pub spikes: Vec<u8>,
}

impl TeacherTrace {
    pub fn firing_rate_hz(&self) -> f64 {
        let n: u64 = self.spikes.iter().map(|&s| s as u64).sum();
        let duration_s = self.raster.steps as f64 * self.raster.dt_ms() / 1000.0;
        n as f64 / duration_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Lif,
    Alif,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub channels: usize,
    pub duration_ms: f64,
    pub dt_ms: f64,
    /// Per-channel Poisson rate.
    pub rate_hz: f64,
    /// Fraction of excitatory channels (the rest are inhibitory).
    pub exc_fraction: f64,
    /// Scale on the positive synaptic weight magnitudes; calibrated so the
    /// default teachers fire in the informative 5-20 Hz band (LIF ~11 Hz at
    /// 1.5, ALIF ~8 Hz at 1.8 under the default adaptation).
    pub weight_scale: f64,
    pub tau_mem_ms: f64,
    pub bias: f64,
    pub threshold: f64,
    pub v_reset: f64,
    pub adapt_strength: f64,
    pub tau_adapt_ms: f64,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn default_lif() -> Self {
        TeacherConfig {
            kind: TeacherKind::Lif,
            channels: 64,
            duration_ms: 100_000.0,
            dt_ms: 1.0,
            rate_hz: 10.0,
            exc_fraction: 0.8,
            weight_scale: 1.5,
            tau_mem_ms: 10.0,
            bias: 0.0,
            threshold: 1.0,
            v_reset: 0.0,
            adapt_strength: 0.0,
            tau_adapt_ms: 150.0,
            seed: 1,
        }
    }

    pub fn default_alif() -> Self {
        TeacherConfig {
            kind: TeacherKind::Alif,
            adapt_strength: 0.25,
            weight_scale: 1.8,
            ..Self::default_lif()
        }
    }
}

/// Fixed per-channel E/I identity: the first `round(exc_fraction * C)`
/// channels are excitatory (+1), the rest inhibitory (-1).
pub fn channel_signs(channels: usize, exc_fraction: f64) -> Vec<i32> {
    let n_exc = (exc_fraction * channels as f64).round() as usize;
    (0..channels).map(|c| if c < n_exc { 1 } else { -1 }).collect()
}

/// Draw a Poisson spike raster and run the teacher neuron over it.
pub fn gen_teacher_io(cfg: &TeacherConfig) -> Result<TeacherTrace> {
    if cfg.duration_ms < 1000.0 {
        return Err(Error::Invalid("teacher: duration must be >= 1000 ms".into()));
    }
    if cfg.channels == 0 {
        return Err(Error::Invalid("teacher: channels must be >= 1".into()));
    }
    if !(cfg.dt_ms > 0.0) {
        return Err(Error::Invalid("teacher: dt must be > 0".into()));
    }
    let steps = (cfg.duration_ms / cfg.dt_ms).round() as usize;
    let signs = channel_signs(cfg.channels, cfg.exc_fraction);
    let master = Rng::new(cfg.seed);

    let mut raster = SpikeRaster::zeros(cfg.channels, steps, cfg.dt_ms);
    let mut rng_sp = master.substream("teacher.spikes");
    let mean = cfg.rate_hz * cfg.dt_ms / 1000.0;
    let mut clipped = 0u64;
    for t in 0..steps {
        for c in 0..cfg.channels {
            let mut k = rng_sp.poisson(mean) as i32;
            if k > RASTER_MAX {
                k = RASTER_MAX;
                clipped += 1;
            }
            raster.set(t, c, signs[c] * k);
        }
    }
    if clipped > 0 {
        eprintln!("warning: teacher raster clipped {clipped} bins to +/-{RASTER_MAX}");
    }

    // Positive weight magnitudes; the channel sign rides on the input.
    let mut rng_w = master.substream("teacher.weights");
    let weights: Vec<f64> =
        (0..cfg.channels).map(|_| cfg.weight_scale * rng_w.range(0.5, 1.5)).collect();

    let mut lif_cfg = LifConfig::new(cfg.channels);
    lif_cfg.threshold = cfg.threshold;
    lif_cfg.v_reset = cfg.v_reset;
    lif_cfg.adapt_strength = cfg.adapt_strength;
    lif_cfg.tau_a_init_ms = cfg.tau_adapt_ms;
    let mut teacher = match cfg.kind {
        TeacherKind::Lif => LifCell::new_lif(lif_cfg, &mut master.substream("teacher.cell"))?,
        TeacherKind::Alif => LifCell::new_alif(lif_cfg, &mut master.substream("teacher.cell"))?,
    };
    teacher.set_weights(&weights, cfg.bias)?;
    teacher.set_tau_ms(cfg.tau_mem_ms);

    let xs = raster.to_f64();
    let dts = vec![cfg.dt_ms; steps];
    let (_, tape) = teacher.rollout(&xs, &dts, Mode::Eval)?;
    Ok(TeacherTrace {
        voltage: tape.voltage().to_vec(),
        spikes: tape.spikes().to_vec(),
        raster,
    })
}

/// Spike-encoded digit with a fixed per-label band template.
#[derive(Debug, Clone)]
pub struct DigitSample {
    pub raster: SpikeRaster,
    pub label: u8,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitConfig {
    pub channels: usize,
    pub duration_ms: f64,
    pub dt_ms: f64,
    pub peak_rate_hz: f64,
}

impl Default for DigitConfig {
    fn default() -> Self {
        DigitConfig { channels: 20, duration_ms: 1000.0, dt_ms: 1.0, peak_rate_hz: 150.0 }
    }
}

/// Instantaneous firing rate of the digit template at a channel and time.
///
/// Each digit owns a primary frequency band sweeping linearly between two
/// label-specific positions plus a weaker stationary band, under a smooth
/// on/off envelope; the encoding imitates a spectrogram-like cochleagram.
pub fn digit_template_rate(cfg: &DigitConfig, label: u8, channel: usize, t_ms: f64) -> f64 {
    debug_assert!(label < 10);
    let d = label as f64;
    let frac = (t_ms / cfg.duration_ms).clamp(0.0, 1.0);
    let u = (channel as f64 + 0.5) / cfg.channels as f64;

    // Bands are truncated at 4 sigma: channels outside every band have an
    // exactly zero rate and never spike.
    let band = |center: f64, sigma: f64| -> f64 {
        let d = (u - center).abs();
        if d >= 4.0 * sigma {
            0.0
        } else {
            (-d * d / (2.0 * sigma * sigma)).exp()
        }
    };

    let p0 = (d + 0.5) / 10.0;
    let p1 = ((d * 3.0 + 7.0) % 10.0 + 0.5) / 10.0;
    let center = p0 + (p1 - p0) * frac;
    let primary = band(center, 0.06);
    let q = ((d * 7.0 + 3.0) % 10.0 + 0.5) / 10.0;
    let secondary = 0.5 * band(q, 0.09);

    let envelope = (std::f64::consts::PI * frac).sin().powi(2);
    cfg.peak_rate_hz * envelope * (primary + secondary)
}

/// Poisson draw from the digit's band template. Identical (label, seed)
/// pairs produce identical samples.
pub fn gen_digit(label: u8, cfg: &DigitConfig, seed: u64) -> Result<DigitSample> {
    if label > 9 {
        return Err(Error::Invalid(format!("digit label {label} out of 0..=9")));
    }
    if cfg.channels == 0 || !(cfg.dt_ms > 0.0) || !(cfg.duration_ms >= cfg.dt_ms) {
        return Err(Error::Invalid("digit: bad raster geometry".into()));
    }
    let steps = (cfg.duration_ms / cfg.dt_ms).round() as usize;
    let mut raster = SpikeRaster::zeros(cfg.channels, steps, cfg.dt_ms);
    let mut rng = Rng::new(seed).substream("digit.spikes");
    for t in 0..steps {
        let t_ms = (t as f64 + 0.5) * cfg.dt_ms;
        for c in 0..cfg.channels {
            let mean = digit_template_rate(cfg, label, c, t_ms) * cfg.dt_ms / 1000.0;
            let k = (rng.poisson(mean) as i32).min(RASTER_MAX);
            raster.set(t, c, k);
        }
    }
    Ok(DigitSample { raster, label })
}

/// Two concatenated digits labelled by their sum (19 classes). No separator
/// information is included.
#[derive(Debug, Clone)]
pub struct AddingSample {
    pub raster: SpikeRaster,
    pub label: u8,
}

pub fn make_adding(d1: &DigitSample, d2: &DigitSample) -> Result<AddingSample> {
    let (a, b) = (&d1.raster, &d2.raster);
    if a.channels != b.channels {
        return Err(Error::Shape(format!(
            "make_adding: channel counts differ ({} vs {})",
            a.channels, b.channels
        )));
    }
    if a.dt_ms_num != b.dt_ms_num || a.dt_ms_den != b.dt_ms_den {
        return Err(Error::Shape("make_adding: dt differs between digits".into()));
    }
    let mut values = Vec::with_capacity(a.values.len() + b.values.len());
    values.extend_from_slice(&a.values);
    values.extend_from_slice(&b.values);
    Ok(AddingSample {
        raster: SpikeRaster {
            channels: a.channels,
            steps: a.steps + b.steps,
            dt_ms_num: a.dt_ms_num,
            dt_ms_den: a.dt_ms_den,
            values,
        },
        label: d1.label + d2.label,
    })
}

/// Sum spike counts into coarser bins. `bin_ms` must be a positive integer
/// multiple of the raster dt; a trailing partial bin is kept. Signed mass is
/// conserved exactly.
pub fn rebin(raster: &SpikeRaster, bin_ms: f64) -> Result<SpikeRaster> {
    let dt = raster.dt_ms();
    let factor_f = bin_ms / dt;
    let factor = factor_f.round();
    if !(factor >= 1.0) || (factor_f - factor).abs() > 1e-9 * factor {
        return Err(Error::Invalid(format!(
            "rebin: bin {bin_ms} ms is not a positive multiple of dt {dt} ms"
        )));
    }
    let factor = factor as usize;
    if factor == 1 {
        return Ok(raster.clone());
    }
    let new_steps = raster.steps.div_ceil(factor);
    let mut out = SpikeRaster::zeros(raster.channels, new_steps, dt * factor as f64);
    for t in 0..raster.steps {
        let nt = t / factor;
        for c in 0..raster.channels {
            out.values[nt * raster.channels + c] += raster.get(t, c);
        }
    }
    Ok(out)
}

/// Which loss/metric family a dataset drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherFit,
    Classify,
}

/// Per-sequence targets.
#[derive(Debug, Clone)]
pub enum Targets {
    /// Per-step regression pairs, each flattened [N * T].
    PerStep { voltage: Vec<f64>, spikes: Vec<f64> },
    /// One class index per sequence.
    Class { labels: Vec<u32>, n_classes: usize },
}

/// In-memory dataset: N equal-length sequences with per-step dt and targets.
/// Inputs are kept f32-exact so that the in-memory values and the binary32
/// on-disk format agree bit for bit.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: TaskKind,
    pub channels: usize,
    pub steps: usize,
    pub dt_ms: f64,
    pub inputs: Vec<f64>, // N x steps x channels
    pub targets: Targets,
    pub seed: u64,
}

impl Dataset {
    pub fn n_sequences(&self) -> usize {
        if self.steps * self.channels == 0 {
            0
        } else {
            self.inputs.len() / (self.steps * self.channels)
        }
    }

    pub fn sequence(&self, i: usize) -> &[f64] {
        let n = self.steps * self.channels;
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Class { n_classes, .. } => Some(*n_classes),
            _ => None,
        }
    }
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherDatasetConfig {
    #[serde(flatten)]
    pub teacher: TeacherConfig,
    /// Length of each training sample cut from the long trace.
    pub sample_ms: f64,
    pub bin_ms: f64,
}

impl TeacherDatasetConfig {
    pub fn default_lif() -> Self {
        TeacherDatasetConfig { teacher: TeacherConfig::default_lif(), sample_ms: 500.0, bin_ms: 1.0 }
    }
}

/// Generate a teacher trace and cut it into equal non-overlapping samples.
pub fn build_teacher_dataset(cfg: &TeacherDatasetConfig) -> Result<Dataset> {
    let trace = gen_teacher_io(&cfg.teacher)?;
    let raster = rebin(&trace.raster, cfg.bin_ms)?;
    let factor = (cfg.bin_ms / cfg.teacher.dt_ms).round() as usize;
    let steps_per_sample = (cfg.sample_ms / raster.dt_ms()).round() as usize;
    if steps_per_sample == 0 {
        return Err(Error::Invalid("teacher dataset: sample_ms shorter than one bin".into()));
    }
    let n = raster.steps / steps_per_sample;
    if n == 0 {
        return Err(Error::Invalid("teacher dataset: trace shorter than one sample".into()));
    }
    let c = raster.channels;
    let mut inputs = Vec::with_capacity(n * steps_per_sample * c);
    let mut voltage = Vec::with_capacity(n * steps_per_sample);
    let mut spikes = Vec::with_capacity(n * steps_per_sample);
    for i in 0..n {
        for t in 0..steps_per_sample {
            let src = i * steps_per_sample + t;
            for ch in 0..c {
                inputs.push(raster.get(src, ch) as f64);
            }
            // Targets live on the fine grid; binning takes the bin's last
            // fine step for voltage and max for spikes.
            let fine_end = (src + 1) * factor - 1;
            let fine_end = fine_end.min(trace.voltage.len() - 1);
            voltage.push(quantize_f32(trace.voltage[fine_end]));
            let fine_start = src * factor;
            let any_spike = (fine_start..=fine_end).any(|k| trace.spikes[k] == 1);
            spikes.push(if any_spike { 1.0 } else { 0.0 });
        }
    }
    Ok(Dataset {
        kind: TaskKind::TeacherFit,
        channels: c,
        steps: steps_per_sample,
        dt_ms: raster.dt_ms(),
        inputs,
        targets: Targets::PerStep { voltage, spikes },
        seed: cfg.teacher.seed,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddingDatasetConfig {
    #[serde(flatten)]
    pub digit: DigitConfig,
    pub n_sequences: usize,
    pub bin_ms: f64,
    pub seed: u64,
}

impl Default for AddingDatasetConfig {
    fn default() -> Self {
        AddingDatasetConfig {
            digit: DigitConfig::default(),
            n_sequences: 1000,
            bin_ms: 2.0,
            seed: 1,
        }
    }
}

/// Concatenate two uniformly drawn digits per sample; the label is their sum.
pub fn build_adding_dataset(cfg: &AddingDatasetConfig) -> Result<Dataset> {
    let master = Rng::new(cfg.seed);
    let mut rng_labels = master.substream("adding.labels");
    let mut inputs = Vec::new();
    let mut labels = Vec::with_capacity(cfg.n_sequences);
    let mut steps = 0;
    for i in 0..cfg.n_sequences {
        let l1 = rng_labels.index(10) as u8;
        let l2 = rng_labels.index(10) as u8;
        let d1 = gen_digit(l1, &cfg.digit, cfg.seed ^ (2 * i as u64 + 1))?;
        let d2 = gen_digit(l2, &cfg.digit, cfg.seed ^ (2 * i as u64 + 2))?;
        let sample = make_adding(&d1, &d2)?;
        let binned = rebin(&sample.raster, cfg.bin_ms)?;
        steps = binned.steps;
        inputs.extend(binned.values.iter().map(|&v| v as f64));
        labels.push(sample.label as u32);
    }
    Ok(Dataset {
        kind: TaskKind::Classify,
        channels: cfg.digit.channels,
        steps,
        dt_ms: cfg.bin_ms,
        inputs,
        targets: Targets::Class { labels, n_classes: 19 },
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitsDatasetConfig {
    #[serde(flatten)]
    pub digit: DigitConfig,
    pub n_sequences: usize,
    pub bin_ms: f64,
    pub seed: u64,
}

/// Single spike-encoded digits, 10 classes.
pub fn build_digits_dataset(cfg: &DigitsDatasetConfig) -> Result<Dataset> {
    let master = Rng::new(cfg.seed);
    let mut rng_labels = master.substream("digits.labels");
    let mut inputs = Vec::new();
    let mut labels = Vec::with_capacity(cfg.n_sequences);
    let mut steps = 0;
    for i in 0..cfg.n_sequences {
        let l = rng_labels.index(10) as u8;
        let d = gen_digit(l, &cfg.digit, cfg.seed ^ (i as u64 + 1))?;
        let binned = rebin(&d.raster, cfg.bin_ms)?;
        steps = binned.steps;
        inputs.extend(binned.values.iter().map(|&v| v as f64));
        labels.push(l as u32);
    }
    Ok(Dataset {
        kind: TaskKind::Classify,
        channels: cfg.digit.channels,
        steps,
        dt_ms: cfg.bin_ms,
        inputs,
        targets: Targets::Class { labels, n_classes: 10 },
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallConfig {
    pub length: usize,
    pub n_symbols: usize,
    pub n_distractors: usize,
    pub delay: usize,
    /// Per-step Bernoulli spike probability on each distractor channel.
    pub distractor_rate: f64,
    /// Spike count of the cue event (a stronger burst is easier to latch).
    pub cue_amplitude: u32,
    pub n_sequences: usize,
    pub dt_ms: f64,
    pub seed: u64,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            length: 1100,
            n_symbols: 6,
            n_distractors: 4,
            delay: 1000,
            distractor_rate: 0.1,
            cue_amplitude: 4,
            n_sequences: 240,
            dt_ms: 1.0,
            seed: 1,
        }
    }
}

/// Classify a one-hot symbol cue presented `delay` steps before the final
/// step, against ongoing distractor-channel noise. With delay = 0 the cue
/// sits at the readout step and a memoryless readout suffices.
pub fn gen_delayed_recall(cfg: &RecallConfig) -> Result<Dataset> {
    if cfg.delay >= cfg.length {
        return Err(Error::Invalid(format!(
            "delayed recall: delay {} must be < length {}",
            cfg.delay, cfg.length
        )));
    }
    if cfg.n_symbols < 2 {
        return Err(Error::Invalid("delayed recall: need at least 2 symbols".into()));
    }
    let channels = cfg.n_symbols + cfg.n_distractors;
    let cue_step = cfg.length - 1 - cfg.delay;
    let master = Rng::new(cfg.seed);
    let mut inputs = Vec::with_capacity(cfg.n_sequences * cfg.length * channels);
    let mut labels = Vec::with_capacity(cfg.n_sequences);
    for i in 0..cfg.n_sequences {
        let mut rng = master.substream(&format!("recall.{i}"));
        let label = rng.index(cfg.n_symbols);
        labels.push(label as u32);
        for t in 0..cfg.length {
            for c in 0..channels {
                let v = if c < cfg.n_symbols {
                    if t == cue_step && c == label {
                        cfg.cue_amplitude as f64
                    } else {
                        0.0
                    }
                } else if rng.uniform() < cfg.distractor_rate {
                    1.0
                } else {
                    0.0
                };
                inputs.push(v);
            }
        }
    }
    Ok(Dataset {
        kind: TaskKind::Classify,
        channels,
        steps: cfg.length,
        dt_ms: cfg.dt_ms,
        inputs,
        targets: Targets::Class { labels, n_classes: cfg.n_symbols },
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rebin_identity_and_sums() {
        let mut r = SpikeRaster::zeros(2, 4, 1.0);
        r.set(0, 0, 1);
        r.set(1, 0, 1);
        r.set(2, 1, -2);
        let same = rebin(&r, 1.0).unwrap();
        assert_eq!(same, r);
        let two = rebin(&r, 2.0).unwrap();
        assert_eq!(two.steps, 2);
        assert_eq!(two.get(0, 0), 2); // two +1 steps merged
        assert_eq!(two.get(1, 1), -2);
        assert_eq!(two.total_signed(), r.total_signed());
        assert!((two.dt_ms() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rebin_rejects_non_multiple() {
        let r = SpikeRaster::zeros(1, 10, 2.0);
        assert!(rebin(&r, 3.0).is_err());
        assert!(rebin(&r, 0.0).is_err());
    }

    #[test]
    fn rebin_partial_last_bin_preserves_mass() {
        let mut r = SpikeRaster::zeros(1, 7, 1.0);
        for t in 0..7 {
            r.set(t, 0, 1);
        }
        let b = rebin(&r, 3.0).unwrap();
        assert_eq!(b.steps, 3);
        assert_eq!(b.total_signed(), 7);
        assert_eq!(b.get(2, 0), 1); // partial bin
    }

    #[test]
    fn adding_concatenates_and_sums_labels() {
        let cfg = DigitConfig { channels: 6, duration_ms: 50.0, dt_ms: 1.0, peak_rate_hz: 100.0 };
        let d0 = gen_digit(0, &cfg, 1).unwrap();
        let d0b = gen_digit(0, &cfg, 2).unwrap();
        let s = make_adding(&d0, &d0b).unwrap();
        assert_eq!(s.label, 0);
        assert_eq!(s.raster.steps, 100);
        let d9 = gen_digit(9, &cfg, 3).unwrap();
        let d9b = gen_digit(9, &cfg, 4).unwrap();
        let s = make_adding(&d9, &d9b).unwrap();
        assert_eq!(s.label, 18); // 19 classes in total
    }

    #[test]
    fn adding_rejects_mismatched_rasters() {
        let a = DigitConfig { channels: 6, duration_ms: 50.0, dt_ms: 1.0, peak_rate_hz: 50.0 };
        let b = DigitConfig { channels: 7, ..a.clone() };
        let da = gen_digit(1, &a, 1).unwrap();
        let db = gen_digit(2, &b, 1).unwrap();
        assert!(make_adding(&da, &db).is_err());
    }

    #[test]
    fn digit_same_seed_identical_different_seed_not() {
        let cfg = DigitConfig::default();
        let a = gen_digit(3, &cfg, 9).unwrap();
        let b = gen_digit(3, &cfg, 9).unwrap();
        assert_eq!(a.raster, b.raster);
        let c = gen_digit(3, &cfg, 10).unwrap();
        assert_ne!(a.raster, c.raster);
    }

    #[test]
    fn digit_band_occupancy_matches_template() {
        // Aggregate counts over many draws track the integrated template
        // rate per channel.
        let cfg = DigitConfig { channels: 12, duration_ms: 400.0, dt_ms: 2.0, peak_rate_hz: 200.0 };
        let label = 4u8;
        let reps = 200;
        let mut counts = vec![0f64; cfg.channels];
        for seed in 0..reps {
            let d = gen_digit(label, &cfg, seed).unwrap();
            for t in 0..d.raster.steps {
                for c in 0..cfg.channels {
                    counts[c] += d.raster.get(t, c) as f64;
                }
            }
        }
        let steps = (cfg.duration_ms / cfg.dt_ms) as usize;
        for c in 0..cfg.channels {
            let mut expect = 0.0;
            for t in 0..steps {
                let t_ms = (t as f64 + 0.5) * cfg.dt_ms;
                expect += digit_template_rate(&cfg, label, c, t_ms) * cfg.dt_ms / 1000.0;
            }
            expect *= reps as f64;
            let got = counts[c];
            let sigma = expect.max(1.0).sqrt();
            assert!(
                (got - expect).abs() < 5.0 * sigma + 1.0,
                "channel {c}: got {got}, expect {expect}"
            );
        }
    }

    #[test]
    fn digit_rate_invariant_under_dt_halving() {
        let coarse = DigitConfig { channels: 10, duration_ms: 500.0, dt_ms: 2.0, peak_rate_hz: 300.0 };
        let fine = DigitConfig { dt_ms: 1.0, ..coarse.clone() };
        let reps = 300;
        let (mut tot_c, mut tot_f) = (0u64, 0u64);
        for seed in 0..reps {
            tot_c += gen_digit(7, &coarse, seed).unwrap().raster.total_events();
            tot_f += gen_digit(7, &fine, seed + 10_000).unwrap().raster.total_events();
        }
        let ratio = tot_f as f64 / tot_c as f64;
        assert!((ratio - 1.0).abs() < 0.05, "dt halving changed total rate by {ratio}");
    }

    #[test]
    fn zero_rate_channel_stays_silent() {
        // The truncated bands leave some (digit, channel) pairs with exactly
        // zero rate; those channels never spike.
        let cfg = DigitConfig { channels: 40, duration_ms: 200.0, dt_ms: 1.0, peak_rate_hz: 100.0 };
        let mut checked = false;
        for label in 0..10u8 {
            let d = gen_digit(label, &cfg, 5 + label as u64).unwrap();
            for c in 0..cfg.channels {
                let max_rate = (0..200)
                    .map(|t| digit_template_rate(&cfg, label, c, t as f64 + 0.5))
                    .fold(0.0f64, f64::max);
                if max_rate == 0.0 {
                    checked = true;
                    for t in 0..d.raster.steps {
                        assert_eq!(d.raster.get(t, c), 0, "digit {label} channel {c}");
                    }
                }
            }
        }
        assert!(checked, "no silent (digit, channel) pair found");
    }

    #[test]
    fn teacher_zero_rate_decays_to_bias_fixed_point() {
        let mut cfg = TeacherConfig::default_lif();
        cfg.duration_ms = 1000.0;
        cfg.rate_hz = 0.0;
        cfg.bias = 0.3;
        let trace = gen_teacher_io(&cfg).unwrap();
        assert!(trace.spikes.iter().all(|&s| s == 0));
        let last = *trace.voltage.last().unwrap();
        assert!((last - 0.3).abs() < 1e-6, "voltage {last} should settle at the bias");
        assert!(trace.raster.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn alif_teacher_with_zero_strength_matches_lif() {
        let mut lif = TeacherConfig::default_lif();
        lif.duration_ms = 2000.0;
        let mut alif = lif.clone();
        alif.kind = TeacherKind::Alif;
        alif.adapt_strength = 0.0;
        let a = gen_teacher_io(&lif).unwrap();
        let b = gen_teacher_io(&alif).unwrap();
        assert_eq!(a.raster, b.raster);
        assert_eq!(a.voltage, b.voltage);
        assert_eq!(a.spikes, b.spikes);
    }

    #[test]
    fn default_teacher_fires_in_band() {
        let mut cfg = TeacherConfig::default_lif();
        cfg.duration_ms = 20_000.0;
        let trace = gen_teacher_io(&cfg).unwrap();
        let rate = trace.firing_rate_hz();
        assert!((1.0..=50.0).contains(&rate), "teacher fires at {rate} Hz");
    }

    #[test]
    fn recall_generator_shapes_and_determinism() {
        let cfg = RecallConfig {
            length: 50,
            n_symbols: 4,
            n_distractors: 3,
            delay: 10,
            distractor_rate: 0.3,
            cue_amplitude: 2,
            n_sequences: 8,
            dt_ms: 1.0,
            seed: 5,
        };
        let a = gen_delayed_recall(&cfg).unwrap();
        let b = gen_delayed_recall(&cfg).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.channels, 7);
        assert_eq!(a.steps, 50);
        assert_eq!(a.n_sequences(), 8);
        // Cue sits at length-1-delay on the labelled symbol channel.
        let Targets::Class { labels, n_classes } = &a.targets else { panic!() };
        assert_eq!(*n_classes, 4);
        for (i, &label) in labels.iter().enumerate() {
            let seq = a.sequence(i);
            let cue_step = 50 - 1 - 10;
            for c in 0..4usize {
                let v = seq[cue_step * 7 + c];
                assert_eq!(v, if c == label as usize { 2.0 } else { 0.0 });
            }
            // No cue anywhere else on symbol channels.
            for t in 0..50 {
                if t == cue_step {
                    continue;
                }
                for c in 0..4 {
                    assert_eq!(seq[t * 7 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn recall_rejects_delay_past_length() {
        let cfg = RecallConfig { length: 10, delay: 10, ..RecallConfig::default() };
        assert!(gen_delayed_recall(&cfg).is_err());
    }

    #[test]
    fn adding_label_marginals_match_convolution() {
        let cfg = AddingDatasetConfig {
            digit: DigitConfig { channels: 4, duration_ms: 10.0, dt_ms: 1.0, peak_rate_hz: 50.0 },
            n_sequences: 10_000,
            bin_ms: 1.0,
            seed: 42,
        };
        let ds = build_adding_dataset(&cfg).unwrap();
        let Targets::Class { labels, .. } = &ds.targets else { panic!() };
        let mut counts = [0usize; 19];
        for &l in labels {
            counts[l as usize] += 1;
        }
        let n = labels.len() as f64;
        for s in 0..19usize {
            // P(sum = s) from the convolution of two uniform(0..9) draws.
            let ways = if s <= 9 { s + 1 } else { 19 - s };
            let p = ways as f64 / 100.0;
            let mean = n * p;
            let sd = (n * p * (1.0 - p)).sqrt();
            let got = counts[s] as f64;
            assert!(
                (got - mean).abs() <= 3.0 * sd,
                "sum {s}: got {got}, expect {mean} +/- {:.1}",
                3.0 * sd
            );
        }
    }
}
