//! Minimal deterministic numeric kernel: dense row-major matrices, a seeded
//! xoshiro256++ generator, and the stable elementary functions shared by the
//! cell dynamics. Everything is f64; there is no implicit broadcasting and
//! every shape mismatch is an error.

use crate::error::{Error, Result};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: vector length {} != matrix cols {}",
                v.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    /// `out = self * v`; shapes must already be validated.
    #[inline]
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(v.iter()) {
                acc += w * x;
            }
            *o = acc;
        }
    }

    /// `out += self^T * v`; used by the reverse passes.
    #[inline]
    pub fn matvec_t_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row.iter()) {
                *o += w * vr;
            }
        }
    }

    /// Rank-1 accumulation `self += a * b^T` (gradient outer products).
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bv) in row.iter_mut().zip(b.iter()) {
                *w += ar * bv;
            }
        }
    }
}

/// Free-function form of the matrix-vector product.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    m.matvec(v)
}

/// Per-step exponential retention factor `exp(-dt/tau)`.
///
/// `tau` must be positive and `dt` nonnegative; the result lies in (0, 1].
pub fn decay_factor(tau_ms: f64, dt_ms: f64) -> Result<f64> {
    if !(tau_ms > 0.0) {
        return Err(Error::Invalid(format!("decay_factor: tau must be > 0, got {tau_ms}")));
    }
    if !(dt_ms >= 0.0) {
        return Err(Error::Invalid(format!("decay_factor: dt must be >= 0, got {dt_ms}")));
    }
    Ok((-dt_ms / tau_ms).exp())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid`, with the argument clamped away from {0, 1}.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Sigmoid clamped to [1e-12, 1 - 1e-12]: used for timescale bounding so the
/// effective tau stays strictly inside its bounds even when the raw sigmoid
/// saturates to exactly 0 or 1 in f64.
#[inline]
pub fn sigmoid_bounding(x: f64) -> f64 {
    sigmoid(x).clamp(1e-12, 1.0 - 1e-12)
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

const SPLITMIX_GAMMA: u64 = 0x9E3779B97F4A7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seeded xoshiro256++ generator (Blackman & Vigna). The four-word state is
/// expanded from the 64-bit seed with splitmix64, so the full draw sequence is
/// a pure function of the seed on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, s }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream derived from the *original* seed and a label,
    /// so substreams do not depend on how much of the parent was consumed.
    pub fn substream(&self, label: &str) -> Rng {
        // FNV-1a over the label, folded into the master seed.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut sm = self.seed ^ h;
        Rng::new(splitmix64(&mut sm))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    #[inline]
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform index in [0, n) by rejection.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index: empty range");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw via Box-Muller; consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.uniform()).max(f64::MIN_POSITIVE); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson draw. Knuth's product method for small means, a rounded normal
    /// approximation above 30 (generated counts there are never scrutinized
    /// at single-event resolution).
    pub fn poisson(&mut self, mean: f64) -> u32 {
        assert!(mean >= 0.0 && mean.is_finite(), "poisson: bad mean {mean}");
        if mean == 0.0 {
            return 0;
        }
        if mean > 30.0 {
            let v = mean + mean.sqrt() * self.normal();
            return v.round().max(0.0) as u32;
        }
        let limit = (-mean).exp();
        let mut k = 0u32;
        let mut p = 1.0;
        loop {
            p *= self.uniform();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Kaiming-uniform weight matrix: entries i.i.d. on [-b, b] with
/// `b = sqrt(6 / fan_in)`; shape is `fan_out x fan_in`.
pub fn kaiming_uniform_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Invalid(format!(
            "kaiming_uniform_init: fan_in {fan_in} and fan_out {fan_out} must be >= 1"
        )));
    }
    let b = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.range(-b, b)).collect();
    Matrix::from_vec(fan_out, fan_in, data)
}

/// Companion bias init for kaiming-uniform layers: U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn bias_uniform_init(rng: &mut Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.range(-b, b)).collect()
}
