//! Periodized orthonormal wavelet transform and soft-threshold denoising.

use super::ReflectometryError;
use crate::dsp::median;
use crate::trace::Trace;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Symlet-6 decomposition low-pass filter.
const SYM6: [f64; 12] = [
    0.015404109327027373,
    0.0034907120842174702,
    -0.11799011114819057,
    -0.048311742585633,
    0.4910559419267466,
    0.787641141030194,
    0.3379294217276218,
    -0.07263752278646252,
    -0.021060292512300564,
    0.04472490177066578,
    0.0017677118642428036,
    -0.007800708325034148,
];

#[derive(Debug, Clone, PartialEq)]
pub struct Wavelet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Wavelet {
    pub fn by_name(name: &str) -> Result<Self, ReflectometryError> {
        let lo: Vec<f64> = match name.to_ascii_lowercase().as_str() {
            "haar" | "db1" => vec![SQRT_HALF, SQRT_HALF],
            "sym6" => SYM6.to_vec(),
            _ => return Err(ReflectometryError::UnknownWavelet(name.to_string())),
        };
        let l = lo.len();
        let hi = (0..l).map(|n| if n % 2 == 0 { lo[l - 1 - n] } else { -lo[l - 1 - n] }).collect();
        Ok(Self { lo, hi })
    }

    pub fn low_pass(&self) -> &[f64] {
        &self.lo
    }

    pub fn high_pass(&self) -> &[f64] {
        &self.hi
    }

    fn analyze(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let half = n / 2;
        let mut a = vec![0.0; half];
        let mut d = vec![0.0; half];
        for k in 0..half {
            let (mut sa, mut sd) = (0.0, 0.0);
            for (m, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + m) % n];
                sa += h * v;
                sd += g * v;
            }
            a[k] = sa;
            d[k] = sd;
        }
        (a, d)
    }

    fn synthesize(&self, a: &[f64], d: &[f64]) -> Vec<f64> {
        let n = 2 * a.len();
        let mut x = vec![0.0; n];
        for k in 0..a.len() {
            for (m, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                x[(2 * k + m) % n] += h * a[k] + g * d[k];
            }
        }
        x
    }
}

/// Approximation at the coarsest level plus details, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    original_len: usize,
}

fn symmetric_pad(x: &[f64], len: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(len);
    let mut i = 0usize;
    while out.len() < len {
        // Half-sample symmetric extension with period 2n.
        let p = i % (2 * n);
        out.push(if p < n { x[p] } else { x[2 * n - 1 - p] });
        i += 1;
    }
    out
}

pub fn wavedec(x: &[f64], levels: usize, wavelet: &Wavelet) -> Result<Decomposition, ReflectometryError> {
    let block = 1usize << levels;
    if levels == 0 || x.len() < block {
        return Err(ReflectometryError::TraceTooShort {
            len: x.len(),
            needed: block,
        });
    }
    let padded = x.len().div_ceil(block) * block;
    let mut a = symmetric_pad(x, padded);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (na, d) = wavelet.analyze(&a);
        details.push(d);
        a = na;
    }
    Ok(Decomposition {
        approx: a,
        details,
        original_len: x.len(),
    })
}

pub fn waverec(dec: &Decomposition, wavelet: &Wavelet) -> Vec<f64> {
    let mut a = dec.approx.clone();
    for d in dec.details.iter().rev() {
        a = wavelet.synthesize(&a, d);
    }
    a.truncate(dec.original_len);
    a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// sigma * sqrt(2 ln N), sigma estimated from the finest details.
    Universal,
    Fixed(f64),
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

pub fn denoise_with(trace: &Trace, levels: usize, wavelet: &str, threshold: Threshold) -> Result<Trace, ReflectometryError> {
    let w = Wavelet::by_name(wavelet)?;
    let mut dec = wavedec(&trace.samples, levels, &w)?;
    let t = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Universal => {
            let abs: Vec<f64> = dec.details[0].iter().map(|v| v.abs()).collect();
            let sigma = median(&abs) / 0.6745;
            sigma * (2.0 * (trace.len() as f64).ln()).sqrt()
        }
    };
    if t > 0.0 {
        for d in dec.details.iter_mut() {
            d.iter_mut().for_each(|v| *v = soft(*v, t));
        }
    }
    Ok(trace.with_samples(waverec(&dec, &w)))
}

/// Multi-level wavelet denoising with the universal soft threshold.
pub fn denoise_dwt(trace: &Trace, levels: usize, wavelet: &str) -> Result<Trace, ReflectometryError> {
    denoise_with(trace, levels, wavelet, Threshold::Universal)
}
