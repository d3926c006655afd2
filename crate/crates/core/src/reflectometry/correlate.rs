use super::ReflectometryError;
use crate::dsp::fft_convolve;
use crate::trace::Trace;

/// One-sided cross-correlation `R[m] = sum_n y[n + m] x[n]`, m = 0..N-1,
/// with the shorter input zero-padded to N.
pub fn cross_correlate(x: &Trace, y: &Trace) -> Result<Vec<f64>, ReflectometryError> {
    if (x.fs - y.fs).abs() > 1e-9 * x.fs {
        return Err(ReflectometryError::SampleRateMismatch(x.fs, y.fs));
    }
    Ok(correlate_samples(&x.samples, &y.samples))
}

pub fn correlate_samples(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len().max(y.len());
    if n == 0 {
        return Vec::new();
    }
    let mut xr: Vec<f64> = x.iter().rev().copied().collect();
    // Pad x at the end (the front of its reversal).
    let mut padded = vec![0.0; n - x.len()];
    padded.append(&mut xr);
    let mut ys = y.to_vec();
    ys.resize(n, 0.0);
    let conv = fft_convolve(&ys, &padded);
    conv[n - 1..2 * n - 1].to_vec()
}

/// Index of the largest |value|; the first one wins ties.
pub(crate) fn argmax_abs(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if v.abs() > x[best].abs() {
            best = i;
        }
    }
    best
}

/// Distance from node i's mic to node j's speaker: the lag of the strongest
/// correlation between r̄_i and t̄_ij, scaled by c/Fs, plus `d_jj`.
pub fn estimate_terminal_distance(r_i: &Trace, t_ij: &Trace, d_jj: f64, c: f64) -> Result<f64, ReflectometryError> {
    if (r_i.start_time - t_ij.start_time).abs() > 0.5 / r_i.fs {
        return Err(ReflectometryError::MisalignedTraces(r_i.start_time, t_ij.start_time));
    }
    let r = cross_correlate(r_i, t_ij)?;
    Ok(c / r_i.fs * argmax_abs(&r) as f64 + d_jj)
}
