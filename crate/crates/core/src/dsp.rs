//! Small signal-processing helpers shared by the simulator and the estimators.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Full linear convolution of `a` and `b` (length `a.len() + b.len() - 1`),
/// computed with FFT overlap-add.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    // Keep the short operand as the kernel.
    let (long, kernel) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let out_len = long.len() + kernel.len() - 1;
    let fft_len = (4 * kernel.len()).max(1024).next_power_of_two().min(out_len.next_power_of_two());
    let block = fft_len - kernel.len() + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    let mut kspec: Vec<Complex<f64>> = kernel.iter().map(|&x| Complex::new(x, 0.0)).collect();
    kspec.resize(fft_len, Complex::new(0.0, 0.0));
    fwd.process(&mut kspec);

    let scale = 1.0 / fft_len as f64;
    let mut out = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for start in (0..long.len()).step_by(block) {
        let chunk = &long[start..(start + block).min(long.len())];
        for (slot, &x) in buf.iter_mut().zip(chunk.iter()) {
            *slot = Complex::new(x, 0.0);
        }
        for slot in buf.iter_mut().skip(chunk.len()) {
            *slot = Complex::new(0.0, 0.0);
        }
        fwd.process(&mut buf);
        for (x, k) in buf.iter_mut().zip(kspec.iter()) {
            *x *= k;
        }
        inv.process(&mut buf);
        let valid = (chunk.len() + kernel.len() - 1).min(out_len - start);
        for (o, v) in out[start..start + valid].iter_mut().zip(buf.iter()) {
            *o += v.re * scale;
        }
    }
    out
}

/// Median of a slice (NaN-free input assumed). Returns 0 for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation about the median (unscaled).
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}
