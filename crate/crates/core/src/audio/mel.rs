//! Slaney-scale triangular mel filterbank.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    } else {
        mel * F_SP
    }
}

/// Centre frequencies of the `n_mels` filters, equally spaced in mel.
pub fn mel_centers(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    edges(n_mels, fmin, fmax)[1..=n_mels].to_vec()
}

fn edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `[n_mels, n_fft/2 + 1]` triangles peaking at 1 on their centre frequency.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Tensor<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Invalid(format!(
            "mel range must satisfy 0 <= fmin < fmax <= {nyquist}, got [{fmin}, {fmax}]"
        )));
    }
    if n_mels == 0 || n_fft == 0 {
        return Err(Error::Invalid("n_mels and n_fft must be positive".into()));
    }
    let bins = n_fft / 2 + 1;
    let e = edges(n_mels, fmin, fmax);
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (l, c, r) = (e[m], e[m + 1], e[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let v = ((f - l) / (c - l)).min((r - f) / (r - c));
            if v > 0.0 {
                w[m * bins + k] = v;
            }
        }
    }
    let empty: Vec<usize> = (0..n_mels)
        .filter(|&m| w[m * bins..(m + 1) * bins].iter().all(|&v| v == 0.0))
        .collect();
    if !empty.is_empty() {
        return Err(Error::Invalid(format!(
            "{n_mels} mel bands are too many for n_fft = {n_fft}: filters {empty:?} cover no FFT bin"
        )));
    }
    Tensor::new(vec![n_mels, bins], w)
}
