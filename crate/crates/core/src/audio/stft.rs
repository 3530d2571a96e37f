//! Short-time power spectra with centre reflect padding.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `floor(len / hop) + 1`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Maps a position of the padded signal onto `0..len` by mirroring about the
/// end samples without repeating them.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Power spectrogram `[T, n_fft/2 + 1]` with `T = floor(N / hop) + 1`. Frame
/// `t` is centred on sample `t·hop`; the signal is reflected at both ends.
pub fn stft(samples: &[f64], n_fft: usize, hop: usize, window: &[f64]) -> Result<Tensor<f64>> {
    if hop == 0 || n_fft < hop {
        return Err(Error::Invalid(format!(
            "need 0 < hop <= n_fft, got hop {hop}, n_fft {n_fft}"
        )));
    }
    if window.len() != n_fft {
        return Err(Error::Invalid(format!(
            "window has {} samples, n_fft is {n_fft}",
            window.len()
        )));
    }
    if samples.len() < hop {
        return Err(Error::Invalid(format!(
            "clip of {} samples is shorter than one hop ({hop})",
            samples.len()
        )));
    }
    let frames = frame_count(samples.len(), hop);
    let bins = n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let mut out = vec![0.0; frames * bins];
    out.par_chunks_mut(bins).enumerate().for_each_init(
        || {
            (
                vec![Complex::new(0.0, 0.0); n_fft],
                vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()],
            )
        },
        |(buf, scratch), (t, row)| {
            let start = (t * hop) as isize - half;
            for (i, (b, &w)) in buf.iter_mut().zip(window).enumerate() {
                *b = Complex::new(samples[reflect(start + i as isize, samples.len())] * w, 0.0);
            }
            fft.process_with_scratch(buf, scratch);
            for (p, c) in row.iter_mut().zip(buf.iter()) {
                *p = c.norm_sqr();
            }
        },
    );
    Tensor::new(vec![frames, bins], out)
}
