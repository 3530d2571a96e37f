//! Audio front end: WAV decoding, STFT and log-mel features.

mod mel;
mod stft;
mod wav;

pub use mel::{hz_to_mel, mel_centers, mel_filterbank, mel_to_hz};
pub use stft::{frame_count, hann, stft};
pub use wav::{decode_wav, encode_wav_pcm16, read_wav, WaveClip};

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::ops::gemm::{gemm, Gemm};
use crate::tensor::Tensor;

const KEYS: &[&str] = &[
    "sample_rate",
    "n_fft",
    "hop",
    "win",
    "n_mels",
    "fmin",
    "fmax",
    "log_floor",
];

/// Extraction settings. The defaults give 626 × 128 features for a
/// 10 s clip at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    /// Hann window length; must equal `n_fft`.
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 2048,
            hop: 256,
            win: 2048,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-6,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.win != self.n_fft {
            return bad(format!("win ({}) must equal n_fft ({})", self.win, self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("hop must be in 1..=n_fft, got {}", self.hop));
        }
        if self.n_mels == 0 || self.sample_rate == 0 {
            return bad("n_mels and sample_rate must be positive".into());
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got {}..{}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("sample_rate", self.sample_rate);
        kv.set("n_fft", self.n_fft);
        kv.set("hop", self.hop);
        kv.set("win", self.win);
        kv.set("n_mels", self.n_mels);
        kv.set("fmin", self.fmin);
        kv.set("fmax", self.fmax);
        kv.set("log_floor", self.log_floor);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.reject_unknown(KEYS)?;
        kv.apply("sample_rate", &mut self.sample_rate)?;
        kv.apply("n_fft", &mut self.n_fft)?;
        kv.apply("hop", &mut self.hop)?;
        kv.apply("win", &mut self.win)?;
        kv.apply("n_mels", &mut self.n_mels)?;
        kv.apply("fmin", &mut self.fmin)?;
        kv.apply("fmax", &mut self.fmax)?;
        kv.apply("log_floor", &mut self.log_floor)?;
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut p = Self::default();
        p.apply_kv(kv)?;
        p.validate()?;
        Ok(p)
    }
}

/// `[T, n_mels]` log-energies together with the settings that made them.
#[derive(Clone, Debug)]
pub struct MelSpectrogram {
    pub values: Tensor<f64>,
    pub params: FeatureParams,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.dim(0)
    }

    pub fn bands(&self) -> usize {
        self.values.dim(1)
    }
}

/// Reusable extractor: the window and filterbank are built once.
#[derive(Clone, Debug)]
pub struct MelExtractor {
    params: FeatureParams,
    window: Vec<f64>,
    filters: Tensor<f64>,
}

impl MelExtractor {
    pub fn new(params: FeatureParams) -> Result<Self> {
        params.validate()?;
        let filters = mel_filterbank(
            params.n_mels,
            params.n_fft,
            params.sample_rate,
            params.fmin,
            params.fmax,
        )?;
        Ok(Self {
            window: hann(params.win),
            filters,
            params,
        })
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn filters(&self) -> &Tensor<f64> {
        &self.filters
    }

    pub fn extract(&self, clip: &WaveClip) -> Result<MelSpectrogram> {
        let p = &self.params;
        clip.check_rate(p.sample_rate)?;
        let power = stft(&clip.samples, p.n_fft, p.hop, &self.window)?;
        let (frames, bins) = (power.dim(0), power.dim(1));
        let mut out = vec![0.0; frames * p.n_mels];
        gemm(
            Gemm::new(frames, bins, p.n_mels).trans_b(),
            power.data(),
            self.filters.data(),
            &mut out,
        );
        for v in &mut out {
            *v = (v.max(0.0) + p.log_floor).ln();
        }
        Ok(MelSpectrogram {
            values: Tensor::new(vec![frames, p.n_mels], out)?,
            params: p.clone(),
        })
    }
}

/// `log(filterbank · power + log_floor)` per frame.
pub fn log_mel(clip: &WaveClip, params: &FeatureParams) -> Result<MelSpectrogram> {
    MelExtractor::new(params.clone())?.extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(hz: f64, seconds: f64, amp: f64) -> WaveClip {
        let n = (16000.0 * seconds) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / 16000.0).sin())
            .collect();
        WaveClip::new(s, 16000).unwrap()
    }

    #[test]
    fn ten_seconds_gives_626_by_128() {
        let m = log_mel(&sine(440.0, 10.0, 0.3), &FeatureParams::default()).unwrap();
        assert_eq!(m.values.shape(), &[626, 128]);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let clip = WaveClip::new(vec![0.0; 16000], 16000).unwrap();
        let m = log_mel(&clip, &FeatureParams::default()).unwrap();
        let floor = 1e-6f64.ln();
        assert!(m.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_in_the_nearest_band() {
        let p = FeatureParams::default();
        let m = log_mel(&sine(1000.0, 1.0, 0.5), &p).unwrap();
        let centres = mel_centers(p.n_mels, p.fmin, p.fmax);
        let nearest = (0..p.n_mels)
            .min_by(|&a, &b| (centres[a] - 1000.0).abs().total_cmp(&(centres[b] - 1000.0).abs()))
            .unwrap();
        for row in m.values.data().chunks(p.n_mels) {
            let arg = (0..p.n_mels).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let clip = WaveClip::new(vec![0.0; 8000], 8000).unwrap();
        assert!(log_mel(&clip, &FeatureParams::default()).is_err());
    }

    #[test]
    fn params_kv_round_trip_and_validation() {
        let p = FeatureParams {
            n_mels: 64,
            hop: 160,
            ..FeatureParams::default()
        };
        assert_eq!(FeatureParams::from_kv(&p.to_kv()).unwrap(), p);
        assert!(FeatureParams::from_kv(&KvConfig::parse("win=1024").unwrap()).is_err());
        assert!(FeatureParams::from_kv(&KvConfig::parse("colour=1").unwrap()).is_err());
        assert!(FeatureParams::from_kv(&KvConfig::parse("fmax=9000").unwrap()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn louder_never_lowers_any_value(
            seed in 0u64..1000,
            alpha in 1.01f64..4.0,
            len in 600usize..3000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let p = FeatureParams { n_fft: 256, win: 256, hop: 64, n_mels: 16, ..FeatureParams::default() };
            let ex = MelExtractor::new(p).unwrap();
            let a = ex.extract(&WaveClip::new(s.clone(), 16000).unwrap()).unwrap();
            let b = ex.extract(&WaveClip::new(s.iter().map(|v| v * alpha).collect(), 16000).unwrap()).unwrap();
            for (x, y) in a.values.data().iter().zip(b.values.data()) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn frame_count_formula(len in 64usize..5000, hop in 1usize..64) {
            let p = stft(&vec![0.1; len], 64, hop, &hann(64)).unwrap();
            prop_assert_eq!(p.dim(0), len / hop + 1);
        }

        #[test]
        fn filterbank_nonnegative_and_covering(n_mels in 4usize..40, fmax in 2000.0f64..8000.0) {
            let fb = mel_filterbank(n_mels, 1024, 16000, 0.0, fmax).unwrap();
            let bins = 513;
            prop_assert!(fb.data().iter().all(|&v| v >= 0.0));
            let c = mel_centers(n_mels, 0.0, fmax);
            for k in 0..bins {
                let f = k as f64 * 16000.0 / 1024.0;
                if f > c[0] && f < c[n_mels - 1] {
                    let col: f64 = (0..n_mels).map(|m| fb.data()[m * bins + k]).sum();
                    prop_assert!(col > 0.0);
                }
            }
        }
    }
}
