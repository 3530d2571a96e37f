//! RIFF/WAVE decoding for 16-bit PCM and 32-bit float, mono or stereo.

use std::path::Path;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Mono samples in `[-1, 1]` at `sample_rate` Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Invalid("clip has no samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn check_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate == expected {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "sample rate {} Hz does not match the configured {expected} Hz (resampling is not supported)",
                self.sample_rate
            )))
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("wav", msg)
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

struct Format {
    code: u16,
    channels: u16,
    rate: u32,
    block_align: u16,
    bits: u16,
}

fn parse_fmt(body: &[u8]) -> Result<Format> {
    if body.len() < 16 {
        return Err(bad(format!("fmt chunk is {} bytes, need 16", body.len())));
    }
    let mut code = u16_at(body, 0);
    if code == FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(bad("extensible fmt chunk shorter than 40 bytes"));
        }
        // The sub-format GUID starts with the plain format code.
        code = u16_at(body, 24);
    }
    Ok(Format {
        code,
        channels: u16_at(body, 2),
        rate: u32_at(body, 4),
        block_align: u16_at(body, 12),
        bits: u16_at(body, 14),
    })
}

/// Parses a complete WAV file image.
pub fn decode_wav(bytes: &[u8]) -> Result<WaveClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("chunk {:?} runs past end of file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[start..end])?),
            b"data" => {
                data = Some(&bytes[start..end]);
                break;
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| bad("no fmt chunk before data"))?;
    let data = data.ok_or_else(|| bad("no data chunk"))?;

    let width = match (fmt.code, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (code, bits) => {
            return Err(bad(format!(
                "unsupported encoding (format {code}, {bits} bits); expected 16-bit PCM or 32-bit float"
            )))
        }
    };
    let channels = fmt.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(bad(format!("{channels} channels; expected mono or stereo")));
    }
    if fmt.rate == 0 {
        return Err(bad("sample rate is zero"));
    }
    let frame = width * channels;
    if fmt.block_align as usize != frame {
        return Err(bad(format!("block align {} != {frame}", fmt.block_align)));
    }
    if data.is_empty() {
        return Err(bad("data chunk is empty"));
    }
    if data.len() % frame != 0 {
        return Err(bad(format!(
            "data length {} is not a whole number of frames",
            data.len()
        )));
    }
    let sample = |chunk: &[u8]| -> f64 {
        if width == 2 {
            i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64
        }
    };
    let mut samples = Vec::with_capacity(data.len() / frame);
    for f in data.chunks_exact(frame) {
        let sum: f64 = f.chunks_exact(width).map(sample).sum();
        let v = sum / channels as f64;
        if !v.is_finite() {
            return Err(bad("non-finite float sample"));
        }
        samples.push(v);
    }
    WaveClip::new(samples, fmt.rate)
}

/// Reads `path`, rejecting clips whose rate is not `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<WaveClip> {
    let clip = decode_wav(&std::fs::read(path)?)?;
    clip.check_rate(expected_rate)?;
    Ok(clip)
}

/// 16-bit PCM mono encoding; samples are clipped to `[-1, 1)`. Uses the
/// same scale as decoding, so decoded 16-bit audio re-encodes exactly.
pub fn encode_wav_pcm16(clip: &WaveClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    // Byte rate is informational; absurd rates saturate rather than wrap.
    out.extend_from_slice(&clip.sample_rate.saturating_mul(2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(code: u16, channels: u16, bits: u16, data: &[u8]) -> Vec<u8> {
        let align = channels * bits / 8;
        let mut v = Vec::new();
        v.extend_from_slice(b"RIFF");
        v.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        v.extend_from_slice(b"WAVEfmt ");
        v.extend_from_slice(&16u32.to_le_bytes());
        v.extend_from_slice(&code.to_le_bytes());
        v.extend_from_slice(&channels.to_le_bytes());
        v.extend_from_slice(&16000u32.to_le_bytes());
        v.extend_from_slice(&(16000 * align as u32).to_le_bytes());
        v.extend_from_slice(&align.to_le_bytes());
        v.extend_from_slice(&bits.to_le_bytes());
        v.extend_from_slice(b"data");
        v.extend_from_slice(&(data.len() as u32).to_le_bytes());
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn pcm16_scaling() {
        let data: Vec<u8> = [16384i16, -32768, 0].iter().flat_map(|s| s.to_le_bytes()).collect();
        let clip = decode_wav(&header(1, 1, 16, &data)).unwrap();
        assert_eq!(clip.samples, vec![0.5, -1.0, 0.0]);
        assert_eq!(clip.sample_rate, 16000);
    }

    #[test]
    fn stereo_float_is_averaged() {
        let data: Vec<u8> = [0.2f32, 0.4].iter().flat_map(|s| s.to_le_bytes()).collect();
        let clip = decode_wav(&header(3, 2, 32, &data)).unwrap();
        assert!((clip.samples[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode_wav(&header(1, 1, 16, &[])).is_err());
        assert!(decode_wav(&header(1, 1, 8, &[0, 0])).is_err());
        assert!(decode_wav(&header(1, 3, 16, &[0; 6])).is_err());
        assert!(decode_wav(&header(1, 1, 16, &[0; 3])).is_err());
        assert!(decode_wav(b"RIFF\0\0\0\0WAVE").is_err());
        assert!(decode_wav(b"not a wav").is_err());
        let mut truncated = header(1, 1, 16, &[0; 4]);
        truncated.truncate(truncated.len() - 2);
        assert!(decode_wav(&truncated).is_err());
    }

    #[test]
    fn rate_check() {
        let clip = WaveClip::new(vec![0.0; 4], 8000).unwrap();
        assert!(clip.check_rate(16000).is_err());
        assert!(clip.check_rate(8000).is_ok());
    }

    #[test]
    fn pcm16_round_trip() {
        let clip = WaveClip::new(vec![0.0, 0.25, -0.5, 1.0], 16000).unwrap();
        let back = decode_wav(&encode_wav_pcm16(&clip)).unwrap();
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        let bytes = encode_wav_pcm16(&back);
        assert_eq!(encode_wav_pcm16(&decode_wav(&bytes).unwrap()), bytes);
    }
}
