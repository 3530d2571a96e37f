#![no_main]

use ffdconv::audio::{decode_wav, encode_wav_pcm16};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(clip) = decode_wav(data) else {
        return;
    };
    assert!(!clip.samples.is_empty());
    assert!(clip.samples.iter().all(|s| s.is_finite()));
    // 16-bit output is a fixed point after one round.
    let once = decode_wav(&encode_wav_pcm16(&clip)).expect("own output decodes");
    let twice = decode_wav(&encode_wav_pcm16(&once)).expect("own output decodes");
    assert_eq!(once.samples, twice.samples);
    assert_eq!(once.sample_rate, clip.sample_rate);
});
