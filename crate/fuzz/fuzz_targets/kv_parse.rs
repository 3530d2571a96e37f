#![no_main]

use ffdconv::kv::KvConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(kv) = KvConfig::parse_bytes(data) else {
        return;
    };
    let text = kv.to_string();
    assert_eq!(KvConfig::parse(&text).expect("own output parses"), kv);
});
