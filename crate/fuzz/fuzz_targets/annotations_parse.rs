#![no_main]

use ffdconv::sed::{format_annotations, parse_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(events) = parse_annotations(text) else {
        return;
    };
    for e in &events {
        assert!(e.onset.is_finite() && e.offset.is_finite() && e.onset < e.offset);
    }
    let again = parse_annotations(&format_annotations(&events)).expect("own output parses");
    assert_eq!(again, events);
});
