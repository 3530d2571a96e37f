#![no_main]

use ffdconv::model::{checkpoint_from_bytes, checkpoint_to_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((model, meta)) = checkpoint_from_bytes::<f32>(data) else {
        return;
    };
    let bytes = checkpoint_to_bytes(&model, &meta).expect("loaded models serialize");
    let (again, meta2) = checkpoint_from_bytes::<f32>(&bytes).expect("own output loads");
    assert_eq!(meta, meta2);
    assert_eq!(checkpoint_to_bytes(&again, &meta2).unwrap(), bytes);
});
