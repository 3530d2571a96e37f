#![no_main]

use ffdconv::io::{decode_tensor, tensor_to_bytes, AnyTensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((tensor, used)) = decode_tensor(data) else {
        return;
    };
    assert!(used <= data.len());
    // Re-encoding reproduces exactly the bytes that were consumed.
    let again = match &tensor {
        AnyTensor::F32(t) => tensor_to_bytes(t),
        AnyTensor::F64(t) => tensor_to_bytes(t),
    }
    .expect("decoded tensors re-encode");
    assert_eq!(again, &data[..used]);
});
