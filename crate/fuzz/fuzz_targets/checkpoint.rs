#![no_main]

use ehrpd::checkpoint::{decode_tensors, Manifest};
use libfuzzer_sys::fuzz_target;

// Input layout: a little-endian u32 manifest length, the manifest text, then
// the tensor bytes.
fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<4>() else {
        return;
    };
    let len = (u32::from_le_bytes(*len) as usize).min(rest.len());
    let (manifest, tensors) = rest.split_at(len);
    let Ok(text) = std::str::from_utf8(manifest) else {
        return;
    };
    if let Ok(m) = Manifest::parse(text) {
        let _ = decode_tensors::<f32>(&m, tensors);
        let _ = decode_tensors::<f64>(&m, tensors);
    }
});
