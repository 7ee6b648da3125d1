#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_core::policy::{parse_policy, AttributeSet};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_policy(text);
    let _ = text.parse::<AttributeSet>();
});
