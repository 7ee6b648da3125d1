#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_core::pattern::parse_pattern;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = parse_pattern(text) {
        assert_eq!(parse_pattern(&g.to_string()).unwrap(), g);
    }
});
