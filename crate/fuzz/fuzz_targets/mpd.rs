#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_core::manifest::{generate_mpd, parse_mpd};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_mpd(text) {
        assert_eq!(parse_mpd(&generate_mpd(&m)).unwrap(), m);
    }
});
