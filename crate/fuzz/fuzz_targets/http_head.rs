#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_net::http::{parse_request_head, parse_response_head};

fuzz_target!(|data: &[u8]| {
    if let Ok(Some((_, used))) = parse_request_head(data) {
        assert!(used <= data.len());
    }
    if let Ok(Some((_, _, used))) = parse_response_head(data) {
        assert!(used <= data.len());
    }
});
