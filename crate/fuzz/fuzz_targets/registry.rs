#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_net::license::{parse_date, ClientRegistry};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ClientRegistry::parse(text);
    let _ = parse_date(text);
});
