#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_harness::scenario::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Scenario::parse(text) {
        assert_eq!(Scenario::parse(&s.to_text()).unwrap(), s);
    }
});
