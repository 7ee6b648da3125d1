#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_core::abe::{CiphertextBlob, MasterKey, PublicParams, UserKey};

fuzz_target!(|data: &[u8]| {
    let _ = MasterKey::from_bytes(data);
    let _ = PublicParams::from_bytes(data);
    let _ = UserKey::from_bytes(data);
    let _ = CiphertextBlob::from_bytes(data);
});
