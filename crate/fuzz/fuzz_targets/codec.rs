#![no_main]
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use pcvault_core::abe::{keygen, setup, UserKey};
use pcvault_core::codec::{decrypt_frame, inspect, zero_fill};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn key() -> &'static UserKey {
    static KEY: OnceLock<UserKey> = OnceLock::new();
    KEY.get_or_init(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (mut pp, mk) = setup(&mut rng).unwrap();
        pp.publish_tag(&mk, "subscriber").unwrap();
        keygen(&pp, &mk, &"subscriber".parse().unwrap(), 0, &mut rng).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    let _ = inspect(data);
    let _ = zero_fill(data);
    let _ = decrypt_frame(data, key());
});
