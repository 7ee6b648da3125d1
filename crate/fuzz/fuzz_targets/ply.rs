#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_core::ply::{parse_header, parse_ply, write_ply};

fuzz_target!(|data: &[u8]| {
    let header = parse_header(data);
    if let Ok((cloud, tail)) = parse_ply(data) {
        assert!(header.is_ok());
        let again = write_ply(&cloud, None);
        let (reparsed, rest) = parse_ply(&again).unwrap();
        assert!(rest.is_empty());
        assert_eq!(reparsed.vertices.len(), cloud.vertices.len());
        let _ = tail;
    }
});
