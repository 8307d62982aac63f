#![no_main]
use count2density::codec::decode_pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_pgm(data) {
        assert!(g.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
});
