#![no_main]
use count2density::codec::{decode_grid, encode_grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grid(data) {
        let again = decode_grid(&encode_grid(&g)).expect("re-encoded grid decodes");
        assert_eq!(again.shape(), g.shape());
        assert!(again.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
