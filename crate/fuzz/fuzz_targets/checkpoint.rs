#![no_main]
use count2density::model::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ModelParams::decode(data) {
        assert_eq!(ModelParams::decode(&p.encode()).expect("re-encoded checkpoint decodes"), p);
    }
});
