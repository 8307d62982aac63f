#![no_main]
use count2density::pseudo::PointSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = PointSet::from_csv(text) {
        assert_eq!(PointSet::from_csv(&p.to_csv()).expect("written csv parses"), p);
    }
});
