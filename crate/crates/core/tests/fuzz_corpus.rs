//! Runs the checked-in fuzz seeds, and random mutations of them, through
//! the same checks as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use count2density::bank::BankManifest;
use count2density::codec::{decode_grid, decode_pgm, encode_grid};
use count2density::model::ModelParams;
use count2density::pseudo::PointSet;
use proptest::prelude::*;

fn check(target: &str, data: &[u8]) {
    match target {
        "c2dg" => {
            if let Ok(g) = decode_grid(data) {
                let again = decode_grid(&encode_grid(&g)).unwrap();
                assert!(again.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        "pgm" => {
            if let Ok(g) = decode_pgm(data) {
                assert!(g.values().iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
        "checkpoint" => {
            if let Ok(p) = ModelParams::decode(data) {
                assert_eq!(ModelParams::decode(&p.encode()).unwrap(), p);
            }
        }
        "points_csv" => {
            if let Ok(text) = std::str::from_utf8(data) {
                if let Ok(p) = PointSet::from_csv(text) {
                    assert_eq!(PointSet::from_csv(&p.to_csv()).unwrap(), p);
                }
            }
        }
        "bank_manifest" => {
            if let Ok(text) = std::str::from_utf8(data) {
                let _ = BankManifest::from_json(text);
            }
        }
        other => panic!("no check for {other}"),
    }
}

const TARGETS: [&str; 5] = ["c2dg", "pgm", "checkpoint", "points_csv", "bank_manifest"];

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<Vec<u8>> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    out
}

#[test]
fn every_target_has_seeds_that_pass() {
    for t in TARGETS {
        let s = seeds(t);
        assert!(s.len() >= 3, "{t}");
        for d in &s {
            check(t, d);
        }
    }
    assert!(decode_grid(&seeds("c2dg").into_iter().max_by_key(Vec::len).unwrap()).is_ok());
    assert!(ModelParams::decode(&seeds("checkpoint").into_iter().max_by_key(Vec::len).unwrap()).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn mutated_seeds_never_panic(
        t in 0usize..5,
        pick in any::<prop::sample::Index>(),
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..6),
        cut in any::<prop::sample::Index>(),
        truncate in any::<bool>(),
    ) {
        let s = seeds(TARGETS[t]);
        let mut data = s[pick.index(s.len())].clone();
        if !data.is_empty() {
            for (i, b) in &edits {
                let k = i.index(data.len());
                data[k] = *b;
            }
            if truncate {
                data.truncate(cut.index(data.len()));
            }
        }
        check(TARGETS[t], &data);
    }
}
