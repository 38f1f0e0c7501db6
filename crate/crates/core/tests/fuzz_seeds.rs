//! Replays the checked-in fuzz seeds through the fuzz target checks.

use std::fs;
use std::path::{Path, PathBuf};

use adtg::corpus::{parse_features, parse_vocabulary};
use adtg::fuzz_checks::{fixture_vocab, TARGETS};
use adtg::graph::Adtg;

fn fuzz_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz")
}

fn seed(target: &str, name: &str) -> Vec<u8> {
    fs::read(fuzz_dir().join("corpus").join(target).join(name)).unwrap()
}

#[test]
fn every_seed_passes_its_target_check() {
    for (target, check) in TARGETS {
        let src = fuzz_dir().join("fuzz_targets").join(format!("{target}.rs"));
        assert!(src.exists(), "missing fuzz target {}", src.display());
        let mut entries: Vec<PathBuf> = fs::read_dir(fuzz_dir().join("corpus").join(target))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        assert!(entries.len() >= 3, "{target} has too few seeds");
        for e in entries {
            check(&fs::read(&e).unwrap());
        }
    }
}

#[test]
fn valid_seeds_are_accepted_and_broken_ones_rejected() {
    assert!(parse_features(&seed("parse_features", "one_by_one"), "s").is_ok());
    assert!(parse_features(&seed("parse_features", "synthetic_video"), "s").is_ok());
    for bad in ["truncated_body", "nan_value", "bad_version"] {
        assert!(parse_features(&seed("parse_features", bad), "s").is_err(), "{bad}");
    }
    let text = |t, n| String::from_utf8(seed(t, n)).unwrap();
    assert!(parse_vocabulary(&text("parse_vocabulary", "valid"), "s").is_ok());
    assert!(parse_vocabulary(&text("parse_vocabulary", "duplicate"), "s").is_err());
    let vocab = fixture_vocab();
    assert!(Adtg::from_json(&text("graph_from_json", "valid"), &vocab).is_ok());
    assert!(Adtg::from_json(&text("graph_from_json", "self_loop"), &vocab).is_ok());
    for bad in ["eos_outgoing", "undeclared_node", "wrong_task"] {
        assert!(Adtg::from_json(&text("graph_from_json", bad), &vocab).is_err(), "{bad}");
    }
}

#[test]
fn random_bytes_never_panic() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for (_, check) in TARGETS {
        for _ in 0..300 {
            let n = rng.random_range(0..96);
            let bytes: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            check(&bytes);
        }
    }
}
