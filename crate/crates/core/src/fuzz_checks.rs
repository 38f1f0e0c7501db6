//! Properties exercised by the fuzz targets and by the seed replay test.
//! Every check accepts arbitrary bytes: parse errors are fine, panics and
//! broken round trips are not.

use crate::config::RunConfig;
use crate::corpus::{parse_annotations, parse_features, parse_vocabulary, write_features, ActionVocabulary};
use crate::graph::Adtg;
use crate::store::{decode_blob, encode_blob, parse_manifest, TensorEntry};

/// Vocabulary the text targets parse against.
pub fn fixture_vocab() -> ActionVocabulary {
    ActionVocabulary::new("fuzz", vec!["a".into(), "b".into(), "c".into()]).expect("valid vocabulary")
}

/// Accepted feature files re-encode to the same bytes.
pub fn features(data: &[u8]) {
    if let Ok(s) = parse_features(data, "fuzz") {
        assert_eq!(write_features(&s), data);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }
}

/// Accepted annotation lines only name real actions.
pub fn annotations(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = fixture_vocab();
    if let Ok(lines) = parse_annotations(text, &vocab, "fuzz") {
        for (_, segs) in lines {
            assert!(segs.iter().all(|s| vocab.is_action(s.action)));
        }
    }
}

pub fn vocabulary(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = parse_vocabulary(text, "fuzz") {
        let again = parse_vocabulary(&serde_json::to_string(&v).expect("serializes"), "fuzz").expect("round trip");
        assert_eq!(again, v);
        assert!(v.actions().iter().all(|a| v.id(a).is_some_and(|id| v.is_action(id))));
    }
}

pub fn graph(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = fixture_vocab();
    if let Ok(g) = Adtg::from_json(text, &vocab) {
        assert_eq!(Adtg::from_json(&g.to_json(), &vocab).expect("round trip"), g);
        assert!(g.edges().all(|(a, _, _)| a != g.eos()));
    }
}

/// Manifest text, a zero byte, then the blob.
pub fn bundle(data: &[u8]) {
    let split = data.iter().position(|b| *b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let blob = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(m) = parse_manifest(text, "fuzz") {
        blob_with(blob, &m.tensors);
    }
}

/// A shape list (one byte per dimension count, then one byte per
/// dimension), a zero byte, then the blob.
pub fn blob(data: &[u8]) {
    let split = data.iter().position(|b| *b == 0).unwrap_or(data.len());
    let mut entries = Vec::new();
    let mut it = data[..split].iter();
    while let Some(&rank) = it.next() {
        let shape: Vec<usize> = it.by_ref().take(usize::from(rank % 4)).map(|d| usize::from(*d)).collect();
        entries.push(TensorEntry { name: format!("t{}", entries.len()), shape });
    }
    blob_with(data.get(split + 1..).unwrap_or(&[]), &entries);
}

fn blob_with(bytes: &[u8], entries: &[TensorEntry]) {
    if let Ok(ts) = decode_blob(bytes, entries, "fuzz") {
        let named: Vec<(&str, &crate::numkit::Tensor)> = entries.iter().map(|e| e.name.as_str()).zip(&ts).collect();
        assert_eq!(encode_blob(&named), bytes);
    }
}

/// Accepted configs validate and survive a serialization round trip.
pub fn config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (body, overrides) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(c) = RunConfig::from_json(body) {
        assert_eq!(RunConfig::from_json(&c.to_json()).expect("round trip"), c);
        if let Ok(o) = c.with_overrides(overrides.lines()) {
            o.validate().expect("overrides validate");
        }
    }
}

pub type Check = fn(&[u8]);

/// Target names paired with their checks, in the order of `fuzz/fuzz_targets`.
pub const TARGETS: [(&str, Check); 7] = [
    ("parse_features", features),
    ("parse_annotations", annotations),
    ("parse_vocabulary", vocabulary),
    ("graph_from_json", graph),
    ("bundle_manifest", bundle),
    ("decode_blob", blob),
    ("run_config", config),
];
