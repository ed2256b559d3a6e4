//! The fuzz targets' invariants, checked on the checked-in corpus and on
//! random inputs: parsers never panic, and whatever they accept renders
//! back to text that parses to the same value.

use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use mlci_core::dsl::{parse_condition, parse_script};
use mlci_core::evaluator::{LabelSet, PredictionSet};
use mlci_core::session::{Manifest, SessionState};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> =
        fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())).map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files.into_iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())).collect()
}

fn check_condition(text: &str) {
    if let Ok(f) = parse_condition(text) {
        let rendered = f.to_string();
        assert_eq!(parse_condition(&rendered).unwrap(), f, "{rendered}");
    }
}

fn check_script(text: &str) {
    if let Ok(s) = parse_script(text) {
        let rendered = s.to_script_text();
        assert_eq!(parse_script(&rendered).unwrap(), s, "{rendered}");
    }
}

fn check_predictions(data: &[u8]) {
    let _ = LabelSet::from_csv(data);
    if let Ok(p) = PredictionSet::from_csv("fuzz", data) {
        assert_eq!(PredictionSet::from_csv("fuzz", p.to_csv().as_bytes()).unwrap(), p);
    }
}

fn check_manifest(data: &[u8]) {
    if let Ok(m) = Manifest::from_csv(data) {
        let back = Manifest::from_csv(m.to_csv().as_bytes()).unwrap();
        assert_eq!(back.ids(), m.ids());
        assert_eq!(back.testset_id(), m.testset_id());
    }
}

#[test]
fn condition_corpus() {
    let mut accepted = 0;
    for (name, data) in corpus("parse_condition") {
        let text = String::from_utf8(data).unwrap();
        check_condition(&text);
        accepted += usize::from(parse_condition(&text).is_ok());
        if name.starts_with("bad") {
            assert!(parse_condition(&text).is_err(), "{name}");
        }
    }
    assert!(accepted >= 5);
}

#[test]
fn script_corpus() {
    for (name, data) in corpus("parse_script") {
        let text = String::from_utf8(data).unwrap();
        assert!(parse_script(&text).is_ok(), "{name}: {:?}", parse_script(&text));
        check_script(&text);
    }
}

#[test]
fn csv_corpora() {
    for (name, data) in corpus("prediction_csv") {
        check_predictions(&data);
        assert_eq!(PredictionSet::from_csv("m", &data[..]).is_ok(), name != "duplicate", "{name}");
    }
    for (name, data) in corpus("manifest_csv") {
        assert!(Manifest::from_csv(&data[..]).is_ok(), "{name}");
        check_manifest(&data);
    }
}

#[test]
fn session_corpus() {
    for (name, data) in corpus("session_state") {
        let state =
            SessionState::from_json(std::str::from_utf8(&data).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = SessionState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(again, state);
    }
}

/// Strings over the condition alphabet, so most inputs get past the lexer.
fn condition_like() -> impl Strategy<Value = String> {
    let token = prop_oneof![
        Just("n".to_string()),
        Just("o".to_string()),
        Just("d".to_string()),
        Just(" + ".to_string()),
        Just(" - ".to_string()),
        Just(" * ".to_string()),
        Just(" > ".to_string()),
        Just(" < ".to_string()),
        Just(" +/- ".to_string()),
        Just(" /\\ ".to_string()),
        (0u32..2000).prop_map(|k| format!("{}", f64::from(k) / 1000.0)),
        "[-+*/\\\\<>=().eE0-9 ]{1,3}",
    ];
    prop::collection::vec(token, 0..16).prop_map(|ts| ts.concat())
}

fn script_like() -> impl Strategy<Value = String> {
    let key = prop_oneof![
        Just("script"),
        Just("condition"),
        Just("reliability"),
        Just("mode"),
        Just("adaptivity"),
        Just("steps"),
        Just("firstChange_on"),
        Just("colour"),
    ];
    let value = prop_oneof![
        Just("./t.sh".to_string()),
        Just("n > 0.5 +/- 0.1".to_string()),
        Just("0.999".to_string()),
        Just("fp-free".to_string()),
        Just("fn-free".to_string()),
        Just("full".to_string()),
        Just("none -> a@b".to_string()),
        Just("firstChange".to_string()),
        Just("32".to_string()),
        "[ -~]{0,12}",
    ];
    let line = prop_oneof![
        4 => (key, value, " {0,3}").prop_map(|(k, v, pad)| format!("  - {k}{pad}: {v}")),
        1 => Just("ml:".to_string()),
        1 => "[ -~]{0,20}",
    ];
    prop::collection::vec(line, 0..10).prop_map(|ls| format!("ml:\n{}\n", ls.join("\n")))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn arbitrary_conditions(text in condition_like()) {
        check_condition(&text);
    }

    #[test]
    fn arbitrary_unicode_conditions(text in "\\PC{0,40}") {
        check_condition(&text);
    }

    #[test]
    fn arbitrary_scripts(text in script_like()) {
        check_script(&text);
    }

    #[test]
    fn arbitrary_csv(data in prop::collection::vec(prop_oneof![Just(b','), Just(b'\n'), Just(b'"'), Just(b'a'), Just(b'1'), any::<u8>()], 0..80)) {
        let mut with_header = b"example_id,label\n".to_vec();
        with_header.extend_from_slice(&data);
        check_predictions(&data);
        check_predictions(&with_header);
        check_manifest(&data);
        check_manifest(&with_header);
    }

    #[test]
    fn arbitrary_session_json(text in "\\PC{0,200}") {
        if let Ok(s) = SessionState::from_json(&text) {
            let _ = s.check_alarm();
        }
    }
}
