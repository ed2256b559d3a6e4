#![no_main]

use libfuzzer_sys::fuzz_target;
use mlci_core::evaluator::{LabelSet, PredictionSet};

fuzz_target!(|data: &[u8]| {
    let _ = LabelSet::from_csv(data);
    if let Ok(p) = PredictionSet::from_csv("fuzz", data) {
        let back = PredictionSet::from_csv("fuzz", p.to_csv().as_bytes()).expect("rendered csv reparses");
        assert_eq!(back, p);
    }
});
