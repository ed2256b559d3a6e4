#![no_main]

use libfuzzer_sys::fuzz_target;
use mlci_core::session::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::from_csv(data) {
        let back = Manifest::from_csv(m.to_csv().as_bytes()).expect("rendered manifest reparses");
        assert_eq!(back.ids(), m.ids());
        assert_eq!(back.testset_id(), m.testset_id());
    }
});
