#![no_main]

use libfuzzer_sys::fuzz_target;
use mlci_core::dsl::parse_condition;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = parse_condition(text) {
        // anything accepted must survive a render/parse round trip
        let rendered = f.to_string();
        let back = parse_condition(&rendered).expect("rendered condition reparses");
        assert_eq!(back, f, "{rendered}");
    }
});
