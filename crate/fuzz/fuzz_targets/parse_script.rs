#![no_main]

use libfuzzer_sys::fuzz_target;
use mlci_core::dsl::parse_script;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(script) = parse_script(text) {
        let rendered = script.to_script_text();
        let back = parse_script(&rendered).expect("rendered script reparses");
        assert_eq!(back, script, "{rendered}");
    }
});
