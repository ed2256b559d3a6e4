#![no_main]

use libfuzzer_sys::fuzz_target;
use mlci_core::session::SessionState;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(state) = SessionState::from_json(text) {
        // a loaded session must answer status queries without panicking
        let _ = state.check_alarm();
        let _ = state.remaining_steps();
        let _ = state.plan.required_manifest_size();
        if let Ok(json) = state.to_json() {
            let _ = SessionState::from_json(&json);
        }
    }
});
