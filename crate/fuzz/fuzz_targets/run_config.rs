#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = condens::io::RunConfig::from_toml_str(text);
    let _ = condens::io::scenario::ScenarioConfig::from_toml_str(text);
});
