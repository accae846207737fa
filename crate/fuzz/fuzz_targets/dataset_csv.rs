#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dataset) = condens::io::parse_dataset_csv(text) {
        // A parsed dataset must re-emit and re-parse to the same value.
        let emitted = condens::io::dataset_to_csv(&dataset);
        let back = condens::io::parse_dataset_csv(&emitted).expect("re-parse of emitted CSV");
        assert_eq!(dataset, back);
    }
});
