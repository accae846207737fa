#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = condens::io::decode_cube(data) {
        let bytes = condens::io::encode_cube(&img);
        let back = condens::io::decode_cube(&bytes).expect("re-decode of encoded cube");
        assert_eq!(img, back);
        let _ = img.to_dataset();
    }
});
