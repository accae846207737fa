#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = condens::io::ModelDocument::from_json(text) {
        // Whatever parses must re-serialize stably.
        let json = doc.to_json();
        let back = condens::io::ModelDocument::from_json(&json).expect("re-parse");
        assert_eq!(back.to_json(), json);
        // Conversion validates structural invariants; evaluating a valid
        // model must not panic.
        if let Ok(model) = doc.to_poly() {
            let x = vec![0.5; model.x_tree.dim()];
            let y = vec![0.5; model.degree.0.len()];
            let _ = model.log_density_checked(&x, &y);
        }
        if let Ok(model) = doc.to_gmm() {
            let x = vec![0.5; model.x_tree.dim()];
            let y = vec![0.0; model.d_y];
            let _ = model.log_density_checked(&x, &y);
        }
    }
});
