#![no_main]

use hybridplan::profiles::{parse_profile_document, to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for strict in [true, false] {
        if let Ok(doc) = parse_profile_document(text, strict) {
            // Anything accepted must serialize and parse back unchanged.
            let again = to_json(&doc).expect("accepted document serializes");
            let back = parse_profile_document(&again, true).expect("canonical output parses");
            assert_eq!(back, doc);
        }
    }
});
