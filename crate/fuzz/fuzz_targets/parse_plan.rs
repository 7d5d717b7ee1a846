#![no_main]

use hybridplan::search::parse_plan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(plan) = parse_plan(text) {
        let _ = plan.stage_of_layer(0);
        let again = plan.to_json().expect("accepted plan serializes");
        assert_eq!(parse_plan(&again).expect("canonical output parses"), plan);
    }
});
