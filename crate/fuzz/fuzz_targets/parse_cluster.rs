#![no_main]

use hybridplan::profiles::{cluster_to_json, parse_cluster_profile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cluster) = parse_cluster_profile(text, true) {
        let _ = cluster.memory_budget();
        let again = cluster_to_json(&cluster).expect("accepted cluster serializes");
        assert_eq!(
            parse_cluster_profile(&again, true).expect("canonical output parses"),
            cluster
        );
    }
});
