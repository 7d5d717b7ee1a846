//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets make, so the corpus stays meaningful on stable toolchains.

use std::fs;
use std::path::{Path, PathBuf};

use hybridplan::profiles::{cluster_to_json, parse_cluster_profile, parse_profile_document, to_json};
use hybridplan::search::parse_plan;

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(PathBuf, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let text = fs::read_to_string(&path).unwrap();
            (path, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn profile_seeds() {
    let mut accepted = 0;
    for (path, text) in seeds("parse_profile") {
        for strict in [true, false] {
            if let Ok(doc) = parse_profile_document(&text, strict) {
                accepted += 1;
                let again = to_json(&doc).unwrap();
                assert_eq!(parse_profile_document(&again, true).unwrap(), doc, "{}", path.display());
            }
        }
    }
    assert!(accepted > 0);
}

#[test]
fn cluster_seeds() {
    let mut accepted = 0;
    for (path, text) in seeds("parse_cluster") {
        if let Ok(cluster) = parse_cluster_profile(&text, true) {
            accepted += 1;
            let again = cluster_to_json(&cluster).unwrap();
            assert_eq!(
                parse_cluster_profile(&again, true).unwrap(),
                cluster,
                "{}",
                path.display()
            );
        }
    }
    assert!(accepted > 0);
}

#[test]
fn plan_seeds() {
    let mut accepted = 0;
    for (path, text) in seeds("parse_plan") {
        if let Ok(plan) = parse_plan(&text) {
            accepted += 1;
            let again = plan.to_json().unwrap();
            assert_eq!(parse_plan(&again).unwrap(), plan, "{}", path.display());
        }
    }
    assert!(accepted > 0);
}

#[test]
fn strict_mode_rejects_unknown_keys() {
    let (_, text) = seeds("parse_profile")
        .into_iter()
        .find(|(p, _)| p.ends_with("unknown_key.json"))
        .unwrap();
    assert!(parse_profile_document(&text, true).is_err());
    assert!(parse_profile_document(&text, false).is_ok());
}
