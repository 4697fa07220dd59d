use std::path::PathBuf;

use qd_cli::{parse_blob, PartialConfig, RunConfig};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let seeds: Vec<Vec<u8>> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!seeds.is_empty());
    seeds
}

#[test]
fn config_seeds_resolve() {
    for bytes in seeds("config_json") {
        RunConfig::resolve(PartialConfig::from_json(&bytes).unwrap()).unwrap();
    }
}

#[test]
fn blob_seeds_parse() {
    for bytes in seeds("blob_arg") {
        parse_blob(std::str::from_utf8(&bytes).unwrap()).unwrap();
    }
}
