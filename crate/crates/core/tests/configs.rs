use egofront::RunConfig;

fn shipped(name: &str) -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn shipped_toy_config_matches_the_preset() {
    let mut loaded = shipped("toy.toml");
    assert!(loaded.paths.manifest.is_some());
    loaded.paths = RunConfig::toy().paths;
    assert_eq!(loaded, RunConfig::toy());
    assert_eq!(loaded.digest(), RunConfig::toy().digest());
}
