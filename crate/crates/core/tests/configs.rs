use std::path::Path;

use piern::config::RunConfig;

#[test]
fn shipped_desk_config_matches_defaults() {
    let cfg = RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml").as_path()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn shipped_small_config_is_valid() {
    let cfg = RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.toml").as_path()).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.requests, 20);
    assert_eq!(cfg.seed, RunConfig::default().seed);
}
