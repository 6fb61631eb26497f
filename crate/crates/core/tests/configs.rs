use std::path::Path;

use bitemporal::config::ExperimentConfig;
use bitemporal::presets;

fn shipped(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn example_config_is_the_btc_t_preset() {
    let c = ExperimentConfig::load(&shipped("example.toml")).unwrap();
    c.validate().unwrap();
    assert_eq!(c, presets::preset("btc-t").unwrap());
}

#[test]
fn example_config_accepts_overrides() {
    let c = ExperimentConfig::load(&shipped("example.toml")).unwrap();
    let d = c.with_overrides(&["loss.kind=ce", "scheduler.kind=multistep"]).unwrap();
    assert_eq!(d.loss.kind.as_str(), "ce");
    assert_ne!(d.hash(), c.hash());
}
