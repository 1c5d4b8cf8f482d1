use splat4d_core::scenegen::SceneSpec;
use splat4d_core::train::TrainConfig;

fn read(name: &str) -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/");
    std::fs::read_to_string(format!("{path}{name}")).unwrap()
}

#[test]
fn shipped_scene_config_matches_defaults() {
    assert_eq!(SceneSpec::from_toml(&read("scene.toml")).unwrap(), SceneSpec::default());
}

#[test]
fn shipped_train_config_matches_defaults() {
    assert_eq!(TrainConfig::from_toml(&read("train.toml")).unwrap(), TrainConfig::default());
}
