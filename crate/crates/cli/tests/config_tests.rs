//! Config schema behaviour: closed schema, path validation, overrides.

mod common;

use gprune_cli::{load_config, Overrides};

#[test]
fn unknown_keys_are_rejected_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_tiny_config(dir.path(), "run.toml", 1, 2, "");

    // top level
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("\nbogus_key = 1\n");
    let bad = dir.path().join("bad1.toml");
    std::fs::write(&bad, &text).unwrap();
    let err = load_config(&bad, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("bogus_key"), "{err}");

    // inside a section: a typo like `alphag` must not silently train a baseline
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("[train]", "[gravity]\nalphag = 100.0\n\n[train]");
    let bad = dir.path().join("bad2.toml");
    std::fs::write(&bad, &text).unwrap();
    let err = load_config(&bad, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_descriptor_path_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_tiny_config(dir.path(), "run.toml", 1, 2, "");
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("tiny.net", "nonexistent.net");
    std::fs::write(&path, text).unwrap();
    let err = load_config(&path, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nonexistent.net"));
}

#[test]
fn invalid_rates_and_alpha_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_tiny_config(
        dir.path(),
        "run.toml",
        1,
        2,
        "[pruning]\nrates = [0.5, 1.0]\n",
    );
    assert!(load_config(&path, &Overrides::default()).is_err());

    let path = common::write_tiny_config(
        dir.path(),
        "run2.toml",
        1,
        2,
        "[gravity]\nalpha_g = -3.0\n",
    );
    assert!(load_config(&path, &Overrides::default()).is_err());

    // sweep grid must include the unpruned point
    let path = common::write_tiny_config(
        dir.path(),
        "run3.toml",
        1,
        2,
        "[sweep]\nalpha_g = [0.0]\nrates = [0.1, 0.2]\n",
    );
    assert!(load_config(&path, &Overrides::default()).is_err());
}

#[test]
fn overrides_replace_config_values_and_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_tiny_config(
        dir.path(),
        "run.toml",
        1,
        2,
        "[gravity]\nalpha_g = 10.0\n",
    );
    let plain = load_config(&path, &Overrides::default()).unwrap();
    assert_eq!(plain.config.seed, 1);
    assert_eq!(plain.config.gravity.as_ref().unwrap().alpha_g, 10.0);

    let over = load_config(
        &path,
        &Overrides {
            seed: Some(99),
            alpha_g: Some(1e4),
            prune_rate: Some(0.25),
        },
    )
    .unwrap();
    assert_eq!(over.config.seed, 99);
    assert_eq!(over.config.gravity.as_ref().unwrap().alpha_g, 1e4);
    assert_eq!(over.config.pruning.rates, vec![0.25]);
    assert_ne!(plain.hash64, over.hash64);
}

#[test]
fn explicit_prune_layer_names_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_tiny_config(
        dir.path(),
        "run.toml",
        1,
        2,
        "[gravity]\nalpha_g = 10.0\nprune_layers = [\"c2\", \"nope\"]\n",
    );
    let loaded = load_config(&path, &Overrides::default()).unwrap();
    let model = gprune_core::build_model(common::TINY_NET, 1).unwrap();
    let err =
        gprune_cli::config::gravity_config(loaded.config.gravity.as_ref().unwrap(), &model)
            .unwrap_err();
    assert!(err.to_string().contains("nope"));

    let path = common::write_tiny_config(
        dir.path(),
        "run2.toml",
        1,
        2,
        "[gravity]\nalpha_g = 10.0\nprune_layers = [\"c2\", \"c3\"]\n",
    );
    let loaded = load_config(&path, &Overrides::default()).unwrap();
    let cfg =
        gprune_cli::config::gravity_config(loaded.config.gravity.as_ref().unwrap(), &model)
            .unwrap();
    assert_eq!(cfg.prune_layers.len(), 2);
}
