//! Shared fixtures for the harness tests: a tiny synthetic setup that trains
//! in well under a second.
#![allow(dead_code)] // not every test binary uses every helper

use std::path::{Path, PathBuf};

pub const TINY_NET: &str = "
input 2 8 8
conv c1 filters=6 kernel=3 pad=1 bias=false
relu r1
maxpool p1 kernel=2
conv c2 filters=8 kernel=3 pad=1 bias=false
relu r2
conv c3 filters=10 kernel=3 pad=1 bias=false
relu r3
avgpool gap kernel=global
flatten flat
linear fc out=3
";

/// Write a descriptor + config into `dir` and return the config path.
/// `extra` is appended verbatim (gravity/finetune/sweep sections).
pub fn write_tiny_config(dir: &Path, name: &str, seed: u64, epochs: usize, extra: &str) -> PathBuf {
    let net = dir.join("tiny.net");
    if !net.exists() {
        std::fs::write(&net, TINY_NET).unwrap();
    }
    let config = format!(
        r#"
seed = {seed}

[dataset]
kind = "synthetic"
classes = 3
train_samples = 300
test_samples = 90
image_size = 8
channels = 2
noise = 0.8

[model]
descriptor = "tiny.net"

[train]
epochs = {epochs}
batch_size = 32
lr = 0.05

{extra}
"#
    );
    let path = dir.join(name);
    std::fs::write(&path, config).unwrap();
    path
}

pub fn load(path: &Path) -> gprune_cli::LoadedConfig {
    gprune_cli::load_config(path, &gprune_cli::Overrides::default()).unwrap()
}
