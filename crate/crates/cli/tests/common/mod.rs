#![allow(dead_code)]

use std::path::Path;

use brainlang_cli::config::RunConfig;

/// A few-second configuration exercising every stage.
pub const TINY_TOML: &str = r#"
seed = 11

[world]
n_vertices = 96
n_regions = 4
n_trials = 240
shared_fraction = 0.25
test_count = 24

[decoder]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_seq_len = 64

[tokenizer]
hidden = 8

[lm]
epochs = 1

[phase1]
epochs = 2

[phase2]
epochs = 1

[lora]
rank = 2
alpha = 2.0

[microstim]
fractions = [0.05, 0.1]
grid = [-1.0, 0.0, 1.0]
per_group = 3
evidence_max_steps = 6
"#;

pub fn tiny_config(out: &Path) -> RunConfig {
    RunConfig::with_overrides(TINY_TOML, &[format!("out_dir={:?}", out.display().to_string())]).unwrap()
}

pub fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_TOML).unwrap();
    p
}
