#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpsc_core::dataset::write_csv;
use gpsc_core::synthetic::{simulate_panel, SyntheticConfig};

/// Writes a simulated panel as `panel.csv` and returns the TOML `[data]`
/// section that reads it.
pub fn panel(dir: &Path, config: &SyntheticConfig) -> String {
    let p = simulate_panel(config).unwrap();
    write_csv(&p.dataset, &dir.join("panel.csv")).unwrap();
    let covs: Vec<String> = p.dataset.covariate_names.iter().map(|c| format!("\"{c}\"")).collect();
    format!(
        "[data]\npath = \"panel.csv\"\ntreated = \"treated\"\nintervention = \"{}\"\ncovariates = [{}]\n",
        p.dataset.intervention_time(),
        covs.join(", ")
    )
}

/// Small settings that keep a full run to a few seconds.
pub const FAST: &str = r#"
[screening]
top_n = 3
choose = 2
es_samples = 100

[models]
specs = [{ name = "2FGP", variant = "2FGP" }, { name = "INGP", variant = "INGP" }]
noise_floor = 0.01

[optimizer]
restarts = 1
max_iter = 40

[hmc]
n_samples = 40
n_leapfrog = 5
step_size = 0.02
paths_per_draw = 5
"#;

pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

pub fn gpsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpsc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn stage(name: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![name, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    gpsc(&args)
}

pub fn assert_ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

/// Data rows of a CSV file (header excluded, `#` comment lines skipped).
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(body.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}
