#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn dul(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dul"))
        .args(args)
        .output()
        .expect("dul runs")
}

/// Runs a command with `--config` and returns its exit code.
pub fn run(cmd: &str, config: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = dul(&args);
    if !out.status.success() {
        eprintln!("dul {cmd} stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Paths inside TOML strings.
pub fn p(path: &Path) -> String {
    path.display().to_string()
}

pub fn gen_config(
    out: &Path,
    classes: usize,
    per_class: usize,
    noise: f64,
    spread: f64,
    corrupt: Option<f64>,
) -> String {
    let mut s = format!(
        "seed = 1\nout = \"{}\"\n[gen]\nformat = \"binary\"\n[gen.identities]\nnum_classes = {classes}\nper_class = {per_class}\ninput_dim = 8\ncenter_spread = {spread:?}\nbase_noise = {noise:?}\n",
        p(out)
    );
    if let Some(f) = corrupt {
        s.push_str(&format!("[[gen.corruptions]]\nfraction = {f:?}\nscale = 2.0\n"));
    }
    s
}

pub fn train_config(out: &Path, data: &Path, mode: &str, steps: usize, extra: &str) -> String {
    format!(
        "seed = 1\nout = \"{}\"\n[model]\nhidden = 16\nembed_dim = 4\nmu_norm = 2.0\n[optim]\nsteps = {steps}\n{extra}\n[train]\nmode = \"{mode}\"\ndataset = \"{}\"\n",
        p(out),
        p(data)
    )
}

/// Every file in `dir` with its bytes, sorted by name.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}
