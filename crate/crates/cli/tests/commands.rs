use std::path::Path;
use std::process::{Command, Output};

fn scarseg(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scarseg"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn error_category(out: &Output) -> String {
    assert!(!out.status.success());
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(line["message"].is_string());
    line["error"].as_str().unwrap().to_string()
}

const SMALL: &str = r#"
schema_version = 1
seed = 5
run_dir = "run"

[synth]
out_dir = "scenes"
scenes = 3
holdout_scenes = 1
size = 96

[prepare]
patch_size = 32

[split]
block_size = 80.0

[model]
architecture = "UNET_RN34"
width_scale = 0.1

[train]
epochs = 1
"#;

fn write(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_config_and_inputs_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = scarseg(&dir.path().join("absent.toml"), &["prepare"]);
    assert_eq!(error_category(&out), "MISSING_INPUT");

    // stages fail on their first missing input before doing any work
    let config = write(dir.path(), SMALL);
    for stage in ["prepare", "split", "train", "predict", "evaluate"] {
        assert_eq!(error_category(&scarseg(&config, &[stage])), "MISSING_INPUT", "{stage}");
    }
    assert!(!dir.path().join("run/prepared").exists());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), &SMALL.replace("epochs = 1", "epochs = 1\nepoch = 2"));
    assert_eq!(error_category(&scarseg(&config, &["synth"])), "BAD_CONFIG");
    let config = write(
        dir.path(),
        &SMALL.replace("[split]", "[split]\nfractions = [0.5, 0.2, 0.1]"),
    );
    assert_eq!(error_category(&scarseg(&config, &["split"])), "BAD_FRACTIONS");
}

#[test]
fn early_stages_are_reproducible_byte_for_byte() {
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let config = write(dir.path(), SMALL);
        for stage in ["synth", "prepare", "split"] {
            let out = scarseg(&config, &[stage, "--seed", seed]);
            assert!(
                out.status.success(),
                "{stage}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["stages"]["split"]["seed"], seed.parse::<u64>().unwrap());
        let mut files = tree(&dir.path().join("scenes"));
        // the manifest lists absolute output paths, which differ per directory
        files.extend(
            tree(&dir.path().join("run"))
                .into_iter()
                .filter(|(p, _)| p != "manifest.json"),
        );
        files
    };
    let a = run("9");
    assert!(a.iter().any(|(p, _)| p == "split.json"));
    assert!(a.iter().any(|(p, _)| p.ends_with("index.json")));
    assert_eq!(a, run("9"));
    assert_ne!(a, run("10"));
}
