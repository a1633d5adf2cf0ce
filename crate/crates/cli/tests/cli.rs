use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5
[train]
t_h = 6
t_p = 3
hidden = 8
embed = 4
vision_layers = 2
vision_hidden = 4
epochs = 1
[attribute]
m_steps = 8
windows = 2
"#;

fn vnnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vnnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("VNNET_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_twice_gives_identical_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let o = vnnet(tmp.path(), &["synth", "--seed", "7", "--out", d]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert!(a.iter().any(|(name, _)| name.starts_with("tiles")));
    assert_eq!(a, b);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "synth");
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vnnet(tmp.path(), &["eval", "--dataset", "synthetic-micro"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(vnnet(tmp.path(), &["forecast"]).status.code(), Some(2));
    assert_eq!(vnnet(tmp.path(), &["train", "--region", "NW"]).status.code(), Some(2));
    assert_eq!(vnnet(tmp.path(), &["train", "--factor", "pressure"]).status.code(), Some(2));
    assert_eq!(vnnet(tmp.path(), &[]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_an_input_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vnnet(tmp.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("VNNET_DATA_ROOT"));
    let o = vnnet(tmp.path(), &["train", "--dataset", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_emits_five_labelled_rows() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let o = vnnet(tmp.path(), &["ablate", "--config", "small.toml", "--dataset", "synthetic-micro", "--out", "ab"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("ab/comparison.csv")).unwrap();
    let labels: Vec<String> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        labels,
        ["N-GCN*,-,-", "N-GCN,-,-", "N-GCN,ConvLSTM,Single", "N-GCN,V-LSTM,Single", "N-GCN,V-LSTM,Double"]
    );
    assert!(tmp.path().join("ab/manifest.json").is_file());
}

#[test]
fn train_eval_attribute_and_rerun_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    assert!(vnnet(dir, &["synth", "--seed", "2", "--out", "data"]).status.success());
    let o = vnnet(dir, &["train", "--config", "small.toml", "--dataset", "data", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.json", "metrics.csv", "evaluation.json", "config.toml", "manifest.json"] {
        assert!(dir.join("run").join(f).is_file(), "{f} missing");
    }

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("run/manifest.json")).unwrap()).unwrap();
    let mut rerun: Vec<&str> = manifest["rerun"].as_array().unwrap().iter().skip(1).map(|v| v.as_str().unwrap()).collect();
    assert_eq!(rerun[rerun.len() - 2], "--out");
    *rerun.last_mut().unwrap() = "again";
    let o = vnnet(dir, &rerun);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.json", "metrics.csv"] {
        assert_eq!(fs::read(dir.join("run").join(f)).unwrap(), fs::read(dir.join("again").join(f)).unwrap(), "{f}");
    }

    let o = vnnet(dir, &["eval", "--checkpoint", "run/checkpoint.json", "--dataset", "data", "--out", "ev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("ev/evaluation.json")).unwrap()).unwrap();
    assert!(report["mae"].as_f64().unwrap() > 0.0);

    let o = vnnet(
        dir,
        &["attribute", "--config", "small.toml", "--checkpoint", "run/checkpoint.json", "--dataset", "data", "--out", "at"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let attr: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("at/attribution.json")).unwrap()).unwrap();
    let total: f64 = attr["report"]["totals"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() < 1e-6);
    let csv = fs::read_to_string(dir.join("at/attribution.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn ingest_writes_processed_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(vnnet(dir, &["synth", "--seed", "4", "--out", "data"]).status.success());
    fs::remove_file(dir.join("data/numerical.npy")).unwrap();
    let o = vnnet(dir, &["ingest", "--dataset", "data", "--out", "ig"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(dir.join("data/vision")).unwrap().count(), 500);
    assert!(dir.join("data/numerical.npy").is_file());
    assert!(dir.join("ig/manifest.json").is_file());
}
