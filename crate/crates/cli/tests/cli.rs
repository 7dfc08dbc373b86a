use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_visitembed");

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn visitembed(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn smoke(args: &[&str], out: &Path) -> Output {
    let config = smoke_config();
    let mut all = vec![
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ];
    all.extend_from_slice(args);
    visitembed(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ARTIFACTS: [&str; 10] = [
    "dataset.jsonl",
    "splits.csv",
    "preprocessing.json",
    "model.ckpt",
    "history.csv",
    "embeddings.csv",
    "metrics.csv",
    "metrics_table.txt",
    "probe.csv",
    "probe_baseline.json",
];

const STAGES: [&str; 7] = [
    "generate",
    "split",
    "featurize",
    "train",
    "embed",
    "eval",
    "probe",
];

#[test]
fn help_lists_every_flag() {
    let global = ["--config", "--seed", "--out", "--threads"];
    let specific: [(&str, &[&str]); 8] = [
        ("generate", &[]),
        ("split", &[]),
        ("featurize", &["--k-features", "--max-len"]),
        ("train", &["--epochs", "--lr", "--batch-size"]),
        ("embed", &[]),
        ("eval", &[]),
        ("probe", &["--min-group-size"]),
        (
            "pipeline",
            &[
                "--k-features",
                "--max-len",
                "--epochs",
                "--lr",
                "--batch-size",
                "--min-group-size",
            ],
        ),
    ];
    for (cmd, flags) in specific {
        let o = visitembed(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help");
        let text = String::from_utf8_lossy(&o.stdout);
        for flag in global.iter().chain(flags.iter()) {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}:\n{text}");
        }
    }
    assert!(visitembed(&["--help"]).status.success());
}

#[test]
fn missing_upstream_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("dataset.jsonl") && stderr(&o).contains("visitembed generate"),
        "{}",
        stderr(&o)
    );

    assert!(smoke(&["generate"], dir.path()).status.success());
    assert!(smoke(&["split"], dir.path()).status.success());
    let o = smoke(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("visitembed featurize"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn invalid_config_exits_1_and_io_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nlearning_rate = 0.5\n").unwrap();
    let o = visitembed(&[
        "generate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));

    let o = visitembed(&[
        "generate",
        "--config",
        dir.path().join("absent.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let file = dir.path().join("not-a-dir");
    std::fs::write(&file, "x").unwrap();
    let o = smoke(&["generate"], &file);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupted_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke(&["generate"], dir.path()).status.success());
    let path = dir.path().join("dataset.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"not\": \"a stay\"}\n");
    std::fs::write(&path, text).unwrap();
    let o = smoke(&["split"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn checkpoint_must_match_preprocessing() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke(&["pipeline"], dir.path()).status.success());
    assert!(smoke(&["featurize", "--k-features", "20"], dir.path())
        .status
        .success());
    let o = smoke(&["embed"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("visitembed train"), "{}", stderr(&o));
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn pipeline_writes_everything_with_a_hash_chain() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke(&["pipeline"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for a in ARTIFACTS {
        assert!(dir.path().join(a).is_file(), "{a} missing");
    }

    // Every output is recorded with its current hash, and every input of a
    // stage is an output of an earlier stage with the same hash.
    let mut produced: BTreeMap<String, String> = BTreeMap::new();
    for stage in STAGES {
        let m: Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(format!("{stage}.manifest.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(m["seed"], 7);
        assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
        assert_eq!(m["config"]["n_patients"], 300);
        for input in m["inputs"].as_array().unwrap() {
            let name = input["path"].as_str().unwrap();
            assert_eq!(
                produced.get(name).map(String::as_str),
                input["sha256"].as_str(),
                "{stage} input {name}"
            );
        }
        if stage != "generate" {
            let names: Vec<&str> = m["inputs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|i| i["path"].as_str().unwrap())
                .collect();
            assert!(
                names.contains(&"dataset.jsonl"),
                "{stage} does not chain to the dataset"
            );
        }
        for output in m["outputs"].as_array().unwrap() {
            let name = output["path"].as_str().unwrap();
            assert_eq!(
                output["sha256"].as_str().unwrap(),
                sha(&dir.path().join(name))
            );
            produced.insert(
                name.to_string(),
                output["sha256"].as_str().unwrap().to_string(),
            );
        }
    }

    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,label,precision,recall,f1,presence\n"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 20);
    let probe = std::fs::read_to_string(dir.path().join("probe.csv")).unwrap();
    assert!(
        probe.starts_with("entity_a,entity_b,cosine,n_a_state0,n_a_state1,n_b_state0,n_b_state1\n")
    );
    let emb = std::fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
    assert_eq!(
        emb.lines().next().unwrap().split(',').count(),
        1 + 32 + 3 * 8
    );
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(smoke(&["pipeline"], a.path()).status.success());
    assert!(smoke(&["pipeline"], b.path()).status.success());
    for name in ARTIFACTS {
        assert_eq!(
            sha(&a.path().join(name)),
            sha(&b.path().join(name)),
            "{name} differs"
        );
    }
    let c = tempfile::tempdir().unwrap();
    assert!(smoke(&["pipeline", "--seed", "8"], c.path())
        .status
        .success());
    assert_ne!(
        sha(&a.path().join("dataset.jsonl")),
        sha(&c.path().join("dataset.jsonl"))
    );
}
