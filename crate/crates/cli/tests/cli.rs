use std::path::Path;
use std::process::{Command, Output};

fn avit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avit")).env("AVIT_OUT", dir).args(args).output().unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn config_errors_exit_2_and_missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = avit(dir.path(), &["--miniature", "--set", "bridge.d_s=3", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let o = avit(dir.path(), &["--miniature", "--set", "bogus=1", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"corpus": {"n_records": 0}}"#).unwrap();
    assert_eq!(avit(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]).status.code(), Some(2));
    assert_eq!(avit(dir.path(), &["synth", "--clip", "s0"]).status.code(), Some(3));
    assert_eq!(avit(dir.path(), &["eval"]).status.code(), Some(3));
}

#[test]
fn miniature_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(avit(d, &["--miniature", "--master-seed", "4", "gen-data"]));
    for s in ["train-prior", "train-align", "train-lm", "train-bridge"] {
        ok(avit(d, &[s]));
    }
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 4);

    let corpus = std::fs::read_to_string(d.join("corpus.jsonl")).unwrap();
    let clip = corpus
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .find(|v| v["split"] == "test")
        .and_then(|v| v["id"].as_str().map(str::to_string))
        .expect("a test clip");

    let first = ok(avit(d, &["synth", "--clip", &clip, "--seed", "7"]));
    let path = first.lines().nth(1).unwrap().to_string();
    let bytes = std::fs::read(&path).unwrap();
    ok(avit(d, &["synth", "--clip", &clip, "--seed", "7"]));
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let text = "The speaker sounds angry; brows are furrowed strongly.";
    let out = ok(avit(d, &["synth", "--clip", &clip, "--seed", "1", "--instruction", text, "--n", "2"]));
    assert_eq!(out.lines().next().unwrap(), text);
    assert_eq!(out.lines().count(), 3);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    let listed = manifest["artifacts"].as_object().unwrap();
    for name in ["corpus.jsonl", "vocab.json", "template.avit", "motion_prior.avit", "avi_align.avit", "avi_lm.avit", "bridge.avit"] {
        assert!(listed.contains_key(name), "{name}");
    }
    assert!(listed.keys().any(|k| k.starts_with("synth/")));

    let obj = ok(avit(d, &["export-obj", "--animation", &path, "--frame", "2"]));
    let mesh = std::fs::read_to_string(obj.trim()).unwrap();
    assert!(mesh.lines().any(|l| l.starts_with("f ")));
    assert_eq!(avit(d, &["export-obj", "--animation", &path, "--frame", "100000"]).status.code(), Some(2));

    let eval = ok(avit(d, &["eval"]));
    assert!(eval.contains("bleu_1"));

    let ablate = ok(avit(d, &["ablate"]));
    for v in ["full", "no_diffusion", "no_cont_align", "no_aug"] {
        assert!(d.join(format!("reports/ablation_{v}.json")).exists(), "{v}");
    }
    assert_eq!(ablate.lines().filter(|l| l.contains("\"variant\"")).count(), 4);
}
