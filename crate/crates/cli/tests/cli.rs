use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn weightgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weightgen"))
        .args(args)
        .env_remove("WEIGHTGEN_SEED")
        .env_remove("WEIGHTGEN_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn layout_of_reference_cnn() {
    let s = ok(&weightgen(&["layout"]));
    assert!(s.contains("params=2464") && s.contains("tokens=48"), "{s}");
    let j: serde_json::Value = serde_json::from_str(&ok(&weightgen(&["layout", "--json", "--d-t", "64"]))).unwrap();
    assert_eq!(j["layers"].as_array().unwrap().len(), 5);
}

#[test]
fn empty_pipeline_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    let out = tmp.path().join("out");
    fs::write(&cfg, format!(r#"{{"out_dir": "{}", "stages": []}}"#, p(&out))).unwrap();
    ok(&weightgen(&["pipeline", "--config", p(&cfg)]));
    assert!(!out.exists());
}

#[test]
fn schema_errors_fail_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    let out = tmp.path().join("out");
    fs::write(
        &cfg,
        format!(
            r#"{{"out_dir": "{}", "stages": [
            {{"stage": "zoogen", "name": "z", "population": {{"zoo_id": "z", "arch": "small_cnn",
              "dataset_tag": "synth-mnist", "n_models": 1, "epochs": 1, "seed_base": 0}}}},
            {{"stage": "train", "name": "t", "zoos": ["z"], "sane": {{"n_heads": 3}}}}]}}"#,
            p(&out)
        ),
    )
    .unwrap();
    let r = weightgen(&["pipeline", "--config", p(&cfg)]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("stages[1]"), "{err}");
    assert!(!out.exists());
}

#[test]
fn shipped_config_validates() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_pipeline.json");
    let s = ok(&weightgen(&["pipeline", "--config", p(&cfg), "--check"]));
    assert!(s.contains("6 stages ok"));
}

#[test]
fn subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"zoo_id": "cli", "arch": "small_cnn", "dataset_tag": "synth-mnist",
            "n_models": 3, "epochs": 1, "seed_base": 0}"#,
    )
    .unwrap();
    let small = ["--n-train", "96", "--n-val", "32", "--n-test", "64"];
    let zoo = tmp.path().join("zoo");
    let mut args = vec!["zoogen", "--spec", p(&spec), "--out", p(&zoo)];
    args.extend(small);
    assert!(ok(&weightgen(&args)).contains("3 models"));

    let soup = tmp.path().join("soup.json");
    let mut args = vec!["soup", "--zoo", p(&zoo), "--ks", "1,2", "--repeats", "2", "--align", "--report", p(&soup)];
    args.extend(small);
    ok(&weightgen(&args));
    let curve: serde_json::Value = serde_json::from_str(&fs::read_to_string(&soup).unwrap()).unwrap();
    assert_eq!(curve["points"].as_array().unwrap().len(), 2);

    let aligned = tmp.path().join("aligned");
    let s = ok(&weightgen(&[
        "rebasin", "--zoo", p(&zoo), "--reference", "cli-m0000-e001", "--target", "cli-m0001-e001", "--out", p(&aligned),
    ]));
    assert!(s.contains("sweep 0"));

    let report = tmp.path().join("r.json");
    let mut args = vec!["eval", "--models", p(&aligned), "--report", p(&report)];
    args.extend(small);
    let table = ok(&weightgen(&args));
    assert!(table.starts_with("synth-mnist (ID) | synth-svhn (ID)"), "{table}");
    let text = ok(&weightgen(&["report", "--input", p(&report)]));
    assert_eq!(text, table);
}
