use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 0
total_env_steps = 4000
eval_interval = 2000
eval_episodes = 3

[agent]
n_actors = 4
rollout_len = 5
"#;

fn imoc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imoc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("IMOC_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_is_reproducible_and_feeds_eval_and_viz() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    for cwd in ["a", "b"] {
        fs::create_dir(tmp.path().join(cwd)).unwrap();
        let o = imoc(&["train", "--config", &config, "--out", "run"], &tmp.path().join(cwd));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["log.csv", "checkpoint.json", "config.toml"] {
        let read = |cwd: &str| fs::read(tmp.path().join(cwd).join("run").join(file)).unwrap();
        assert_eq!(read("a"), read("b"), "{file}");
    }

    let o = imoc(&["eval", "--checkpoint", "a/run/checkpoint.json", "--episodes", "4"], tmp.path());
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["returns"].as_array().unwrap().len(), 4);

    let o = imoc(&["viz", "--checkpoint", "a/run/checkpoint.json", "--out", "viz.json", "--episodes", "3"], tmp.path());
    assert!(o.status.success());
    let viz: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("viz.json")).unwrap()).unwrap();
    assert_eq!(viz["options"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_and_overrides_reach_the_saved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let o = imoc(
        &["train", "--config", &config, "--seed", "9", "--override", "agent.c_mu=0.25", "--out", "run"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = fs::read_to_string(tmp.path().join("run/config.toml")).unwrap();
    assert!(saved.contains("seed = 9"));
    assert!(saved.contains("c_mu = 0.25"));
}

#[test]
fn ablate_with_no_variants_trains_the_base_only() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &format!("output_dir = \"abl\"\n{CONFIG}"));
    let o = imoc(&["ablate", "--config", &config, "--seeds", "0"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn bad_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "total_env_steps = 0\n[agent]\ngamma = 2.0\n");
    let o = imoc(&["train", "--config", &config], tmp.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["seed", "total_env_steps", "gamma"] {
        assert!(err.contains(needle), "{needle} missing from: {err}");
    }
    let o = imoc(&["ablate", "--config", &config, "--variants", "nonsense"], tmp.path());
    assert!(!o.status.success());
}
