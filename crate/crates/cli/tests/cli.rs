use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn typogen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_typogen"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Deterministic pseudo-random stream for test data.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn write_data(dir: &Path) {
    let mut rng = Lcg(3);
    let mut csv = String::from("respondent_id,q1,q2,q3,x\n");
    for i in 0..300 {
        let x = rng.next() * 4.0 - 2.0;
        let q1 = rng.next() < 1.0 / (1.0 + (-1.5 * x).exp());
        let q2 = rng.next() < 0.5;
        let q3 = rng.next() < 0.4;
        let yn = |b: bool| if b { "Y" } else { "N" };
        csv.push_str(&format!("r{i:03},{},{},{},{:.3}\n", yn(q1), yn(q2), yn(q3), x));
    }
    fs::write(dir.join("data.csv"), csv).unwrap();
    fs::write(
        dir.join("config.toml"),
        r#"seed = 11
output_dir = "out"

[dataset]
path = "data.csv"
questions = [
  { id = "q1", kind = "binary", role = "typology" },
  { id = "q2", kind = "binary", role = "typology" },
  { id = "q3", kind = "binary", role = "typology" },
  { id = "x", kind = "numeric", role = "demographic" },
]

[patterns]
pool_size = 6

[trees]
min_leaf_grow = 25
min_leaf_filter = 25
max_leaf_filter = 200

[[predictors.demographics]]
kind = "numeric"
column = "x"
"#,
    )
    .unwrap();
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "timings.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_reports_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let out = typogen(&["--config", "config.toml", "validate"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["valid"], true);
    assert_eq!(v["n"], 300);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn run_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    for d in ["a", "b"] {
        let out = typogen(&["--config", "config.toml", "--out-dir", d, "run"], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["dataset"]["n"], 300);
    }
    let a = snapshot(&dir.path().join("a"));
    assert!(a.contains_key("manifest.json") && a.contains_key("comparison.json"));
    assert_eq!(a, snapshot(&dir.path().join("b")));
}

#[test]
fn single_stage_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    for (cmd, file) in [
        ("patterns", "pattern_typology.json"),
        ("curvefit", "curve_fit.json"),
        ("trees", "selected_tree.json"),
        ("score", "predictors.csv"),
        ("fit", "model_curve.json"),
    ] {
        let out_dir = format!("o_{cmd}");
        let out = typogen(&["--config", "config.toml", "--out-dir", &out_dir, cmd], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(&out_dir).join(file).exists(), "{cmd} did not write {file}");
        assert!(dir.path().join(&out_dir).join("manifest.json").exists());
    }
}

#[test]
fn tree_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let out = typogen(
        &["--config", "config.toml", "--out-dir", "t", "trees", "--exclude-question", "q1", "--min-leaf-filter", "30"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trees = json(&dir.path().join("t/trees.json"));
    let text = trees.to_string();
    assert!(!text.contains("\"question\":\"q1\""));
    for t in trees["trees"].as_array().unwrap() {
        assert!(t["leaf_counts"].as_array().unwrap().iter().all(|c| c.as_u64().unwrap() >= 30));
    }
}

#[test]
fn seed_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let out = typogen(&["--config", "config.toml", "--seed", "99", "--out-dir", "s", "patterns"], dir.path());
    assert!(out.status.success());
    assert_eq!(json(&dir.path().join("s/manifest.json"))["seed"], 99);
}

#[test]
fn missing_dataset_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    fs::remove_file(dir.path().join("data.csv")).unwrap();
    let out = typogen(&["--config", "config.toml", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = json(&dir.path().join("out/error.json"));
    assert_eq!(err["stage"], "dataset");
    assert_eq!(err["exit_code"], 2);
    assert!(!dir.path().join("out/manifest.json").exists());
}

#[test]
fn bad_config_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let text = fs::read_to_string(dir.path().join("config.toml")).unwrap().replace("pool_size", "pool");
    fs::write(dir.path().join("config.toml"), text).unwrap();
    assert_eq!(typogen(&["--config", "config.toml", "run"], dir.path()).status.code(), Some(1));
    assert_eq!(typogen(&["--config", "config.toml", "validate"], dir.path()).status.code(), Some(1));
    assert_eq!(typogen(&["run"], dir.path()).status.code(), Some(1));
}

#[test]
fn synth_fixture_writes_data_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"
questions = ["a", "b"]
head = [{ pattern = "NN", count = 30 }, { pattern = "YN", count = 20 }, { pattern = "YY", count = 10 }]
"#;
    fs::write(dir.path().join("spec.toml"), spec).unwrap();
    let run = |out: &str| {
        typogen(
            &["--seed", "5", "synth-fixture", "--spec", "spec.toml", "--output", out, "--schema", "schema.toml"],
            dir.path(),
        )
    };
    let out = run("one.csv");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run("two.csv").status.success());
    let one = fs::read_to_string(dir.path().join("one.csv")).unwrap();
    assert_eq!(one, fs::read_to_string(dir.path().join("two.csv")).unwrap());
    assert_eq!(one.lines().count(), 61);
    assert_eq!(one.lines().filter(|l| l.ends_with(",Y,Y")).count(), 10);
    let schema = fs::read_to_string(dir.path().join("schema.toml")).unwrap();
    assert!(schema.contains("[[questions]]") && schema.contains("typology"));
}

#[test]
fn bundled_fixture_has_the_reference_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = typogen(&["synth-fixture", "--output", "survey.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"], 514);
}
