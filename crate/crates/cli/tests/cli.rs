use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use covfilt::backend::Plain;
use covfilt::linalg::Matrix;
use covfilt::model::ModelParams;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
[data]
train_tracks = 40
test_tracks = 12
[data.tracks]
duration = 20
[model]
hidden = [16, 16]
[training.mean]
epochs = 3
[training.covariance]
epochs = 3
[training.kalman]
epochs = 1
[epistemic]
samples = 4
"#;

fn covfilt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covfilt"))
        .args(args)
        .current_dir(dir)
        .env_remove("COVFILT_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = covfilt(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Asserts a failure and returns the parsed error line.
fn fails(args: &[&str], dir: &Path) -> serde_json::Value {
    let out = covfilt(args, dir);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).expect("error line is JSON");
    assert!(v["error"].is_string() && v["message"].is_string());
    v
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn full_run(tmp: &Path, cfg: &str, out: &str) {
    for cmd in ["generate", "train", "evaluate"] {
        ok(&[cmd, "--config", cfg, "--out", out], tmp);
    }
}

#[test]
fn generate_is_deterministic_and_records_config() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), "c.toml", SMALL);
    ok(&["generate", "--config", "c.toml", "--out", "a"], tmp.path());
    ok(&["generate", "--config", "c.toml", "--out", "nested/deeper/b"], tmp.path());
    let (ma, mb) = (manifest(&tmp.path().join("a/data")), manifest(&tmp.path().join("nested/deeper/b/data")));
    assert_eq!(ma["files"], mb["files"]);
    assert_eq!(ma["files"].as_object().unwrap().len(), 3);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seed"], 3);
    let config = ma["config"].as_str().unwrap();
    assert!(config.contains("speed_range = [10.0, 200.0]"), "{config}");

    ok(&["generate", "--config", "c.toml", "--out", "c", "--seed", "4"], tmp.path());
    let mc = manifest(&tmp.path().join("c/data"));
    assert_eq!(mc["seed"], 4);
    assert_ne!(mc["files"]["train.csv"], ma["files"]["train.csv"]);
    assert_ne!(mc["config_hash"], ma["config_hash"]);
}

#[test]
fn uncreatable_output_is_a_clear_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("blocker"), "").unwrap();
    let e = fails(&["generate", "--out", "blocker/x"], tmp.path());
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("blocker"));
}

#[test]
fn training_is_bit_reproducible_with_correct_head_arity() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), "c.toml", SMALL);
    ok(&["generate", "--config", "c.toml", "--out", "o"], tmp.path());
    ok(&["train", "--config", "c.toml", "--out", "o"], tmp.path());
    let first = manifest(&tmp.path().join("o/models"));
    let loss = fs::read(tmp.path().join("o/models/reports/mle-covariance_loss.csv")).unwrap();
    ok(&["train", "--config", "c.toml", "--out", "o", "--threads", "1"], tmp.path());
    assert_eq!(manifest(&tmp.path().join("o/models"))["files"], first["files"]);
    assert_eq!(fs::read(tmp.path().join("o/models/reports/mle-covariance_loss.csv")).unwrap(), loss);

    let model = ModelParams::load(tmp.path().join("o/models/mle-covariance.json")).unwrap();
    assert_eq!(model.config.corr_dim(), 3);
    let x = Matrix::from_element(2, model.config.input_dim, 0.1);
    let head = model.forward(&mut Plain, &model.lift_plain(), &x, None).unwrap();
    assert_eq!(head.r.ncols(), 3);
    assert_eq!(head.s.ncols(), 3);
    let diag = ModelParams::load(tmp.path().join("o/models/mle-variance.json")).unwrap();
    let p = diag.predict(&x).unwrap();
    assert_eq!(p[0].covariance[(0, 1)], 0.0);
}

#[test]
fn subset_violation_reports_the_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let cfg = "methods = [\"kalman-covariance\"]\n[training.kalman]\nsubset = [3, 4, 5]\n";
    write_config(tmp.path(), "c.toml", cfg);
    let e = fails(&["train", "--config", "c.toml", "--out", "o"], tmp.path());
    assert_eq!(e["error"], "subset-condition");
    assert!(e["message"].as_str().unwrap().contains("rows [0, 1, 2]"));
}

#[test]
fn missing_inputs_fail() {
    let tmp = TempDir::new().unwrap();
    let e = fails(&["evaluate", "--out", "o"], tmp.path());
    assert_eq!(e["error"], "missing-input");
    let e = fails(&["train", "--out", "o"], tmp.path());
    assert_eq!(e["error"], "missing-input");

    write_config(tmp.path(), "c.toml", SMALL);
    full_run(tmp.path(), "c.toml", "o");
    fs::remove_file(tmp.path().join("o/models/kalman-covariance.json")).unwrap();
    let e = fails(&["evaluate", "--config", "c.toml", "--out", "o"], tmp.path());
    assert!(e["message"].as_str().unwrap().contains("kalman-covariance"));
}

#[test]
fn invalid_configs_fail_on_one_line() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), "typo.toml", "seed = 1\n[model]\nhiden = [4]\n");
    let e = fails(&["generate", "--config", "typo.toml"], tmp.path());
    assert_eq!(e["error"], "parse");
    assert!(e["message"].as_str().unwrap().contains("line 3"));

    write_config(tmp.path(), "empty.toml", "methods = []\n");
    assert_eq!(fails(&["generate", "--config", "empty.toml"], tmp.path())["error"], "invalid-argument");

    write_config(tmp.path(), "path.toml", "[paths]\ndata = \"does/not/exist\"\n");
    assert_eq!(fails(&["generate", "--config", "path.toml"], tmp.path())["error"], "invalid-argument");

    assert_eq!(fails(&["generate", "--config", "absent.toml"], tmp.path())["error"], "config");
    assert_eq!(fails(&["generate", "--seed", "x"], tmp.path())["error"], "usage");
    assert_eq!(fails(&["generate", "--threads", "0"], tmp.path())["error"], "usage");

    let out = Command::new(env!("CARGO_BIN_EXE_covfilt"))
        .args(["generate"])
        .current_dir(tmp.path())
        .env("COVFILT_LOG", "verbose")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn evaluation_tables_are_self_relative_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), "c.toml", SMALL);
    full_run(tmp.path(), "c.toml", "o");
    let eval = tmp.path().join("o/eval");
    for split in ["in_domain", "ood"] {
        let rows = read_csv(&eval.join(format!("metrics_{split}.csv")));
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0][0], "fixed");
        assert_eq!(&rows[0][3..], &["1", "1", "1", "1"]);
        let curves = read_csv(&eval.join(format!("curves_{split}.csv")));
        assert_eq!(curves.len(), 7 * 20);
    }
    let validity: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("validity.json")).unwrap()).unwrap();
    assert_eq!(validity["in_domain"]["emitted"], 7 * 12 * 20);

    let first = manifest(&eval);
    ok(&["evaluate", "--config", "c.toml", "--out", "o", "--threads", "1"], tmp.path());
    assert_eq!(manifest(&eval)["files"], first["files"]);
    assert_eq!(manifest(&eval)["config_hash"], first["config_hash"]);

    // Without the fixed method the first listed method is the baseline.
    let cfg = format!("methods = [\"mle-covariance\", \"mle-variance\"]\n[paths]\nmodels = \"o/models\"\ndata = \"o/data\"\n{}", SMALL.replace("seed = 3\n", ""));
    write_config(tmp.path(), "nofixed.toml", &cfg);
    ok(&["evaluate", "--config", "nofixed.toml", "--out", "p", "--seed", "3"], tmp.path());
    let rows = read_csv(&tmp.path().join("p/eval/metrics_in_domain.csv"));
    assert_eq!(rows[0][0], "mle-covariance");
    assert_eq!(&rows[0][3..], &["1", "1", "1", "1"]);
    let ours = rows.iter().find(|r| r[0] == "mle-variance").unwrap();
    let theirs = read_csv(&eval.join("metrics_in_domain.csv")).into_iter().find(|r| r[0] == "mle-variance").unwrap();
    assert_eq!(ours[1..3], theirs[1..3]);
}

#[test]
fn zero_noise_gives_near_zero_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = r#"
seed = 5
[data]
train_tracks = 30
test_tracks = 8
[data.tracks.noise]
base_scale = 0.0
orientation_offset = 0.0
[model]
hidden = [8]
dropout_rate = 0.0
[training.mean]
epochs = 1
[training.mean.adam]
lr = 1e-12
[training.covariance]
epochs = 2
[training.kalman]
epochs = 1
[epistemic]
enabled = false
[filter]
sigma_floor = 1e-6
"#;
    write_config(tmp.path(), "c.toml", cfg);
    full_run(tmp.path(), "c.toml", "o");
    for split in ["in_domain", "ood"] {
        let rows = read_csv(&tmp.path().join(format!("o/eval/metrics_{split}.csv")));
        assert_eq!(rows.len(), 4);
        let means: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        for m in &means {
            assert!(*m < 1e-6, "{split}: {means:?}");
        }
        let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-6);
    }
}

fn column(path: &Path, col: usize) -> Vec<f64> {
    read_csv(path).iter().map(|r| r[col].parse().unwrap()).collect()
}

fn ellipse_areas(path: &Path) -> Vec<f64> {
    column(path, 10).iter().zip(column(path, 11)).map(|(a, b)| std::f64::consts::PI * a * b).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt() / m
}

#[test]
fn rainbow_demo_tracks_generator_truth() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), "het.toml", "[rainbow]\nn_points = 600\n");
    write_config(tmp.path(), "hom.toml", "[rainbow]\nn_points = 600\nhomoscedastic = true\n");
    ok(&["demo-rainbow", "--config", "het.toml", "--out", "het"], tmp.path());
    ok(&["demo-rainbow", "--config", "hom.toml", "--out", "hom"], tmp.path());

    let het_csv = tmp.path().join("het/rainbow/rainbow.csv");
    let hom = ellipse_areas(&tmp.path().join("hom/rainbow/rainbow.csv"));
    assert_eq!(hom.len(), 600);
    let cv_hom = coefficient_of_variation(&hom);
    assert!(cv_hom < 0.15, "homoscedastic area CV {cv_hom}");
    // Along the arc the major axis grows and the minor axis shrinks; the
    // fitted axes must follow both trends.
    for (pred, truth) in [(10, 5), (11, 6)] {
        let r = pearson(&column(&het_csv, pred), &column(&het_csv, truth));
        assert!(r > 0.7, "axis column {pred}: correlation with truth {r}");
    }
    for run in ["het", "hom"] {
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(tmp.path().join(run).join("rainbow/summary.json")).unwrap()).unwrap();
        let e = summary["relative_std_error"].as_f64().unwrap();
        assert!(e < 0.25, "{run}: relative std error {e}");
    }
    assert_eq!(manifest(&tmp.path().join("het/rainbow"))["command"], "demo-rainbow");
}
