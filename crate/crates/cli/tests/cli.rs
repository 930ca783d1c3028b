use std::path::Path;
use std::process::{Command, Output};

use gcrf::synth::{random_embeddings, random_vector, sample_rng};
use gcrf::{read_vector, write_matrix, write_vector, Matrix, Vector};
use tempfile::TempDir;

fn gcrf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcrf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn gcrf")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

/// Value of `key=` on the first stderr line that has it.
fn report_value(err: &str, key: &str) -> f64 {
    err.split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {err}"))
        .parse()
        .unwrap()
}

fn small_task(iters: usize, extra_task: &str) -> String {
    format!(
        r#"{{
  "dims": {{"P": 64, "L": 3, "D": 4}},
  "train": {{"iters_per_phase": {iters}}},
  "task": {{"width": 8, "height": 8, "n_train": 8, "n_test": 4{extra_task}}},
  "paths": {{"model_dir": "out/model", "metrics_csv": "out/metrics.csv"}}
}}"#
    )
}

fn accuracies(out: &Output) -> (f64, f64, f64) {
    let text = stdout(out);
    let mut lines = text.lines().skip_while(|l| *l != "unary_acc,dense_acc,delta");
    lines.next().expect("header");
    let v: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    (v[0], v[1], v[2])
}

#[test]
fn solve_with_zero_embeddings_returns_unaries() {
    let dir = TempDir::new().unwrap();
    let b = Vector::new(vec![1.5, -2.0, 0.25, 7.0]).unwrap();
    write_matrix(dir.path().join("e.txt"), &Matrix::zeros(3, 4)).unwrap();
    write_vector(dir.path().join("b.txt"), &b).unwrap();
    let out = gcrf(
        &[
            "solve",
            "--embeddings",
            "e.txt",
            "--unary",
            "b.txt",
            "--lambda",
            "1",
            "--oracle",
            "--out",
            "x.txt",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_vector(dir.path().join("x.txt")).unwrap(), b);
    assert_eq!(report_value(&stderr(&out), "rel_discrepancy"), 0.0);
}

#[test]
fn solve_prints_x_on_stdout() {
    let dir = TempDir::new().unwrap();
    // E^T E + I = [[2, 1], [1, 2]]
    write_matrix(dir.path().join("e.txt"), &Matrix::new(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
    write_vector(dir.path().join("b.txt"), &Vector::new(vec![3.0, 3.0]).unwrap()).unwrap();
    let out = gcrf(&["solve", "--embeddings", "e.txt", "--unary", "b.txt"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let x = gcrf::tensor::parse_matrix(&stdout(&out), "stdout").unwrap();
    assert_eq!(x.shape(), (1, 2));
    assert!((x.get(0, 0) - 1.0).abs() < 1e-12 && (x.get(0, 1) - 1.0).abs() < 1e-12);
    assert!(stderr(&out).contains("converged=true"));
}

#[test]
fn solve_random_instance_agrees_with_oracle() {
    let dir = TempDir::new().unwrap();
    let mut rng = sample_rng(8, 200);
    write_matrix(dir.path().join("e.txt"), random_embeddings(8, 200, &mut rng).matrix()).unwrap();
    write_vector(dir.path().join("b.txt"), &random_vector(200, &mut rng)).unwrap();
    let out = gcrf(
        &["solve", "--embeddings", "e.txt", "--unary", "b.txt", "--oracle"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(report_value(&err, "rel_discrepancy") <= 1e-8);
    assert!(report_value(&err, "iterations") <= 10.0);
}

#[test]
fn solve_non_convergence_exits_two_with_solution() {
    let dir = TempDir::new().unwrap();
    let mut rng = sample_rng(9, 0);
    write_matrix(dir.path().join("e.txt"), random_embeddings(8, 50, &mut rng).matrix()).unwrap();
    write_vector(dir.path().join("b.txt"), &random_vector(50, &mut rng)).unwrap();
    let out = gcrf(
        &["solve", "--embeddings", "e.txt", "--unary", "b.txt", "--max-iters", "1"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("converged=false"));
    let x = gcrf::tensor::parse_matrix(&stdout(&out), "stdout").unwrap();
    assert_eq!(x.shape(), (1, 50));
}

#[test]
fn solve_input_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    write_matrix(dir.path().join("e.txt"), &Matrix::zeros(2, 3)).unwrap();
    write_vector(dir.path().join("b.txt"), &Vector::zeros(4)).unwrap();
    std::fs::write(dir.path().join("bad.txt"), "2 2\n1 2\n3\n").unwrap();

    let shape = gcrf(&["solve", "--embeddings", "e.txt", "--unary", "b.txt"], dir.path());
    assert_eq!(code(&shape), 1);
    assert_eq!(stderr(&shape).lines().count(), 1, "{}", stderr(&shape));

    let parse = gcrf(&["solve", "--embeddings", "bad.txt", "--unary", "b.txt"], dir.path());
    assert_eq!(code(&parse), 1);
    assert!(stderr(&parse).contains("bad.txt:3:"), "{}", stderr(&parse));

    let missing = gcrf(&["solve", "--embeddings", "nope.txt", "--unary", "b.txt"], dir.path());
    assert_eq!(code(&missing), 1);

    let lambda = gcrf(
        &["solve", "--embeddings", "e.txt", "--unary", "b.txt", "--lambda", "0"],
        dir.path(),
    );
    assert_eq!(code(&lambda), 1);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&gcrf(&[], dir.path())), 1);
    assert_eq!(code(&gcrf(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&gcrf(&["solve"], dir.path())), 1);
    assert_eq!(code(&gcrf(&["--help"], dir.path())), 0);
}

#[test]
fn grad_check_default_passes() {
    let dir = TempDir::new().unwrap();
    let out = gcrf(&["grad-check", "--csv", "checks.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,max_rel_err,tolerance,pass"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 8);
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{text}");
    assert_eq!(std::fs::read_to_string(dir.path().join("checks.csv")).unwrap(), text);
    assert!(stderr(&out).contains("\"gradcheck\""), "effective config is echoed");
}

#[test]
fn grad_check_sabotage_exits_three() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"gradcheck": {"instances": 2}}"#);
    let out = gcrf(&["grad-check", "--config", &cfg, "--sabotage"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("embedding_grad_vs_naive,"));
    assert!(stdout(&out).contains(",false"));
}

#[test]
fn grad_check_scalar_config_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"gradcheck": {"P": 1, "L": 1, "D": 1}}"#);
    let out = gcrf(&["grad-check", "--config", &cfg], dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("scalar_closed_form,"));
}

#[test]
fn config_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let typo = write_config(dir.path(), r#"{"cg": {"rel_tol": 1e-8, "rel_tl": 1e-3}}"#);
    for cmd in ["grad-check", "train", "config"] {
        let out = gcrf(&[cmd, "--config", &typo], dir.path());
        assert_eq!(code(&out), 1, "{cmd}");
        assert!(stderr(&out).contains("rel_tl"), "{}", stderr(&out));
    }
    let mismatch = write_config(dir.path(), r#"{"dims": {"P": 10}}"#);
    assert_eq!(code(&gcrf(&["train", "--config", &mismatch], dir.path())), 1);
    assert_eq!(code(&gcrf(&["grad-check", "--config", "absent.json"], dir.path())), 1);
}

#[test]
fn config_prints_effective_defaults() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"lambda": 2.5}"#);
    let out = gcrf(&["config", "--config", &cfg], dir.path());
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["lambda"], 2.5);
    assert_eq!(v["cg"]["rel_tol"], 1e-10);
    assert_eq!(v["dims"]["D"], 8);
}

#[test]
fn train_without_iterations_gives_equal_accuracies() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_task(0, ""));
    let out = gcrf(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (u, d, delta) = accuracies(&out);
    assert_eq!(u, d);
    assert_eq!(delta, 0.0);
    for sub in ["", "phase1", "phase2"] {
        let m = dir.path().join("out/model").join(sub);
        assert!(m.join("model.json").is_file(), "{}", m.display());
        assert!(m.join("w_unary.txt").is_file());
    }
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics, "iter,phase,lr,loss,accuracy\n");
}

#[test]
fn train_then_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_task(20, ""));
    let out = gcrf(&["train", "--config", &cfg, "--gnuplot"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trained = accuracies(&out);
    assert!(stdout(&out).contains("plot 'out/metrics.csv'"));

    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 40);
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,1,"));
    assert!(metrics.lines().last().unwrap().starts_with("39,2,"));

    let eval = gcrf(&["eval", "--config", &cfg, "--model", "out/model"], dir.path());
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    assert_eq!(accuracies(&eval), trained);

    let phase1 = gcrf(&["eval", "--config", &cfg, "--model", "out/model/phase1"], dir.path());
    let (u, d, _) = accuracies(&phase1);
    assert_eq!(u, d);

    // a second run appends rows without repeating the header
    gcrf(&["train", "--config", &cfg], dir.path());
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 80);

    assert_eq!(
        code(&gcrf(&["eval", "--config", &cfg, "--model", "missing"], dir.path())),
        1
    );
}

#[test]
fn noiseless_task_is_saturated() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &small_task(200, r#", "noise_sigma": 0.0, "smooth_radius": 0"#),
    );
    let out = gcrf(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(accuracies(&out), (1.0, 1.0, 0.0));
}

#[test]
fn divergence_exits_four() {
    let dir = TempDir::new().unwrap();
    let json = small_task(5, "").replace(
        r#""iters_per_phase": 5"#,
        r#""iters_per_phase": 5, "base_lr_pairwise": 1e300"#,
    );
    let cfg = write_config(dir.path(), &json);
    let out = gcrf(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("phase 2"), "{}", stderr(&out));
}

#[test]
fn bench_emits_csv() {
    let dir = TempDir::new().unwrap();
    let out = gcrf(&["bench", "--n", "64,128", "--d", "2,4", "--repeats", "3"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,D,apply_ns,solve_ms,cg_iters"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let d: usize = r[1].parse().unwrap();
        let iters: usize = r[4].parse().unwrap();
        assert!(iters <= d + 2);
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
    }
    assert!(stderr(&out).contains("threads=1"));

    let again = gcrf(&["bench", "--n", "64,128", "--d", "2,4", "--repeats", "3"], dir.path());
    let iters = |t: &str| {
        t.lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(iters(&text), iters(&stdout(&again)));

    let plot = gcrf(
        &["bench", "--n", "64", "--d", "2", "--repeats", "1", "--gnuplot"],
        dir.path(),
    );
    assert!(stdout(&plot).contains("plot $data"));
    assert_eq!(code(&gcrf(&["bench", "--n", "0"], dir.path())), 1);
}
