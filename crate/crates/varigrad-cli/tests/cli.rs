//! End-to-end tests of the `varigrad` binary: exit codes, output-file
//! structure, determinism, and the config override surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_varigrad")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("VARIGRAD_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("varigrad-cli-{}-{tag}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

/// Arguments for a quick synthetic training run (about a second, debug build).
fn small_train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--set",
        "n_per_class=40",
        "--set",
        "n_val_per_class=10",
        "--set",
        "layer_widths=8",
        "--set",
        "epochs=2",
        "--M",
        "32",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn train_runs_are_byte_identical_across_reruns() {
    let dir_a = tmp_dir("det-a");
    let dir_b = tmp_dir("det-b");
    let (a, b) = (dir_a.to_str().unwrap(), dir_b.to_str().unwrap());
    let out_a = run(&small_train_args(a, &["--seed", "11"]));
    let out_b = run(&small_train_args(b, &["--seed", "11"]));
    assert_eq!(code(&out_a), 0, "stderr: {}", stderr(&out_a));
    assert_eq!(code(&out_b), 0, "stderr: {}", stderr(&out_b));
    for file in ["metrics.csv", "model.ckpt"] {
        assert_eq!(
            read(&dir_a.join(file)),
            read(&dir_b.join(file)),
            "{file} differs between identically-seeded runs"
        );
    }
    // config.txt differs only in the out path; normalize and compare.
    let ca = String::from_utf8(read(&dir_a.join("config.txt"))).unwrap().replace(a, "OUT");
    let cb = String::from_utf8(read(&dir_b.join("config.txt"))).unwrap().replace(b, "OUT");
    assert_eq!(ca, cb);

    // A different seed changes the trained model.
    let dir_c = tmp_dir("det-c");
    let c = dir_c.to_str().unwrap();
    let out_c = run(&small_train_args(c, &["--seed", "12"]));
    assert_eq!(code(&out_c), 0);
    assert_ne!(read(&dir_a.join("model.ckpt")), read(&dir_c.join("model.ckpt")));
    for d in [dir_a, dir_b, dir_c] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn metrics_csv_has_the_documented_layout() {
    let dir = tmp_dir("metrics");
    let out = run(&small_train_args(dir.to_str().unwrap(), &["--set", "layer_widths=8,6"]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = String::from_utf8(read(&dir.join("metrics.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_elbo,train_error,val_error,mean_alpha_layer0,mean_alpha_layer1,mean_alpha_layer2"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per epoch");
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 7);
        assert_eq!(cells[0], (i + 1).to_string());
        let train_err: f64 = cells[2].parse().unwrap();
        let val_err: f64 = cells[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&train_err));
        assert!((0.0..=1.0).contains(&val_err));
        for alpha_cell in &cells[4..] {
            let alpha: f64 = alpha_cell.parse().unwrap();
            assert!(alpha > 0.0 && alpha <= 1.0, "mean alpha {alpha} outside (0, 1]");
        }
    }
    assert!(!text.contains('\r'), "LF line endings only");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn rejected_configs_exit_2_and_name_the_problem() {
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["train", "--set", "learning_rate=0.1"], "learning_rate"),
        (vec!["train", "--set", "lr=fast"], "lr"),
        (vec!["train", "--mode", "warp"], "mode"),
        (vec!["train", "--kl", "quad"], "quadrature"),
        (vec!["train", "--set", "hidden_p=0.9"], "hidden_p"),
        (vec!["train", "--set", "noise=typeA", "--set", "granularity=weight"], "typeA"),
        (vec!["train", "--set", "oops"], "key=value"),
        (vec!["variance"], "fresh_train"),
        (vec!["kl-table", "--set", "kl_grid_max=1.5"], "kl_grid_max"),
        (vec!["train", "--epochs", "0"], "epochs"),
    ];
    for (args, needle) in cases {
        let out = run(&args);
        assert_eq!(code(&out), 2, "args {args:?}: {}", stderr(&out));
        assert!(
            stderr(&out).contains(needle),
            "args {args:?}: stderr should mention '{needle}', got: {}",
            stderr(&out)
        );
    }
    // Unknown flags and subcommands are usage errors (also exit 2).
    assert_eq!(code(&run(&["explode"])), 2);
    assert_eq!(code(&run(&["train", "--warp", "9"])), 2);
}

#[test]
fn numeric_blowup_during_training_exits_3() {
    let dir = tmp_dir("blowup");
    let out = run(&small_train_args(dir.to_str().unwrap(), &["--set", "lr=1e308"]));
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("numeric error"), "stderr: {}", stderr(&out));
    // The run directory still carries the config echo for the failed run.
    assert!(dir.join("config.txt").exists());
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn io_failures_exit_4() {
    // Unwritable output directory.
    let out = run(&["kl-table", "--out", "/dev/null/nested"]);
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("io error"), "stderr: {}", stderr(&out));

    // Missing config file.
    let out = run(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(code(&out), 4);

    // MNIST directory that does not exist.
    let dir = tmp_dir("no-mnist");
    let out = Command::new(bin())
        .args(["train", "--set", "dataset=mnist", "--out", dir.to_str().unwrap()])
        .env("VARIGRAD_DATA_DIR", "/nonexistent-mnist")
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    std::fs::remove_dir_all(dir).ok();

    // MNIST requested without the environment variable at all: that is a
    // configuration gap, not an IO failure.
    let out = run(&["train", "--set", "dataset=mnist"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("VARIGRAD_DATA_DIR"), "stderr: {}", stderr(&out));
}

#[test]
fn mnist_idx_fixtures_train_through_the_env_dir() {
    let data_dir = tmp_dir("idx-data");
    std::fs::create_dir_all(&data_dir).unwrap();
    // 40 tiny 5x5 images, labels cycling 0..9.
    let n = 40;
    let mut pixels = Vec::with_capacity(n * 25);
    for i in 0..n * 25 {
        pixels.push((i * 37 % 256) as u8);
    }
    let labels: Vec<u8> = (0..n as u8).map(|i| i % 10).collect();
    varigrad::data::write_idx_images(&data_dir.join("train-images-idx3-ubyte"), n, 5, 5, &pixels)
        .unwrap();
    varigrad::data::write_idx_labels(&data_dir.join("train-labels-idx1-ubyte"), &labels).unwrap();

    let out_dir = tmp_dir("idx-run");
    let out = Command::new(bin())
        .args([
            "train",
            "--set",
            "dataset=mnist",
            "--set",
            "val_split=8",
            "--set",
            "layer_widths=6",
            "--epochs",
            "1",
            "--M",
            "16",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .env("VARIGRAD_DATA_DIR", &data_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let metrics = String::from_utf8(read(&out_dir.join("metrics.csv"))).unwrap();
    assert_eq!(metrics.lines().count(), 2, "header plus one epoch");
    for d in [data_dir, out_dir] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn kl_table_matches_the_library_row_for_row() {
    let dir = tmp_dir("kl");
    let out = run(&["kl-table", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = String::from_utf8(read(&dir.join("kl_table.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "log_alpha,neg_kl_polynomial,neg_kl_lower_bound,neg_kl_quadrature"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100, "default grid has 100 points");
    for row in &rows {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        let [la, poly, bound, quad] = cells[..] else { panic!("bad row {row}") };
        // Float Display round-trips, so parsed cells must equal the library
        // evaluations bit for bit.
        assert_eq!(poly, varigrad::posterior::neg_kl_per_unit(la, varigrad::KlMode::Polynomial).unwrap());
        assert_eq!(bound, varigrad::posterior::neg_kl_per_unit(la, varigrad::KlMode::LowerBound).unwrap());
        assert_eq!(quad, varigrad::posterior::neg_kl_per_unit(la, varigrad::KlMode::Quadrature).unwrap());
        assert!(bound <= quad, "lower bound must not exceed quadrature at {la}");
    }
    // First and last grid points: alpha = 1/19 and alpha = 1 exactly.
    let first: f64 = rows[0].split(',').next().unwrap().parse().unwrap();
    assert_eq!(first, (1.0f64 / 19.0).ln());
    let last = rows[99];
    assert!(last.starts_with("0,"), "alpha = 1 row: {last}");
    assert!(last.ends_with(",0"), "quadrature must vanish at alpha = 1: {last}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn variance_runs_from_fresh_train_and_from_checkpoint() {
    let train_dir = tmp_dir("var-train");
    let out = run(&small_train_args(train_dir.to_str().unwrap(), &["--seed", "5"]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = train_dir.join("model.ckpt");

    let var_dir = tmp_dir("var-meas");
    let ckpt_arg = format!("checkpoint={}", ckpt.to_str().unwrap());
    let args = [
        "variance",
        "--set",
        ckpt_arg.as_str(),
        "--set",
        "n_per_class=40",
        "--set",
        "n_val_per_class=10",
        "--set",
        "var_R=12",
        "--set",
        "var_M=16",
        "--set",
        "var_modes=none,local,per-minibatch",
        "--out",
        var_dir.to_str().unwrap(),
    ];
    let out = run(&args);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = String::from_utf8(read(&var_dir.join("variance.csv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer,mode,M,R,mean_variance,stderr");
    assert_eq!(lines.len(), 1 + 2 * 3, "two layers times three modes");
    assert_eq!(lines[1].split(',').next().unwrap(), "first");
    assert_eq!(lines[4].split(',').next().unwrap(), "last");

    // Rerun is byte-identical (the command is deterministic end to end).
    let var_dir2 = tmp_dir("var-meas2");
    let mut args2 = args;
    args2[args.len() - 1] = var_dir2.to_str().unwrap();
    let out2 = run(&args2);
    assert_eq!(code(&out2), 0);
    assert_eq!(read(&var_dir.join("variance.csv")), read(&var_dir2.join("variance.csv")));

    // Supplying both a checkpoint and fresh_train is ambiguous.
    let both = run(&[
        "variance",
        "--set",
        ckpt_arg.as_str(),
        "--set",
        "fresh_train=true",
        "--out",
        var_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&both), 2);

    for d in [train_dir, var_dir, var_dir2] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn bench_writes_parseable_json_with_the_requested_modes() {
    let dir = tmp_dir("bench");
    let out = run(&[
        "bench",
        "--set",
        "bench_dims=8,16",
        "--set",
        "bench_M=8",
        "--set",
        "bench_trials=3",
        "--set",
        "bench_modes=local,per-datapoint,per-minibatch",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let parsed: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("speed.json"))).expect("valid JSON");
    let entries = parsed["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2 * 3, "two widths times three modes");
    let modes: std::collections::BTreeSet<&str> =
        entries.iter().map(|e| e["mode"].as_str().unwrap()).collect();
    assert_eq!(
        modes.into_iter().collect::<Vec<_>>(),
        vec!["local", "per-datapoint", "per-minibatch"]
    );
    for entry in entries {
        assert!(entry["median_seconds"].as_f64().unwrap() > 0.0);
        assert_eq!(entry["trials"].as_u64().unwrap(), 3);
    }
    // Too few trials for a median is a config error.
    let bad = run(&["bench", "--set", "bench_trials=2", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn gradcheck_passes_for_both_adaptive_noise_families() {
    for noise in ["typeA", "typeB"] {
        let dir = tmp_dir(&format!("gc-{noise}"));
        let out = run(&[
            "gradcheck",
            "--noise",
            noise,
            "--set",
            "n_per_class=10",
            "--set",
            "n_val_per_class=5",
            "--set",
            "layer_widths=6",
            "--M",
            "8",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let text = stdout(&out);
        assert!(text.contains("-> PASS"), "stdout: {text}");
        assert!(text.contains("log_alpha"), "stdout: {text}");
        assert!(dir.join("gradcheck.txt").exists());
        std::fs::remove_dir_all(dir).ok();
    }
}

#[test]
fn config_file_and_flags_compose_with_flag_precedence() {
    let dir = tmp_dir("compose");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("run.cfg");
    std::fs::write(&cfg_path, "# fixture\nseed = 3\nM = 64\nhidden_p = 0.4\nepochs = 2\nn_per_class = 40\nn_val_per_class = 10\nlayer_widths = 8\n").unwrap();
    let out_dir = dir.join("run");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "7",
        "--M",
        "16",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let echo = String::from_utf8(read(&out_dir.join("config.txt"))).unwrap();
    assert!(echo.contains("\nseed = 7\n"), "flag overrides file: {echo}");
    assert!(echo.lines().any(|l| l == "M = 16"), "flag overrides file: {echo}");
    assert!(echo.contains("\nhidden_p = 0.4\n"), "file key survives: {echo}");
    assert!(echo.contains("\nepochs = 2\n"), "file key survives: {echo}");
    // Echo is sorted by key.
    let keys: Vec<&str> = echo.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);
    std::fs::remove_dir_all(dir).ok();
}
