//! End-to-end tests of the `gfwa` binary: exit codes, CSV schemas, fixture
//! dumps, and config precedence.

use std::path::Path;
use std::process::{Command, Output};

use gatedfwa::numerics::{write_matrix, Matrix};

fn gfwa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfwa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn check_scan_passes_with_csv_report() {
    let out = gfwa(&["check", "scan"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "suite,check,params,value,threshold,pass");
    assert!(lines.len() > 10);
    for line in &lines[1..] {
        assert!(line.ends_with(",true"), "failing row: {line}");
    }
}

#[test]
fn unknown_suite_is_usage_error() {
    let out = gfwa(&["check", "foo"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_recurrence_emits_row_per_trial_with_residuals() {
    let out = gfwa(&["check", "recurrence", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    let softmax_rows: Vec<_> = lines
        .iter()
        .filter(|l| l.starts_with("recurrence,softmax,"))
        .collect();
    assert_eq!(softmax_rows.len(), 30);
    assert!(lines.iter().any(|l| l.contains("verdict=exact")));
}

#[test]
fn bench_counts_reproduce_across_runs() {
    let args = [
        "bench", "--n", "64,128", "--window", "16", "--dhead", "4", "--br", "16", "--bc", "16",
        "--seed", "9",
    ];
    let a = gfwa(&args);
    let b = gfwa(&args);
    assert_eq!(a.status.code(), Some(0));
    let la = stdout_lines(&a);
    let lb = stdout_lines(&b);
    assert_eq!(
        la[0],
        "kernel,phase,n,window,heads,head_dim,block_rows,block_cols,reps,time_ns,logit_evals,elements_read,elements_written"
    );
    assert_eq!(la.len(), lb.len());
    for (ra, rb) in la[1..].iter().zip(&lb[1..]) {
        let cut = |l: &str| {
            let f: Vec<&str> = l.split(',').collect();
            // Everything but the time column must reproduce exactly.
            (f[..9].join(","), f[10..].join(","))
        };
        assert_eq!(cut(ra), cut(rb));
    }
}

#[test]
fn bench_rejects_descending_n_list() {
    let out = gfwa(&["bench", "--n", "128,64"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_require_checks_runs_suites_first() {
    let out = gfwa(&[
        "bench",
        "--require-checks",
        "--n",
        "64",
        "--window",
        "8",
        "--dhead",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert!(lines[0].starts_with("kernel,"));
}

#[test]
fn config_file_fills_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"n": [32], "window": 16, "dhead": 4, "br": 8, "bc": 8}"#,
    )
    .unwrap();
    // Window comes from the file...
    let out = gfwa(&["bench", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let line = &stdout_lines(&out)[1];
    assert!(line.starts_with("full,forward,32,32,"), "line: {line}");
    let swa_line = stdout_lines(&out)
        .iter()
        .find(|l| l.starts_with("swa,forward"))
        .unwrap()
        .clone();
    assert!(swa_line.starts_with("swa,forward,32,16,"), "line: {swa_line}");

    // ...and the flag overrides it.
    let out = gfwa(&[
        "bench",
        "--config",
        cfg_path.to_str().unwrap(),
        "--window",
        "8",
    ]);
    let swa_line = stdout_lines(&out)
        .iter()
        .find(|l| l.starts_with("swa,forward"))
        .unwrap()
        .clone();
    assert!(swa_line.starts_with("swa,forward,32,8,"), "line: {swa_line}");

    let out = gfwa(&["bench", "--config", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_gate_fixture(dir: &Path, n: usize, d: usize, bias: f64) {
    write_matrix(&dir.join("x.gfwa"), &Matrix::zeros(n, d)).unwrap();
    write_matrix(&dir.join("w_gate.gfwa"), &Matrix::zeros(d, 1)).unwrap();
    write_matrix(
        &dir.join("b_gate.gfwa"),
        &Matrix::from_fn(1, 1, |_, _| bias),
    )
    .unwrap();
    write_matrix(&dir.join("w_amplitude.gfwa"), &Matrix::zeros(d, 1)).unwrap();
}

#[test]
fn gate_hist_of_closed_gate_masses_at_one() {
    let dir = tempfile::tempdir().unwrap();
    // Strongly negative pre-activation: alpha ~ exp(-50), decay factor 1.0.
    write_gate_fixture(dir.path(), 64, 4, -50.0);
    let out = gfwa(&["dump", "gate-hist", "--fixture", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "layer,head,bin_lo,bin_hi,count");
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let (lo, count): (f64, u64) = (f[2].parse().unwrap(), f[4].parse().unwrap());
        if lo < 0.95 {
            assert_eq!(count, 0, "mass below the top bin: {line}");
        } else {
            assert_eq!(count, 64);
        }
    }
}

#[test]
fn heatmap_is_banded_and_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = gatedfwa::numerics::Rng::new(3);
    let n = 8;
    write_matrix(&dir.path().join("q.gfwa"), &rng.normal_matrix(n, 4)).unwrap();
    write_matrix(&dir.path().join("k.gfwa"), &rng.normal_matrix(n, 4)).unwrap();
    let out = gfwa(&[
        "dump",
        "attn-heatmap",
        "--fixture",
        dir.path().to_str().unwrap(),
        "--window",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "row,col,prob");
    let mut row_sums = vec![0.0f64; n];
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let (i, j): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let p: f64 = f[2].parse().unwrap();
        row_sums[i] += p;
        let in_band = j <= i && i - j < 4;
        if in_band {
            assert!(p > 0.0, "zero inside band: {line}");
        } else {
            assert_eq!(p, 0.0, "mass outside band: {line}");
        }
    }
    for (i, s) in row_sums.iter().enumerate() {
        assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
    }
}

#[test]
fn heatmap_rejects_oversized_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = gatedfwa::numerics::Rng::new(4);
    write_matrix(&dir.path().join("q.gfwa"), &rng.normal_matrix(300, 2)).unwrap();
    write_matrix(&dir.path().join("k.gfwa"), &rng.normal_matrix(300, 2)).unwrap();
    let out = gfwa(&[
        "dump",
        "attn-heatmap",
        "--fixture",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demo_emits_loss_curve() {
    let out = gfwa(&["demo", "--steps", "30"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 32); // header + initial + 30 steps
    let first: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let last: f64 = lines.last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(first.is_finite() && last.is_finite());
    assert!(last < first);
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let out = gfwa(&["check", "scan", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("suite,check,params"));
}
