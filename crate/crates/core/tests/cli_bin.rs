//! End-to-end checks of the `levytd` binary: flags, config files, artifact
//! schemas, exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn levytd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_levytd"))
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_subcommand_produces_artifacts_and_exit_zero() {
    let dir = TempDir::new().unwrap();
    let out = levytd()
        .args([
            "run",
            "--problem",
            "pure_jump_1d",
            "--M",
            "16",
            "--N",
            "5",
            "--iterations",
            "2",
            "--log-every",
            "5",
            "--paths",
            "2",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("relative error"), "stdout: {stdout}");

    let metrics = read(&dir.path().join("metrics.csv"));
    assert!(metrics.starts_with(
        "iteration,update,y0_estimate,y0_rel_error,loss1,loss2,loss3,loss4,lr,seconds\n"
    ));
    // Every data row parses as the 10 declared columns.
    for line in metrics.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 10, "row {line}");
        fields[2].parse::<f64>().unwrap();
        fields[9].parse::<f64>().unwrap();
    }

    let traj = read(&dir.path().join("trajectories.csv"));
    assert!(traj
        .starts_with("trajectory,step,time,coord_index,x_value,n1_value,exact_value,jump_flag\n"));
    for line in traj.lines().skip(1) {
        assert_eq!(line.split(',').count(), 8, "row {line}");
    }

    let summary = read(&dir.path().join("summary.txt"));
    for key in [
        "problem:",
        "final_y0:",
        "exact_y0:",
        "rel_error:",
        "updates:",
        "runtime_seconds:",
    ] {
        assert!(summary.contains(key), "summary missing {key}:\n{summary}");
    }
}

#[test]
fn config_file_drives_a_run_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "problem = robustness_1d\nepsilon = 0.25\ntheta = 0.4\nM = 12\nN = 4\niterations = 1\nlog_every = 4\npaths = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = levytd()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--M", "8", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    // 1 trajectory * (N+1) steps * 1 coordinate rows + header.
    let traj = read(&out_dir.join("trajectories.csv"));
    assert_eq!(traj.trim().lines().count(), 1 + 5);
}

#[test]
fn invalid_configs_exit_nonzero_with_a_message() {
    let dir = TempDir::new().unwrap();
    // td_step must divide N.
    let out = levytd()
        .args([
            "run",
            "--M",
            "8",
            "--N",
            "5",
            "--iterations",
            "1",
            "--td-step",
            "3",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("td_step"));

    let out = levytd()
        .args(["run", "--problem", "no_such_problem", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn identical_seed_runs_are_byte_identical_under_the_fixed_clock() {
    let dir = TempDir::new().unwrap();
    let run = |tag: &str| {
        let out_dir = dir.path().join(tag);
        let out = levytd()
            .env("LEVYTD_FIXED_CLOCK", "1")
            .args([
                "run",
                "--M",
                "16",
                "--N",
                "5",
                "--iterations",
                "2",
                "--log-every",
                "2",
                "--seed",
                "2023",
                "--out",
            ])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn sweep_subcommand_writes_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let out = levytd()
        .args([
            "sweep",
            "--axis",
            "lambda",
            "--values",
            "0.3,0.6",
            "--M",
            "8",
            "--N",
            "4",
            "--iterations",
            "1",
            "--paths",
            "0",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sweep = read(&dir.path().join("sweep.csv"));
    let lines: Vec<&str> = sweep.trim().lines().collect();
    assert_eq!(lines[0], "value,y0_rel_error,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.3,"));
    assert!(lines[2].starts_with("0.6,"));
    // Each per-value run keeps its own artifacts.
    assert!(dir.path().join("lambda=0.3/metrics.csv").exists());
    assert!(dir.path().join("lambda=0.6/summary.txt").exists());
}

#[test]
fn td_step_sweep_matches_the_step_accounting() {
    let dir = TempDir::new().unwrap();
    let out = levytd()
        .args([
            "sweep",
            "--axis",
            "td_step",
            "--values",
            "1,2,3",
            "--M",
            "8",
            "--N",
            "6",
            "--iterations",
            "1",
            "--paths",
            "0",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    for (k, updates) in [(1usize, 6usize), (2, 3), (3, 2)] {
        let summary = read(&dir.path().join(format!("td_step={k}/summary.txt")));
        assert!(
            summary.contains(&format!("updates: {updates}")),
            "k={k}: {summary}"
        );
    }
}
