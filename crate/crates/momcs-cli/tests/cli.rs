//! End-to-end checks of the momcs binary: artifact round trips, CSV shape,
//! determinism, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn momcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momcs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")[..]))
        .unwrap_or_else(|| panic!("missing {key} in `{line}`"))
}

#[test]
fn gen_synth_recover_round_trip_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let net_path = dir.path().join("net.gnw");
    let out = momcs(&[
        "gen",
        "--dims",
        "2,10",
        "--seed",
        "3",
        "--out",
        net_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let net = momcs_core::GeneratorNet::load(&net_path).unwrap();
    assert_eq!(net.dims(), &[2, 10]);

    let problem_dir = dir.path().join("problem");
    let out = momcs(&[
        "synth",
        "--net",
        net_path.to_str().unwrap(),
        "--m",
        "24",
        "--sigma",
        "0",
        "--seed",
        "5",
        "--out",
        problem_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let problem = momcs_core::SensingProblem::load_dir(&problem_dir).unwrap();
    assert_eq!(problem.m(), 24);
    assert_eq!(problem.n(), 10);

    let trace_path = dir.path().join("trace.csv");
    let out = momcs(&[
        "recover",
        "--problem",
        problem_dir.to_str().unwrap(),
        "--net",
        net_path.to_str().unwrap(),
        "--algorithm",
        "mom_tournament",
        "--batches",
        "4",
        "--iterations",
        "60",
        "--restarts",
        "2",
        "--optimizer",
        "plain",
        "--trace",
        trace_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = stdout(&out);
    let final_objective: f64 = field(line.trim(), "final_objective").parse().unwrap();

    let trace = std::fs::read_to_string(&trace_path).unwrap();
    assert!(trace.starts_with("# seed = 0\n"));
    let data: Vec<&str> = trace
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iteration"))
        .collect();
    assert_eq!(data.len(), 60, "one row per iteration");
    let mut last_elapsed = -1.0f64;
    for row in &data {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 4);
        let elapsed: f64 = cols[3].parse().unwrap();
        assert!(elapsed >= last_elapsed, "elapsed_seconds must not decrease");
        last_elapsed = elapsed;
    }
    let last_cols: Vec<&str> = data.last().unwrap().split(',').collect();
    assert_eq!(last_cols[0], "60");
    let last_objective: f64 = last_cols[1].parse().unwrap();
    assert_eq!(last_objective, final_objective);
}

#[test]
fn recover_dumps_reconstruction_vector() {
    let dir = tempfile::tempdir().unwrap();
    let net_path = dir.path().join("net.gnw");
    let problem_dir = dir.path().join("problem");
    assert!(momcs(&["gen", "--dims", "2,8", "--out", net_path.to_str().unwrap()])
        .status
        .success());
    assert!(momcs(&[
        "synth",
        "--net",
        net_path.to_str().unwrap(),
        "--m",
        "16",
        "--out",
        problem_dir.to_str().unwrap(),
    ])
    .status
    .success());
    let dump = dir.path().join("x.txt");
    let out = momcs(&[
        "recover",
        "--problem",
        problem_dir.to_str().unwrap(),
        "--net",
        net_path.to_str().unwrap(),
        "--algorithm",
        "erm",
        "--iterations",
        "30",
        "--restarts",
        "1",
        "--dump-reconstruction",
        dump.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&dump).unwrap();
    let values: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 8);
}

fn strip_wall_ms(csv: &str) -> String {
    // wall_ms is the 9th column of the per-trial table; timing is the one
    // legitimately nondeterministic field.
    csv.lines()
        .map(|line| {
            if line.starts_with('#') || line.starts_with("scenario") {
                line.to_string()
            } else {
                let cols: Vec<&str> = line.split(',').collect();
                let mut kept = cols.clone();
                kept.remove(8);
                kept.join(",")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn write_tiny_plan(path: &Path) {
    std::fs::write(
        path,
        "[plan]\ntrials = 2\nm_grid = 30\nmaster_seed = 11\n\
         [generator]\ndims = 2,10\n\
         [algorithms]\nlist = erm,mom_direct\n\
         [recovery]\niterations = 40\nrestarts = 1\nnum_batches = 5\n",
    )
    .unwrap();
}

#[test]
fn bench_rows_match_plan_and_rerun_is_identical_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.ini");
    write_tiny_plan(&config);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = momcs(&[
            "bench",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let csv_a = std::fs::read_to_string(out_a.join("bench.csv")).unwrap();
    let csv_b = std::fs::read_to_string(out_b.join("bench.csv")).unwrap();
    assert_eq!(strip_wall_ms(&csv_a), strip_wall_ms(&csv_b));

    let data: Vec<&str> = csv_a
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("scenario"))
        .collect();
    // 1 m-value x 2 algorithms x 2 trials.
    assert_eq!(data.len(), 4);
    assert!(csv_a.contains("# master_seed = 11"));
    assert!(csv_a.contains("# version = "));
    assert!(data.iter().all(|l| l.ends_with("false")));

    let summary = std::fs::read_to_string(out_a.join("summary.csv")).unwrap();
    let summary_rows: Vec<&str> = summary
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("scenario"))
        .collect();
    assert_eq!(summary_rows.len(), 2);
}

#[test]
fn bench_seed_flag_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.ini");
    write_tiny_plan(&config);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    assert!(momcs(&[
        "bench",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(momcs(&[
        "bench",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        out_b.to_str().unwrap(),
    ])
    .status
    .success());
    let csv_a = std::fs::read_to_string(out_a.join("bench.csv")).unwrap();
    let csv_b = std::fs::read_to_string(out_b.join("bench.csv")).unwrap();
    assert!(csv_b.contains("# master_seed = 99"));
    assert_ne!(strip_wall_ms(&csv_a), strip_wall_ms(&csv_b));
}

#[test]
fn malformed_config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.ini");
    std::fs::write(&config, "[plan]\ntrials = several\n").unwrap();
    let out = momcs(&[
        "bench",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("plan.trials"), "{}", stderr(&out));

    std::fs::write(&config, "[plan]\nbroken line\n").unwrap();
    let out = momcs(&[
        "bench",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out2").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn theory_suite_exit_codes_track_pass_fail() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("theory.txt");
    let out = momcs(&[
        "theory",
        "--set",
        "theory.trials=5",
        "--set",
        "theory.sigma=0",
        "--set",
        "theory.direction_samples=5",
        "--set",
        "theory.m=160",
        "--set",
        "theory.num_batches=8",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("check=objective_bound"));
    assert!(text.contains("pass_rate=1"));
    assert!(text.contains("verdict=pass"));
    assert_eq!(text, stdout(&out));

    // An unattainable eigenvalue level must flip the exit code.
    let out = momcs(&[
        "theory",
        "--set",
        "theory.trials=5",
        "--set",
        "theory.direction_samples=5",
        "--set",
        "theory.gamma=5.0",
    ]);
    assert!(!out.status.success());
    assert!(stdout(&out).contains("verdict=FAIL"));
}
