use std::fs;
use std::process::{Command, Output};

const HEADER: &str =
    "lambda,mean_interval_s,interval_std,throughput_tps,throughput_std,uncle_rate,uncle_rate_std,orphans,confirmed,pending,runs";

fn gridchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridchain"))
        .args(args)
        .env_remove("GRIDCHAIN_OUT_DIR")
        .output()
        .expect("binary runs")
}

const QUICK: &[&str] = &["--runs", "2", "--duration", "300", "--warmup", "5", "--seed", "7"];

fn with_quick(args: &[&str]) -> Vec<String> {
    args.iter().chain(QUICK).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    gridchain(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn sweep_csv_is_stable() {
    let args = with_quick(&["--mode", "sweep", "--sweep", "1,3"]);
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("3,"));
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 11 && l.ends_with(",2")));

    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let mut threaded = args.clone();
    threaded.extend(["--threads".to_string(), "2".to_string()]);
    assert_eq!(a.stdout, run(&threaded).stdout);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(&cfg, "# threshold\nlambda = 9\nruns = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = gridchain(&["--config", cfg, "--lambda", "3", "--duration", "300", "--warmup", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("3,") && row.ends_with(",1"), "{row}");
}

#[test]
fn config_errors_exit_with_2() {
    let out = gridchain(&["--lambda", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let out = gridchain(&["--mode", "sweep", "--sweep", ""]);
    assert_eq!(out.status.code(), Some(2));

    let out = gridchain(&["--hash-shares", "0.5,0.1"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "lambda = 3\ntx-rate = lots\n").unwrap();
    let out = gridchain(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("tx-rate"), "{err}");

    assert_eq!(gridchain(&["--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_3() {
    // a warm-up longer than any chain this run can build
    let out = gridchain(&["--runs", "1", "--duration", "20", "--warmup", "500"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gridchain"))
        .args(with_quick(&["--mode", "mainnet-compare"]))
        .env("GRIDCHAIN_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(dir.path().join("mainnet-compare.csv")).unwrap();
    assert!(text.starts_with(HEADER));
    assert!(text.lines().nth(1).unwrap().starts_with("9,"));
}

#[test]
fn trace_and_out_files() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let csv = dir.path().join("nested/single.csv");
    let out = run(&with_quick(&["--trace", trace.to_str().unwrap(), "--out", csv.to_str().unwrap()]));
    assert!(out.status.success());
    let t = fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("time,kind,node,block_id,number,difficulty,timestamp,n_tx,n_uncles\n"));
    assert!(t.lines().count() > 10);
    assert!(fs::read_to_string(&csv).unwrap().starts_with(HEADER));
}

#[test]
fn demo_reports_recovery() {
    let out = gridchain(&["--mode", "e2e-demo", "--duration", "400", "--warmup", "5", "--untrusted-meter"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let field = |k: &str| -> u64 {
        text.lines()
            .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix(' ')))
            .unwrap_or_else(|| panic!("{k} missing in {text}"))
            .parse()
            .unwrap()
    };
    assert!(field("records_confirmed") > 0);
    assert_eq!(field("records_recovered"), field("records_confirmed"));
    assert_eq!(field("decryption_failures"), 0);
    assert!(field("records_rejected") > 0);
    assert_eq!(field("untrusted_stored"), 0);
}
