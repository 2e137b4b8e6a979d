use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tendist(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tendist"))
        .args(args)
        .current_dir(dir)
        .env_remove("TENDIST_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stats(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn cannon_verifies_and_writes_stats() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["run", "--kernel", "gemm", "--n", "6", "--machine", "3x3", "--algorithm", "cannon", "--verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS max_abs_diff=0"));
    let s = stats(d.path(), "stats.json");
    assert_eq!(s["schema"], 1);
    assert_eq!(s["totals"]["messages"], 36);
    assert_eq!(s["config"]["algorithm"], "cannon");
    assert_eq!(s["memory_high_water"].as_array().unwrap().len(), 9);
}

#[test]
fn johnson_on_a_square_grid_is_a_config_error() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["run", "--machine", "3x3", "--algorithm", "johnson"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cubic"));
}

#[test]
fn ttv_moves_nothing_during_compute() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["run", "--kernel", "ttv", "--machine", "4", "--algorithm", "ttv", "--verify"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
    assert_eq!(stats(d.path(), "stats.json")["totals"]["elements"], 0);
}

#[test]
fn explain_row_placement_matches_golden() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["explain", "--dist", "T: xy->x", "--machine", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let golden = "forall(xo) forall(xi) forall(y) T(x, y) s.t. divide(x, xo, xi, gx), distribute(xo), communicate(T, xo)";
    let squash = |s: &str| s.split_whitespace().collect::<String>();
    let line = stdout(&o).lines().find(|l| l.starts_with("forall")).unwrap().to_string();
    assert_eq!(squash(&line), squash(golden));
}

#[test]
fn explain_cannon_matches_golden_file() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["explain", "--algorithm", "cannon", "--machine", "2x2", "--n", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let golden = include_str!("golden/cannon_2x2.txt");
    assert_eq!(stdout(&o), golden);
    assert!(golden.contains("rotate(ko,{io,jo},kos)"));
}

#[test]
fn explain_without_schedule_shows_raw_lowering() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["explain", "--kernel", "gemm", "--machine", "2", "--dist", "A: xy->x", "--dist", "B: xy->x", "--dist", "C: xy->*"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\nforall(i) forall(j) forall(k) A(i,j) += B(i,k) * C(k,j)\n"));
}

#[test]
fn stats_are_deterministic_apart_from_timestamp() {
    let d = TempDir::new().unwrap();
    let args = |out: &'static str| {
        vec!["run", "--algorithm", "solomonik", "--machine", "2x2x2", "--n", "5", "--seed", "9", "--stats", out]
    };
    assert_eq!(tendist(d.path(), &args("a.json")).status.code(), Some(0));
    assert_eq!(tendist(d.path(), &args("b.json")).status.code(), Some(0));
    let (mut a, mut b) = (stats(d.path(), "a.json"), stats(d.path(), "b.json"));
    a.as_object_mut().unwrap().remove("timestamp");
    b.as_object_mut().unwrap().remove("timestamp");
    assert_eq!(a, b);
}

#[test]
fn workers_from_environment() {
    let d = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tendist"))
        .args(["run", "--algorithm", "summa", "--n", "5", "--verify", "--stats", "w.json"])
        .current_dir(d.path())
        .env("TENDIST_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let single = tendist(d.path(), &["run", "--algorithm", "summa", "--n", "5", "--stats", "s.json"]);
    assert_eq!(single.status.code(), Some(0));
    assert_eq!(stats(d.path(), "w.json")["per_edge"], stats(d.path(), "s.json")["per_edge"]);
}

#[test]
fn trace_dump_and_edge_csv() {
    let d = TempDir::new().unwrap();
    let o = tendist(
        d.path(),
        &["run", "--algorithm", "summa", "--machine", "2x2", "--chunk", "2", "--n", "4", "--dump-trace", "t.txt", "--edges-csv", "e.csv"],
    );
    assert_eq!(o.status.code(), Some(0));
    let trace = std::fs::read_to_string(d.path().join("t.txt")).unwrap();
    assert_eq!(trace.lines().count(), 8);
    assert!(trace.lines().all(|l| l.contains("kind=Copy")));
    let csv = std::fs::read_to_string(d.path().join("e.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("src,dst,messages,elements"));
    let total: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 32);
}

#[test]
fn schedule_script_with_inline_expression() {
    let d = TempDir::new().unwrap();
    std::fs::write(
        d.path().join("s.txt"),
        "# rows of B, columns of A stay put\ndistribute i,j io,jo ii,ji\ncommunicate A,B,C,D jo\n",
    )
    .unwrap();
    let o = tendist(
        d.path(),
        &[
            "run", "--expr", "A(i,l) = B(i,j,k) * C(j,l) * D(k,l)", "--dims", "i=5,j=4,k=3,l=2", "--machine", "2x2",
            "--dist", "A: xy->x0", "--dist", "B: xyz->xy", "--dist", "C: xy->0x", "--dist", "D: xy->00",
            "--schedule", "s.txt", "--verify",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
    let s = stats(d.path(), "stats.json");
    assert_eq!(s["config"]["extents"]["k"], 3);
    assert!(s["totals"]["reduce_messages"].as_u64().unwrap() > 0);
}

#[test]
fn configuration_errors_exit_2() {
    let d = TempDir::new().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--kernel", "gemm", "--machine", "2x2", "--dist", "A: xy->xy"],
        vec!["run", "--algorithm", "cannon", "--schedule", "x.txt"],
        vec!["run", "--algorithm", "cannon", "--machine", "2x3"],
        vec!["run", "--algorithm", "nope"],
        vec!["run", "--kernel", "ttv", "--algorithm", "cannon"],
        vec!["run", "--kernel", "gemm", "--machine", "2x2", "--schedule", "missing.txt"],
        vec!["run", "--algorithm", "summa", "--dims", "q=3"],
        vec!["explain", "--machine", "2x"],
    ];
    for args in cases {
        let o = tendist(d.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn verification_failure_exits_1() {
    // summing 1, 1e16, -1e16, 1 in loop order gives 1; two partial sums give 0
    let d = TempDir::new().unwrap();
    let b = r#"{"dims":[1,4],"data":[1.0,1e16,-1e16,1.0]}"#;
    let c = r#"{"dims":[4,1],"data":[1.0,1.0,1.0,1.0]}"#;
    std::fs::write(d.path().join("b.json"), b).unwrap();
    std::fs::write(d.path().join("c.json"), c).unwrap();
    let o = tendist(
        d.path(),
        &[
            "run", "--algorithm", "cosma", "--machine", "1x1x2", "--dims", "i=1,j=1,k=4", "--input", "B=b.json",
            "--input", "C=c.json", "--verify", "--output", "a.json",
        ],
    );
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("FAIL max_abs_diff=1"));
    assert_eq!(std::fs::read_to_string(d.path().join("a.json")).unwrap(), r#"{"dims":[1,1],"data":[0.0]}"#);
}

#[test]
fn binary_tensor_round_trip() {
    let d = TempDir::new().unwrap();
    let o = tendist(d.path(), &["run", "--algorithm", "summa", "--n", "3", "--output", "a.bin"]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = std::fs::read(d.path().join("a.bin")).unwrap();
    assert_eq!(bytes.len(), 8 * (1 + 2 + 9));
    let again = tendist::io::read_binary(&bytes[..]).unwrap();
    assert_eq!(again.dims(), &[3, 3]);
}
