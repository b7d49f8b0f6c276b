use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trigsim"))
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(name: &str) -> String {
    scenarios().join(name).to_string_lossy().into_owned()
}

fn temp_scenario(text: &str) -> tempfile::NamedTempFile {
    let f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
    std::fs::write(f.path(), text).unwrap();
    f
}

#[test]
fn table1_p64_prints_max_prestaged() {
    let o = run(&["run", &scenario("table1_p64")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "max_prestaged=42"));
}

#[test]
fn phase_override_reports_coordination_fraction_in_json() {
    let o = run(&[
        "run",
        "--scenario",
        &scenario("phase.toml"),
        "--set",
        "phases=200",
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let f = v["values"]["coordination_fraction"].as_f64().unwrap();
    assert!((0.31..=0.33).contains(&f), "{f}");
}

#[test]
fn every_shipped_scenario_validates_and_passes_its_assertions() {
    let mut n = 0;
    for e in std::fs::read_dir(scenarios()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_none_or(|x| x != "toml") {
            continue;
        }
        let path = p.to_string_lossy().into_owned();
        let v = run(&["validate", &path]);
        assert_eq!(v.status.code(), Some(0), "{path}: {}", stderr(&v));
        let r = run(&["run", &path, "--assert"]);
        assert_eq!(r.status.code(), Some(0), "{path}: {}", stderr(&r));
        n += 1;
    }
    assert!(n >= 15);
}

#[test]
fn malformed_scenario_exits_2_with_position() {
    let f = temp_scenario("ranks = 4\n[workload\nkind = \"custom\"\n");
    let o = run(&["run", f.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn bad_program_line_is_reported() {
    let f = temp_scenario("ranks = 2\n[workload]\nkind = \"custom\"\n[program]\ndefault = \"\"\"\ncompute 1us\nfly away\n\"\"\"\n");
    let o = run(&["validate", f.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("program.default: step line 2: unknown step"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn validate_names_a_queue_pair_with_two_owners() {
    let f = temp_scenario(
        "backend = \"ib\"\nranks = 2\n[workload]\nkind = \"custom\"\n[program]\ndefault = \"barrier\"\n\
         [[qp_owner]]\nrank = 1\npeer = 0\nactor = 1\n[[qp_owner]]\nrank = 1\npeer = 0\nactor = 2\n",
    );
    let o = run(&["validate", f.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("QP 1->0"), "{}", stderr(&o));
}

#[test]
fn validate_rejects_threshold_above_counter_max() {
    let f = temp_scenario(
        "ranks = 2\n[workload]\nkind = \"custom\"\n[program]\ndefault = \"trigger c 1\"\n\
         [[prestage]]\nrank = 0\ncounter = \"c\"\nthreshold = 4000\npeer = \"right\"\nsrc = \"a\"\ndst = \"b\"\nsize = 8\n",
    );
    let o = run(&["validate", f.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("threshold 4000 exceeds counter_max 2047"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn valid_file_validates_cleanly() {
    let o = run(&["validate", &scenario("halo_prestage.toml")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).is_empty());
}

#[test]
fn failed_expectation_exits_1() {
    let o = run(&[
        "run",
        &scenario("table1_p64"),
        "--set",
        "ranks=256",
        "--assert",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("FAIL max_prestaged=32"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn simulation_fault_exits_3() {
    let f = temp_scenario(
        "ranks = 2\n[workload]\nkind = \"custom\"\n[program.ranks]\n0 = \"repeat 65 { am_send 1 1 }\"\n1 = \"compute 1ms\"\n[handlers]\n1 = \"\"\n",
    );
    let o = run(&["run", f.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mailbox"), "{}", stderr(&o));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    for format in ["csv", "json"] {
        let args = [
            "run",
            &scenario("portability_4.toml"),
            "--format",
            format,
            "--seed",
            "9",
        ];
        let (a, b) = (run(&args), run(&args));
        assert_eq!(a.status.code(), Some(0));
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn csv_has_rank_rows_and_aggregate() {
    let o = run(&["run", &scenario("portability_1.toml"), "--format", "csv"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("rank,end_time_ns"));
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines.last().unwrap().starts_with("all,"));
}

#[test]
fn sweep_emits_one_row_per_point() {
    let o = run(&[
        "run",
        &scenario("table1_p64"),
        "--sweep",
        "ranks=64,256,1024",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "ranks,status,exhaustion_armed,max_prestaged");
    assert_eq!(lines[2], "256,completed,32,32");
}

#[test]
fn trace_and_out_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.log");
    let out = dir.path().join("m.json");
    let o = run(&[
        "run",
        &scenario("halo_prestage.toml"),
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.lines().all(|l| l.split('\t').count() == 3));
    assert!(t.contains("\tuser-trigger\t"));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(m["status"], "completed");
}

#[test]
fn unknown_override_is_a_parse_error() {
    let o = run(&["run", &scenario("phase"), "--set", "nosuchkey=1"]);
    assert_eq!(o.status.code(), Some(2));
}
