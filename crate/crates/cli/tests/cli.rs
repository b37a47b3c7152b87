use std::process::{Command, Output};

fn rsbsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsbsim"))
        .args(args)
        .output()
        .expect("spawn rsbsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn result_line(args: &[&str]) -> String {
    let o = rsbsim(args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
        .lines()
        .find(|l| l.starts_with("result"))
        .unwrap()
        .to_string()
}

#[test]
fn run_examples() {
    assert!(
        result_line(&["run", "--scenario", "attack1", "--preset", "skylake"]).ends_with("success")
    );
    assert!(
        result_line(&["run", "--scenario", "attack4", "--preset", "skylake"]).ends_with("failure")
    );
    assert!(
        result_line(&["run", "--scenario", "attack4", "--preset", "xeon"]).ends_with("success")
    );
    assert!(result_line(&[
        "run",
        "--scenario",
        "attack4",
        "--preset",
        "xeon",
        "--defense",
        "smep"
    ])
    .ends_with("failure"));
}

#[test]
fn run_prints_recovered_secret() {
    let o = rsbsim(&["run", "--scenario", "attack1", "--secret", "AB"]);
    let out = stdout(&o);
    assert!(out.contains("recovered 4142"), "{out}");
    assert!(out.contains("accuracy  1.000"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["run", "--scenario", "attack9"][..],
        &["run", "--scenario", "attack1", "--defense", "nope"],
        &["run", "--scenario", "attack1", "--preset", "pentium"],
        &["matrix", "--format", "xml"],
        &["matrix", "--jobs", "0"],
        &["selftest", "--source", "s5"],
        &["frobnicate"],
    ] {
        assert_eq!(rsbsim(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn matrix_csv_matches_golden_for_any_job_count() {
    let golden = include_str!("golden/matrix_xeon.csv");
    for jobs in ["1", "3", "8"] {
        let o = rsbsim(&[
            "matrix", "--preset", "xeon", "--format", "csv", "--jobs", jobs,
        ]);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(stdout(&o), golden, "jobs {jobs}");
    }
}

#[test]
fn matrix_text_has_footer() {
    let out = stdout(&rsbsim(&["matrix"]));
    assert!(out.contains("smep disabled"));
    assert_eq!(out.matches("BLOCKED").count(), 6);
}

#[test]
fn selftest_sources() {
    let o = rsbsim(&["selftest", "--source", "s3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("4 passed, 0 failed"), "{out}");
    let amd = stdout(&rsbsim(&[
        "selftest",
        "--source",
        "s1",
        "--underfill",
        "none",
    ]));
    assert!(amd.contains("made no prediction"), "{amd}");
    let s2 = stdout(&rsbsim(&["selftest", "--source", "s2"]));
    assert!(s2.contains("stale RSB prediction"));
}

#[test]
fn trace_file_and_verb() {
    let path = std::env::temp_dir().join(format!("rsbsim-trace-{}.tsv", std::process::id()));
    let p = path.to_str().unwrap();
    let o = rsbsim(&["run", "--scenario", "attack1", "--trace", p]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert!(text.lines().any(|l| l.contains("\tspec_squash\t")));
    let parsed: Vec<_> = text
        .lines()
        .map(rsbsim::pipeline::TraceEvent::parse_tsv)
        .collect();
    assert!(parsed.iter().all(Option::is_some));

    let squashes = stdout(&rsbsim(&[
        "trace",
        "--scenario",
        "attack1",
        "--kind",
        "spec_squash",
    ]));
    assert_eq!(squashes.lines().count(), 8);
}

#[test]
fn config_file_replaces_preset() {
    let path = std::env::temp_dir().join(format!("rsbsim-cfg-{}.conf", std::process::id()));
    std::fs::write(
        &path,
        "preset = skylake\n# refilling off again\nrsb_refill_on_kernel_entry = false\n",
    )
    .unwrap();
    let line = result_line(&[
        "run",
        "--scenario",
        "attack4",
        "--config",
        path.to_str().unwrap(),
    ]);
    std::fs::remove_file(&path).unwrap();
    assert!(line.ends_with("success"));
}
