//! Behavior tests for the command surface: exit codes, input handling and
//! the smaller contract points not covered by the acceptance fixtures.

use std::io::Write as _;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_fwpol");

fn fixture(name: &str) -> String {
    format!(
        "{}/../core/tests/fixtures/{name}",
        env!("CARGO_MANIFEST_DIR")
    )
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary starts");
    child
        .stdin
        .as_mut()
        .expect("stdin handle")
        .write_all(input.as_bytes())
        .expect("stdin write");
    child.wait_with_output().expect("binary finishes")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 output")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 output")
}

#[test]
fn synth_with_no_invariants_yields_the_complete_graph() {
    let scenario = r#"{"entities": ["A", "B", "C"], "invariants": []}"#;
    let out = run_stdin(&["synth", "-"], scenario);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_of(&out).lines().count(), 9);
    assert!(stdout_of(&out).contains("A -> A"));
    assert!(stdout_of(&out).contains("C -> B"));
}

#[test]
fn unknown_template_is_a_usage_error() {
    let scenario = r#"{"entities": ["A"], "invariants": [{"template": "mls", "attrs": {}}]}"#;
    let out = run_stdin(&["synth", "-"], scenario);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("unknown invariant template"));
}

#[test]
fn missing_files_are_usage_errors() {
    let out = run(&["synth", "/nonexistent/scenario.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).starts_with("error: "));

    let out = run(&["analyze", "/nonexistent.rules"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_edge_lines_are_usage_errors() {
    let out = run_stdin(
        &["check", &fixture("scenario.json"), "-"],
        "DB -> Log\nnot an edge\n",
    );
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("src -> dst"));
}

#[test]
fn edges_with_unknown_entities_are_usage_errors() {
    let out = run_stdin(&["check", &fixture("scenario.json"), "-"], "DB -> Mars\n");
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_service_specifications_are_usage_errors() {
    let out = run(&["analyze", &fixture("baseline.rules"), "--service", "tcp:99999"]);
    assert_eq!(code(&out), 2);
    let out = run(&["analyze", &fixture("baseline.rules"), "--service", "gre:1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn stateful_refuses_a_violating_policy() {
    let out = run(&[
        "stateful",
        &fixture("scenario.json"),
        &fixture("policy_drifted.edges"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout_of(&out).is_empty());
    assert!(stderr_of(&out).contains("violation: invariant 2 (sink): Log -> WebFrnt"));
}

#[test]
fn stateful_of_a_bidirectional_policy_has_no_answers() {
    let scenario = r#"{"entities": ["A", "B"], "invariants": []}"#;
    let policy = "A -> A\nA -> B\nB -> A\nB -> B\n";
    std::fs::write("/tmp/fwpol_bidi_scenario.json", scenario).unwrap();
    let out = run_stdin(
        &["stateful", "/tmp/fwpol_bidi_scenario.json", "-"],
        policy,
    );
    assert_eq!(code(&out), 0);
    assert!(!stdout_of(&out).contains("answer:"));
}

#[test]
fn generate_without_bindings_is_a_usage_error() {
    let out = run(&["generate", &fixture("scenario.json"), &fixture("policy_synth.edges")]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("bindings"));
}

#[test]
fn generate_dfwfw_without_the_section_is_a_usage_error() {
    let out = run(&[
        "generate",
        &fixture("scenario_vars.json"),
        &fixture("policy_synth.edges"),
        "--format",
        "dfwfw",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("dfwfw"));
}

#[test]
fn generate_refuses_a_violating_policy() {
    let out = run(&[
        "generate",
        &fixture("scenario_vars.json"),
        &fixture("policy_drifted.edges"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout_of(&out).is_empty());
}

#[test]
fn dfwfw_output_reports_omitted_external_edges_on_stderr() {
    let out = run(&[
        "generate",
        &fixture("scenario_concrete.json"),
        &fixture("policy_synth.edges"),
        "--format",
        "dfwfw",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(stderr_of(&out).lines().count(), 4);
    assert!(stderr_of(&out).lines().all(|l| l.starts_with("warning: ")));
    assert!(stdout_of(&out).ends_with("}\n"));
}

#[test]
fn compare_reports_mismatches_with_exit_one() {
    let out = run(&[
        "compare",
        &fixture("devaccess.rules"),
        &fixture("scenario_concrete.json"),
        &fixture("policy_synth.edges"),
        "--ipassmt",
        &fixture("reference.ipassmt"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout_of(&out).lines().all(|l| l.starts_with("mismatch: ")));
    assert!(!stdout_of(&out).contains("isomorphic"));
}

#[test]
fn diff_in_stateful_mode_sees_answer_changes() {
    let out = run(&[
        "diff",
        &fixture("baseline.rules"),
        &fixture("final.rules"),
        "--ipassmt",
        &fixture("reference.ipassmt"),
        "--state",
        "stateful",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout_of(&out).contains("answer only in"));
}

#[test]
fn identical_invocations_are_byte_identical() {
    let args = [
        "analyze",
        &fixture("final.rules"),
        "--ipassmt",
        &fixture("reference.ipassmt"),
        "--state",
        "stateful",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(code(&first), code(&second));
}

#[test]
fn dot_output_is_written_to_the_requested_path() {
    let path = "/tmp/fwpol_cli_test_policy.dot";
    let out = run(&["synth", &fixture("scenario.json"), "--dot", path]);
    assert_eq!(code(&out), 0);
    let dot = std::fs::read_to_string(path).unwrap();
    assert!(dot.starts_with("digraph policy {"));
    assert!(dot.contains("\"WebApp\" -> \"DB\";"));
}
