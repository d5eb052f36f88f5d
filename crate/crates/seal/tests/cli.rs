mod common;

use std::fs;
use std::io::{self, BufRead, Read};

use common::{catwatch, init_catwatch, run_replay, seal};
use seal::cli::{run_command, Console, EXIT_FAILURE, EXIT_OK, EXIT_SUSPENDED, EXIT_USAGE};
use seal::store::Store;

fn report_json(dir: &std::path::Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn replay_run_writes_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("catwatch");
    init_catwatch(&dir);
    let out = run_replay(&dir, &catwatch("replay.json"), &[]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    assert!(out.stdout.contains("coverage: 7/12"), "{}", out.stdout);
    for f in ["session.json", "report.json", "report.txt", "events.log"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let report = report_json(&dir);
    assert_eq!(report["coverage"]["numerator"], 7);
    assert_eq!(report["coverage"]["denominator"], 12);

    let text = seal(&["report", "--session", dir.to_str().unwrap(), "--format", "text"], "");
    assert_eq!(text.code, EXIT_OK);
    assert_eq!(text.stdout, fs::read_to_string(dir.join("report.txt")).unwrap());
    let json = seal(&["report", "--session", dir.to_str().unwrap(), "--format", "json"], "");
    assert_eq!(json.stdout, fs::read_to_string(dir.join("report.json")).unwrap());
}

#[test]
fn report_before_any_run_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fresh");
    init_catwatch(&dir);
    let out = seal(&["report", "--session", dir.to_str().unwrap()], "");
    assert_eq!(out.code, EXIT_FAILURE);
    assert!(out.stderr.contains("MapNotRun"), "{}", out.stderr);
}

#[test]
fn usage_errors_exit_one() {
    let out = seal(&["run", "--bogus"], "");
    assert_eq!(out.code, EXIT_USAGE);
    assert!(out.stderr.contains("Usage"), "{}", out.stderr);
    assert_eq!(seal(&[], "").code, EXIT_USAGE);
    assert_eq!(seal(&["run", "--session", "x", "--stage", "reflect"], "").code, EXIT_USAGE);

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    init_catwatch(&dir);
    let no_provider = seal(&["run", "--session", dir.to_str().unwrap()], "");
    assert_eq!(no_provider.code, EXIT_USAGE, "{}", no_provider.stderr);
    let no_fixture = seal(&["run", "--session", dir.to_str().unwrap(), "--provider", "replay"], "");
    assert_eq!(no_fixture.code, EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    let out = seal(&["--help"], "");
    assert_eq!(out.code, EXIT_OK);
    for cmd in ["init", "run", "review", "report", "serve"] {
        assert!(out.stdout.contains(cmd), "{cmd}");
    }
}

#[test]
fn init_refuses_an_existing_session() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("cw");
    init_catwatch(&dir);
    let brief = catwatch("brief.txt");
    let spec = catwatch("swagger.json");
    let again = seal(
        &["init", "--brief", brief.to_str().unwrap(), "--actor", "x", "--spec", spec.to_str().unwrap(), "--session", dir.to_str().unwrap()],
        "",
    );
    assert_eq!(again.code, EXIT_FAILURE);
    assert!(again.stderr.contains("SessionExists"));
}

#[test]
fn init_under_a_root_derives_the_id() {
    let tmp = tempfile::tempdir().unwrap();
    let brief = catwatch("brief.txt");
    let spec = catwatch("swagger.json");
    let out = seal(
        &["init", "--brief", brief.to_str().unwrap(), "--actor", "Owner", "--spec", spec.to_str().unwrap(), "--session-root", tmp.path().to_str().unwrap()],
        "",
    );
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let ids = Store::new(tmp.path()).list().unwrap();
    assert_eq!(ids.len(), 1);
    assert_eq!(ids[0].len(), 12);
    assert!(out.stdout.trim().ends_with(&ids[0]));
}

#[test]
fn stages_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("staged");
    init_catwatch(&dir);
    let fixture = catwatch("replay.json");
    for stage in ["extract", "elicit", "critique", "decompose", "map"] {
        let out = run_replay(&dir, &fixture, &["--stage", stage]);
        assert_eq!(out.code, EXIT_OK, "{stage}: {}", out.stderr);
    }
    assert_eq!(report_json(&dir)["coverage"]["numerator"], 7);
    let again = run_replay(&dir, &fixture, &["--stage", "elicit"]);
    assert_eq!(again.code, EXIT_FAILURE);
    assert!(again.stderr.contains("NothingToRun"), "{}", again.stderr);
}

#[test]
fn interactive_run_without_a_terminal_suspends() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("review");
    init_catwatch(&dir);
    let fixture = catwatch("replay.json");
    let d = dir.to_str().unwrap();

    let first = run_replay(&dir, &fixture, &["--interactive"]);
    assert_eq!(first.code, EXIT_SUSPENDED, "{}", first.stderr);
    assert!(first.stdout.contains("after elicit"), "{}", first.stdout);

    // Still awaiting review: running again suspends at the same point.
    assert_eq!(run_replay(&dir, &fixture, &["--interactive"]).code, EXIT_SUSPENDED);

    let review = seal(&["review", "--session", d], "a\na\na\na\na\na\n");
    assert_eq!(review.code, EXIT_OK, "{}", review.stderr);
    let second = run_replay(&dir, &fixture, &["--interactive"]);
    assert_eq!(second.code, EXIT_SUSPENDED);
    assert!(second.stdout.contains("after decompose"), "{}", second.stdout);

    let twelve = "a\n".repeat(12);
    assert_eq!(seal(&["review", "--session", d], &twelve).code, EXIT_OK);
    let third = run_replay(&dir, &fixture, &["--interactive"]);
    assert_eq!(third.code, EXIT_SUSPENDED);
    assert!(third.stdout.contains("after map"), "{}", third.stdout);

    let last = run_replay(&dir, &fixture, &["--interactive"]);
    assert_eq!(last.code, EXIT_OK, "{}", last.stderr);
    assert_eq!(report_json(&dir)["coverage"]["numerator"], 7);
}

#[test]
fn review_with_flags_records_one_decision() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("flags");
    init_catwatch(&dir);
    let d = dir.to_str().unwrap();
    assert_eq!(run_replay(&dir, &catwatch("replay.json"), &[]).code, EXIT_OK);

    let missing_reason = seal(&["review", "--session", d, "--goal", "6.2", "--decision", "discard"], "");
    assert_eq!(missing_reason.code, EXIT_FAILURE);
    assert!(missing_reason.stderr.contains("MissingReason"));

    let out = seal(
        &["review", "--session", d, "--goal", "6.2", "--decision", "discard", "--reason", "duplicate of 6.1"],
        "",
    );
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let report = report_json(&dir);
    assert_eq!(report["coverage"]["numerator"], 6);
    assert_eq!(report["coverage"]["denominator"], 12);
    let unknown = seal(&["review", "--session", d, "--goal", "9.9", "--decision", "accept"], "");
    assert_eq!(unknown.code, EXIT_FAILURE);
    assert!(unknown.stderr.contains("UnknownGoal"));
}

#[test]
fn terminal_review_asks_for_a_discard_reason() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("reasons");
    init_catwatch(&dir);
    let d = dir.to_str().unwrap();
    assert_eq!(run_replay(&dir, &catwatch("replay.json"), &["--interactive"]).code, EXIT_SUSPENDED);
    // accept 1-3, discard 4 (empty reason re-asked), then quit.
    let out = seal(&["review", "--session", d], "a\na\nx\na\nd\n\nsecurity is out of scope\nq\n");
    assert_eq!(out.code, EXIT_OK);
    assert!(out.stdout.contains("please answer"));
    assert!(out.stdout.contains("2 goal(s) still awaiting review"), "{}", out.stdout);
    let session = Store::new(tmp.path()).load("reasons").unwrap();
    let four = session.goals.get(&"4".parse().unwrap()).unwrap();
    assert_eq!(four.discard_reason.as_deref(), Some("security is out of scope"));
    assert_eq!(session.decisions.len(), 4);
}

struct NoInput;

impl Read for NoInput {
    fn read(&mut self, _: &mut [u8]) -> io::Result<usize> {
        panic!("non-interactive runs must not read input")
    }
}

impl BufRead for NoInput {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        panic!("non-interactive runs must not read input")
    }

    fn consume(&mut self, _: usize) {}
}

#[test]
fn non_interactive_runs_never_read_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("quiet");
    init_catwatch(&dir);
    let fixture = catwatch("replay.json");
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let mut console = Console {
        stdin: &mut NoInput,
        stdout: &mut stdout,
        stderr: &mut stderr,
        tty: true,
    };
    let code = run_command(
        ["seal", "run", "--session", dir.to_str().unwrap(), "--fixture", fixture.to_str().unwrap(), "--non-interactive"],
        &mut console,
    );
    assert_eq!(code, EXIT_OK);
    assert!(String::from_utf8(stderr).unwrap().contains("round 1"));
}

#[test]
fn pipeline_failures_exit_two_and_are_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("broken");
    init_catwatch(&dir);
    let fixture = tmp.path().join("p1-only.json");
    let full: serde_json::Value = serde_json::from_str(&common::read_catwatch("replay.json")).unwrap();
    let mut trimmed = full.clone();
    trimmed["entries"]
        .as_array_mut()
        .unwrap()
        .retain(|e| e["stage"] != "P1");
    fs::write(&fixture, trimmed.to_string()).unwrap();
    let out = run_replay(&dir, &fixture, &[]);
    assert_eq!(out.code, EXIT_FAILURE);
    assert!(out.stderr.contains("TaskBudgetExhausted"), "{}", out.stderr);
    let log = fs::read_to_string(dir.join("events.log")).unwrap();
    assert!(log.lines().last().unwrap().contains("run_failed"));
    // Failed attempts are kept in the transcript.
    assert_eq!(fs::read_dir(dir.join("transcript")).unwrap().count(), 3);
}

#[test]
fn malformed_fixture_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("m");
    init_catwatch(&dir);
    let fixture = tmp.path().join("bad.json");
    fs::write(&fixture, "{not json").unwrap();
    let out = run_replay(&dir, &fixture, &[]);
    assert_eq!(out.code, EXIT_FAILURE);
    assert!(out.stderr.contains("MalformedFixture"), "{}", out.stderr);
}
