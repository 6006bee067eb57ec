use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn arachne(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arachne"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

const RUN: &str = r#"{"version":1,"patient":{"kind":"persona","id":0},"output":"run"}"#;

#[test]
fn run_writes_a_replayable_trace() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "run.json", RUN);
    let out = arachne(&["run", "run.json", "--seed", "4"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["meta.json", "steps.csv", "eda.csv"] {
        assert!(tmp.path().join("run").join(f).is_file(), "{f}");
    }
    let out = arachne(&["replay", "run"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("140 steps"));
}

#[test]
fn same_seed_gives_identical_steps() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "run.json", RUN);
    assert_eq!(code(&arachne(&["run", "run.json", "--seed", "8", "--out", "a"], tmp.path())), 0);
    assert_eq!(code(&arachne(&["run", "run.json", "--seed", "8", "--out", "b"], tmp.path())), 0);
    assert_eq!(code(&arachne(&["run", "run.json", "--seed", "9", "--out", "c"], tmp.path())), 0);
    let a = fs::read(tmp.path().join("a/steps.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/steps.csv")).unwrap();
    let c = fs::read(tmp.path().join("c/steps.csv")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn missing_seed_is_derived_and_printed() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "run.json", RUN);
    let out = arachne(&["--json", "run", "run.json"], tmp.path());
    assert_eq!(code(&out), 0);
    let err = stderr(&out);
    let printed: u64 = err
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("{err}"));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["seed"], printed);
    assert_eq!(summary["steps"], 140);
}

#[test]
fn schema_errors_exit_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "bad.json",
        r#"{"version":1,"patient":{"kind":"persona","id":0},"output":"o","sede":3}"#,
    );
    let out = arachne(&["run", "bad.json"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sede"), "{}", stderr(&out));

    write(tmp.path(), "nopatient.json", r#"{"version":1,"output":"o"}"#);
    assert_eq!(code(&arachne(&["run", "nopatient.json"], tmp.path())), 2);
    assert_eq!(code(&arachne(&["run", "absent.json"], tmp.path())), 2);
    assert_eq!(code(&arachne(&["frobnicate"], tmp.path())), 2);
}

#[test]
fn experiment_report_and_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "exp.json",
        r#"{"version":1,"population":[{"kind":"personas"}],"seed":1,"output":"exp"}"#,
    );
    let out = arachne(&["experiment", "exp.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("exp/report.json")).unwrap()).unwrap();
    let mse: Vec<_> = report["comparisons"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["metric"] == "mse")
        .collect();
    assert_eq!(mse.len(), 2);
    for c in mse {
        assert!(c["rl_mean"].as_f64().is_some() && c["rules_mean"].as_f64().is_some());
        assert_eq!(c["pairs"], 8);
    }
    assert_eq!(report["participants"].as_array().unwrap().len(), 8);
    assert!(report["participants"][0]["segments"].as_array().unwrap().len() == 4);
    assert!(tmp.path().join("exp/report.md").is_file());

    let out = arachne(&["analyze", "exp", "--out", "again"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let again: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("again/report.json")).unwrap()).unwrap();
    let clustering = &again["clustering"];
    assert!(clustering["elbow"]["k"].as_u64().unwrap() >= 1);
    let k = clustering["model"]["k"].as_u64().unwrap() as usize;
    assert_eq!(clustering["matrix"].as_array().unwrap().len(), k);

    let out = arachne(&["analyze", "exp/persona-3", "--out", "single"], tmp.path());
    assert_eq!(code(&out), 0);
    let single: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("single/report.json")).unwrap()).unwrap();
    assert!(single.get("clustering").is_none());
    assert!(single["notices"][0].as_str().unwrap().contains("clustering skipped"));

    let steps = tmp.path().join("exp/persona-5/steps.csv");
    let text = fs::read_to_string(&steps).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[6] = "garbage".into();
    fs::write(&steps, lines.join("\n")).unwrap();
    let out = arachne(&["analyze", "exp"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("steps.csv:7"), "{}", stderr(&out));
}

#[test]
fn experiment_replicates_and_empty_population() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "exp.json",
        r#"{"version":1,"population":[{"kind":"persona","id":1},{"kind":"random","seed":2}],"output":"exp"}"#,
    );
    let out = arachne(&["--json", "experiment", "exp.json", "--seed", "3", "--seeds", "5"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["replicates"], 5);
    assert_eq!(summary["report"]["participants"].as_array().unwrap().len(), 10);
    for r in 0..5 {
        assert!(tmp.path().join(format!("exp/rep{r}/persona-1/steps.csv")).is_file());
    }

    write(tmp.path(), "empty.json", r#"{"version":1,"population":[],"output":"e"}"#);
    assert_eq!(code(&arachne(&["experiment", "empty.json", "--seed", "1"], tmp.path())), 2);
}

#[test]
fn replay_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "run.json", RUN);
    assert_eq!(code(&arachne(&["run", "run.json", "--seed", "2"], tmp.path())), 0);
    let steps = tmp.path().join("run/steps.csv");
    let text = fs::read_to_string(&steps).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = &lines[10];
    let swapped = if row.contains("color+") {
        row.replace("color+", "color-")
    } else {
        let fields: Vec<&str> = row.split(',').collect();
        let action = fields[fields.len() - 5];
        row.replace(&format!(",{action},"), ",color+,")
    };
    assert_ne!(&swapped, row);
    lines[10] = swapped;
    fs::write(&steps, lines.join("\n") + "\n").unwrap();
    let out = arachne(&["replay", "run"], tmp.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("step 9"), "{}", stderr(&out));

    fs::create_dir(tmp.path().join("empty")).unwrap();
    assert_eq!(code(&arachne(&["replay", "empty"], tmp.path())), 2);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn get(port: u16, path: &str) -> Option<String> {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut body = String::new();
    s.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn serve_lists_sessions_and_rejects_busy_ports() {
    let tmp = tempfile::tempdir().unwrap();
    let port = free_port();
    let bind = format!("127.0.0.1:{port}");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_arachne"))
            .args(["serve", "--bind", &bind, "--manual", "--traces", "t"])
            .current_dir(tmp.path())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(20);
    let response = loop {
        if let Some(r) = get(port, "/sessions") {
            break r;
        }
        assert!(Instant::now() < deadline, "service did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.trim_end().ends_with("[]"), "{response}");

    let out = arachne(&["serve", "--bind", &bind], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cannot bind"));
}

#[test]
fn help_documents_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = arachne(&["serve", "--help"], tmp.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--manual") && text.contains("--bind"));
    let text = String::from_utf8_lossy(&arachne(&["experiment", "--help"], tmp.path()).stdout).into_owned();
    assert!(text.contains("--seeds") && text.contains("--json"));
}
