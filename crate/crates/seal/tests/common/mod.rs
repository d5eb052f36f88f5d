#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;

use seal::cli::{run_command, Console};

pub const CATWATCH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/catwatch");
pub const ACTOR: &str = "Owner of a GitHub account";

pub fn catwatch(name: &str) -> PathBuf {
    Path::new(CATWATCH).join(name)
}

pub fn read_catwatch(name: &str) -> String {
    std::fs::read_to_string(catwatch(name)).unwrap()
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI in-process with `input` as stdin (not a terminal).
pub fn seal(args: &[&str], input: &str) -> Output {
    let mut stdin = input.as_bytes();
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let mut console = Console {
        stdin: &mut stdin,
        stdout: &mut stdout,
        stderr: &mut stderr,
        tty: false,
    };
    let mut argv = vec!["seal"];
    argv.extend_from_slice(args);
    let code = run_command(argv, &mut console);
    Output {
        code,
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

/// `seal init` for the CatWatch inputs into `dir`.
pub fn init_catwatch(dir: &Path) {
    let brief = catwatch("brief.txt");
    let spec = catwatch("swagger.json");
    let out = seal(
        &[
            "init",
            "--brief",
            brief.to_str().unwrap(),
            "--actor",
            ACTOR,
            "--spec",
            spec.to_str().unwrap(),
            "--session",
            dir.to_str().unwrap(),
        ],
        "",
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
}

pub fn run_replay(dir: &Path, fixture: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "-q",
        "--session",
        dir.to_str().unwrap(),
        "--provider",
        "replay",
        "--fixture",
        fixture.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    seal(&args, "")
}

/// A captured HTTP request.
#[derive(Debug, Clone)]
pub struct Captured {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Captured {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Canned response for the mock server.
#[derive(Debug, Clone)]
pub struct Canned {
    pub status: u16,
    pub body: String,
}

impl Canned {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        Canned {
            status,
            body: body.into(),
        }
    }

    pub fn completion(content: &str) -> Self {
        let body = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5}
        });
        Canned::new(200, body.to_string())
    }
}

/// One-connection-at-a-time HTTP server answering from a script. When the
/// script runs out the last response repeats. `gate`, when present, must
/// receive a message before each response is written.
pub struct MockServer {
    pub addr: SocketAddr,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

impl MockServer {
    pub fn start(script: Vec<Canned>, gate: Option<mpsc::Receiver<()>>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        thread::spawn(move || {
            let mut n = 0;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let mut headers = Vec::new();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let mut body = vec![0; length];
                let _ = reader.read_exact(&mut body);
                seen.lock().unwrap().push(Captured {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: String::from_utf8_lossy(&body).into_owned(),
                });
                if let Some(gate) = &gate {
                    if gate.recv().is_err() {
                        return;
                    }
                }
                let canned = script.get(n).or(script.last()).cloned().unwrap();
                n += 1;
                let response = format!(
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    canned.status,
                    canned.body.len(),
                    canned.body
                );
                let _ = stream.write_all(response.as_bytes());
                let _ = stream.flush();
            }
        });
        MockServer { addr, requests }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}
