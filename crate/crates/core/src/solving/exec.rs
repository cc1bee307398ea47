//! Execution of generated scripts.
//!
//! Three bindings share the [`Executor`] trait: [`RunnerExecutor`] shells out to an
//! external sandbox runner and reads its JSON envelope, [`InterpreterExecutor`] runs
//! the interpreter directly with the same confinement rules, and [`StubExecutor`]
//! returns scripted outcomes for tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::process::Command;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT_S: f64 = 30.0;
pub const STREAM_CAP_BYTES: usize = 1 << 20;
const LAUNCH_FAILURE_EXIT: i32 = 127;
const SCRIPT_NAME: &str = "main.py";

/// The runner's one-line JSON result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionEnvelope {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    pub duration_ms: u64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorClass {
    None,
    Syntax,
    Runtime,
    Timeout,
    Launch,
}

impl ErrorClass {
    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::None => "ok",
            ErrorClass::Syntax => "syntax error",
            ErrorClass::Runtime => "runtime error",
            ErrorClass::Timeout => "timeout",
            ErrorClass::Launch => "launch error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub stdout: String,
    pub stderr: String,
    pub exit_status: i32,
    pub duration_ms: u64,
    pub timed_out: bool,
    pub error_class: ErrorClass,
}

impl ExecutionOutcome {
    pub fn success(stdout: impl Into<String>) -> Self {
        ExecutionEnvelope {
            stdout: stdout.into(),
            stderr: String::new(),
            exit_code: 0,
            duration_ms: 0,
            timed_out: false,
        }
        .into()
    }

    pub fn failure(exit_code: i32, stderr: impl Into<String>) -> Self {
        assert!(exit_code != 0, "a failure needs a nonzero exit code");
        ExecutionEnvelope {
            stdout: String::new(),
            stderr: stderr.into(),
            exit_code,
            duration_ms: 0,
            timed_out: false,
        }
        .into()
    }

    pub fn launch_failure(message: impl Into<String>) -> Self {
        Self {
            stdout: String::new(),
            stderr: message.into(),
            exit_status: LAUNCH_FAILURE_EXIT,
            duration_ms: 0,
            timed_out: false,
            error_class: ErrorClass::Launch,
        }
    }

    pub fn is_success(&self) -> bool {
        self.error_class == ErrorClass::None
    }
}

impl From<ExecutionEnvelope> for ExecutionOutcome {
    fn from(env: ExecutionEnvelope) -> Self {
        let error_class = if env.timed_out {
            ErrorClass::Timeout
        } else if env.exit_code == 0 {
            ErrorClass::None
        } else if env.stderr.contains("SyntaxError")
            || env.stderr.contains("IndentationError")
            || env.stderr.contains("TabError")
        {
            ErrorClass::Syntax
        } else if env.exit_code == LAUNCH_FAILURE_EXIT && env.stdout.is_empty() && !env.stderr.contains("Traceback") {
            ErrorClass::Launch
        } else {
            ErrorClass::Runtime
        };
        Self {
            stdout: env.stdout,
            stderr: env.stderr,
            exit_status: if env.timed_out && env.exit_code == 0 { -1 } else { env.exit_code },
            duration_ms: env.duration_ms,
            timed_out: env.timed_out,
            error_class,
        }
    }
}

#[async_trait]
pub trait Executor: Send + Sync {
    /// Runs `code` in a fresh working directory holding copies of `staged` files.
    async fn execute(&self, code: &str, staged: &[PathBuf]) -> Result<ExecutionOutcome>;
}

fn prepare_workdir(code: &str, staged: &[PathBuf]) -> Result<tempfile::TempDir> {
    let dir = tempfile::Builder::new().prefix("graphsolve-run-").tempdir()?;
    let script = dir.path().join(SCRIPT_NAME);
    fs::write(&script, code).map_err(|e| Error::file(&script, e))?;
    for file in staged {
        let name = file
            .file_name()
            .ok_or_else(|| Error::Execution(format!("cannot stage {}", file.display())))?;
        let target = dir.path().join(name);
        fs::copy(file, &target).map_err(|e| Error::file(file, e))?;
    }
    Ok(dir)
}

async fn read_capped<R: AsyncRead + Unpin>(mut reader: R, cap: usize) -> String {
    let mut kept = Vec::new();
    let mut total = 0usize;
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if kept.len() < cap {
                    let take = n.min(cap - kept.len());
                    kept.extend_from_slice(&buf[..take]);
                }
                total += n;
            }
        }
    }
    let mut text = String::from_utf8_lossy(&kept).into_owned();
    if total > cap {
        text.push_str(&format!("\n[truncated: {total} bytes, kept {cap}]"));
    }
    text
}

#[cfg(unix)]
fn kill_group(pid: Option<u32>) {
    if let Some(pid) = pid {
        // SAFETY: signalling a process group we created; failures are ignored.
        unsafe {
            libc::killpg(pid as libc::pid_t, libc::SIGKILL);
        }
    }
}

#[cfg(not(unix))]
fn kill_group(_pid: Option<u32>) {}

#[cfg(unix)]
fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

#[cfg(not(unix))]
fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

struct Captured {
    stdout: String,
    stderr: String,
    exit_code: i32,
    duration: Duration,
    timed_out: bool,
}

/// Spawns `command` in `workdir` with a scrubbed environment and kills the whole
/// process group at `timeout`.
async fn run_confined(
    mut command: Command,
    workdir: &Path,
    timeout: Duration,
    cap: usize,
) -> std::io::Result<Captured> {
    command
        .current_dir(workdir)
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()))
        .env("HOME", workdir)
        .env("LANG", "C.UTF-8")
        .env("LC_ALL", "C.UTF-8")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true);
    #[cfg(unix)]
    command.process_group(0);

    let start = Instant::now();
    let mut child = command.spawn()?;
    let pid = child.id();
    let stdout = tokio::spawn(read_capped(child.stdout.take().expect("piped stdout"), cap));
    let stderr = tokio::spawn(read_capped(child.stderr.take().expect("piped stderr"), cap));

    let (status, timed_out) = match tokio::time::timeout(timeout, child.wait()).await {
        Ok(status) => (status?, false),
        Err(_) => {
            kill_group(pid);
            let _ = child.start_kill();
            (child.wait().await?, true)
        }
    };
    let duration = start.elapsed();
    // Background children may still hold the pipes open.
    kill_group(pid);
    let grace = Duration::from_secs(2);
    let stdout = tokio::time::timeout(grace, stdout).await.ok().and_then(|r| r.ok()).unwrap_or_default();
    let stderr = tokio::time::timeout(grace, stderr).await.ok().and_then(|r| r.ok()).unwrap_or_default();
    let mut exit_code = exit_code_of(status);
    if timed_out && exit_code == 0 {
        exit_code = 128 + 9;
    }
    Ok(Captured {
        stdout,
        stderr,
        exit_code,
        duration,
        timed_out,
    })
}

/// Runs the interpreter directly on each script.
#[derive(Debug, Clone)]
pub struct InterpreterExecutor {
    command: Vec<String>,
    timeout: Duration,
}

impl InterpreterExecutor {
    /// `command` is the interpreter invocation, e.g. `["python3"]`; the script path
    /// is appended.
    pub fn new(command: Vec<String>, timeout_s: f64) -> Self {
        assert!(!command.is_empty(), "interpreter command must not be empty");
        Self {
            command,
            timeout: Duration::from_secs_f64(timeout_s),
        }
    }

    pub fn python(timeout_s: f64) -> Self {
        Self::new(vec!["python3".into()], timeout_s)
    }
}

#[async_trait]
impl Executor for InterpreterExecutor {
    async fn execute(&self, code: &str, staged: &[PathBuf]) -> Result<ExecutionOutcome> {
        let workdir = prepare_workdir(code, staged)?;
        let mut command = Command::new(&self.command[0]);
        command.args(&self.command[1..]).arg(SCRIPT_NAME);
        match run_confined(command, workdir.path(), self.timeout, STREAM_CAP_BYTES).await {
            Ok(c) => Ok(ExecutionEnvelope {
                stdout: c.stdout,
                stderr: c.stderr,
                exit_code: c.exit_code,
                duration_ms: c.duration.as_millis() as u64,
                timed_out: c.timed_out,
            }
            .into()),
            Err(e) => Ok(ExecutionOutcome::launch_failure(format!(
                "failed to launch `{}`: {e}",
                self.command.join(" ")
            ))),
        }
    }
}

/// Delegates to an external runner invoked as `runner <code-file> --timeout <seconds>`,
/// which prints one JSON envelope line on stdout. A nonzero runner exit is a runner
/// fault, not a script failure.
#[derive(Debug, Clone)]
pub struct RunnerExecutor {
    command: Vec<String>,
    timeout_s: f64,
}

impl RunnerExecutor {
    pub fn new(command: Vec<String>, timeout_s: f64) -> Self {
        assert!(!command.is_empty(), "runner command must not be empty");
        Self { command, timeout_s }
    }
}

/// Parses the last nonempty line of runner output as an envelope.
pub fn parse_envelope(runner_stdout: &str) -> Result<ExecutionEnvelope> {
    let line = runner_stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Execution("runner produced no envelope".into()))?;
    serde_json::from_str(line).map_err(|e| Error::Execution(format!("malformed envelope: {e}")))
}

#[async_trait]
impl Executor for RunnerExecutor {
    async fn execute(&self, code: &str, staged: &[PathBuf]) -> Result<ExecutionOutcome> {
        let workdir = prepare_workdir(code, staged)?;
        let script = workdir.path().join(SCRIPT_NAME);
        let mut command = Command::new(&self.command[0]);
        command
            .args(&self.command[1..])
            .arg(&script)
            .arg("--timeout")
            .arg(self.timeout_s.to_string());
        // The runner enforces the script timeout itself; this bound only catches a hung runner.
        let outer = Duration::from_secs_f64(self.timeout_s + 30.0);
        let captured = run_confined(command, workdir.path(), outer, 4 * STREAM_CAP_BYTES)
            .await
            .map_err(|e| Error::Execution(format!("failed to launch runner: {e}")))?;
        if captured.timed_out {
            return Err(Error::Execution("runner did not exit".into()));
        }
        if captured.exit_code != 0 {
            return Err(Error::Execution(format!(
                "runner exited with {}: {}",
                captured.exit_code,
                captured.stderr.trim()
            )));
        }
        Ok(parse_envelope(&captured.stdout)?.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default)]
    pub timed_out: bool,
}

impl StubRule {
    fn outcome(&self) -> ExecutionOutcome {
        ExecutionEnvelope {
            stdout: self.stdout.clone(),
            stderr: self.stderr.clone(),
            exit_code: self.exit_code,
            duration_ms: 0,
            timed_out: self.timed_out,
        }
        .into()
    }
}

/// Maps code text to scripted outcomes: the first rule whose pattern occurs in the
/// code wins; unmatched code fails with a runtime error.
#[derive(Debug, Default)]
pub struct StubExecutor {
    rules: Vec<(String, ExecutionOutcome)>,
    executed: Mutex<Vec<String>>,
}

impl StubExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, pattern: impl Into<String>, outcome: ExecutionOutcome) -> Self {
        self.rules.push((pattern.into(), outcome));
        self
    }

    pub fn from_rules(rules: &[StubRule]) -> Self {
        Self {
            rules: rules.iter().map(|r| (r.pattern.clone(), r.outcome())).collect(),
            executed: Mutex::new(Vec::new()),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let rules: Vec<StubRule> = serde_json::from_str(&raw)?;
        Ok(Self::from_rules(&rules))
    }

    /// Codes executed so far, in call order.
    pub fn executed(&self) -> Vec<String> {
        self.executed.lock().expect("stub log poisoned").clone()
    }
}

#[async_trait]
impl Executor for StubExecutor {
    async fn execute(&self, code: &str, _staged: &[PathBuf]) -> Result<ExecutionOutcome> {
        self.executed
            .lock()
            .expect("stub log poisoned")
            .push(code.to_string());
        Ok(self
            .rules
            .iter()
            .find(|(pattern, _)| code.contains(pattern.as_str()))
            .map(|(_, outcome)| outcome.clone())
            .unwrap_or_else(|| ExecutionOutcome::failure(1, "stub: no outcome scripted for this code")))
    }
}
