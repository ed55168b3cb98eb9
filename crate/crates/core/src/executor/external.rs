//! Client side of the worker protocol: one long-lived child process, one
//! request in flight at a time.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::protocol::{self, Request, Response, PROTOCOL_VERSION};
use super::{DatasetHandle, Executor, ExecutorError, StepOutput, StepRequest, TimeMode};
use crate::graph::PipelineSpec;

/// Handle id of the raw input dataset.
pub const INPUT_HANDLE: &str = "input";
/// Size charged against the cache for every worker-held dataset.
pub const NOMINAL_HANDLE_BYTES: u64 = 1 << 20;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn send(&mut self, req: &Request) -> Result<(), ExecutorError> {
        self.stdin
            .write_all(protocol::encode(req).as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| ExecutorError::WorkerExited(format!("write failed: {e}")))
    }

    fn recv(&self, timeout: Duration) -> Result<Option<Response>, ExecutorError> {
        match self.lines.recv_timeout(timeout) {
            Ok(line) => protocol::decode_response(&line)
                .map(Some)
                .map_err(|e| ExecutorError::ProtocolViolation(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(ExecutorError::WorkerExited("stdout closed".into())),
        }
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalExecutor {
    argv: Vec<String>,
    digest: String,
    worker: Option<Worker>,
    time_mode: TimeMode,
    /// Bumped on every respawn so stale handles never match a cache key.
    epoch: u64,
    next_req: u64,
    default_timeout: f64,
}

impl std::fmt::Debug for ExternalExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalExecutor")
            .field("argv", &self.argv)
            .field("epoch", &self.epoch)
            .field("time_mode", &self.time_mode)
            .finish()
    }
}

/// Starts `command` (split with shell quoting rules) and performs the handshake.
pub fn spawn_external(command: &str, spec: &PipelineSpec, per_run_timeout: f64) -> Result<ExternalExecutor, ExecutorError> {
    let argv = shlex::split(command)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| ExecutorError::HandshakeFailure(format!("cannot parse command `{command}`")))?;
    let digest = protocol::spec_digest(spec);
    let (worker, time_mode) = start(&argv, &digest)?;
    Ok(ExternalExecutor {
        argv,
        digest,
        worker: Some(worker),
        time_mode,
        epoch: 0,
        next_req: 1,
        default_timeout: per_run_timeout,
    })
}

fn start(argv: &[String], digest: &str) -> Result<(Worker, TimeMode), ExecutorError> {
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| ExecutorError::HandshakeFailure(format!("spawn `{}`: {e}", argv[0])))?;
    let stdin = child.stdin.take().expect("stdin is piped");
    let stdout = child.stdout.take().expect("stdout is piped");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut worker = Worker { child, stdin, lines: rx };
    let hello = Request::Hello { version: PROTOCOL_VERSION, spec_digest: digest.to_string() };
    let reply = worker.send(&hello).and_then(|_| worker.recv(HANDSHAKE_TIMEOUT));
    match reply {
        Ok(Some(Response::HelloOk { time_mode })) => Ok((worker, time_mode)),
        other => {
            worker.kill();
            let why = match other {
                Ok(Some(r)) => format!("unexpected reply {r:?}"),
                Ok(None) => "no reply".into(),
                Err(e) => e.to_string(),
            };
            Err(ExecutorError::HandshakeFailure(why))
        }
    }
}

impl ExternalExecutor {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn per_run_timeout(&self) -> f64 {
        self.default_timeout
    }

    fn ensure_worker(&mut self) -> Result<&mut Worker, ExecutorError> {
        if self.worker.is_none() {
            let (worker, mode) = start(&self.argv, &self.digest)?;
            if mode != self.time_mode {
                worker.kill();
                return Err(ExecutorError::HandshakeFailure("time mode changed across respawn".into()));
            }
            self.epoch += 1;
            self.worker = Some(worker);
        }
        Ok(self.worker.as_mut().expect("just ensured"))
    }

    fn discard_worker(&mut self) {
        if let Some(w) = self.worker.take() {
            w.kill();
        }
    }
}

impl Executor for ExternalExecutor {
    fn time_mode(&self) -> TimeMode {
        self.time_mode
    }

    fn dataset_id(&self) -> String {
        format!("external-{}-epoch{}", &self.digest[..16], self.epoch)
    }

    fn input_handle(&self) -> DatasetHandle {
        DatasetHandle::input(INPUT_HANDLE, NOMINAL_HANDLE_BYTES)
    }

    fn run_step(&mut self, request: &StepRequest<'_>, timeout_seconds: f64) -> Result<StepOutput, ExecutorError> {
        let req_id = self.next_req;
        self.next_req += 1;
        let time_mode = self.time_mode;
        let worker = self.ensure_worker()?;
        worker.send(&Request::RunStep {
            req_id,
            step: request.step,
            algorithm: request.algorithm.to_string(),
            hyperparams: request.hyperparams.clone(),
            input_handle: request.input.id.clone(),
            is_last: request.is_last,
        })?;
        let budget = timeout_seconds.max(0.0);
        // Simulated workers report accounted time, so the wall wait is only a
        // backstop against hangs.
        let wait = match time_mode {
            TimeMode::Wall => Duration::from_secs_f64(budget.min(1e9)),
            TimeMode::Simulated => HANDSHAKE_TIMEOUT.max(Duration::from_secs_f64(budget.min(1e9))),
        };
        let reply = match worker.recv(wait) {
            Ok(r) => r,
            Err(e) => {
                self.discard_worker();
                return Err(e);
            }
        };
        match reply {
            None => {
                self.discard_worker();
                Err(ExecutorError::StepTimeout { seconds: budget })
            }
            Some(resp) if resp.req_id() != Some(req_id) => {
                self.discard_worker();
                Err(ExecutorError::ProtocolViolation(format!("expected reply to request {req_id}, got {resp:?}")))
            }
            Some(Response::StepErr { message, .. }) => Err(ExecutorError::StepFailed(message)),
            Some(Response::StepOk { output_handle, seconds, metric, .. }) => {
                if seconds > budget {
                    return Err(ExecutorError::StepTimeout { seconds: budget });
                }
                if request.is_last != metric.is_some() {
                    self.discard_worker();
                    return Err(ExecutorError::ProtocolViolation(format!(
                        "metric must be present iff is_last (is_last = {})",
                        request.is_last
                    )));
                }
                Ok(StepOutput { handle: DatasetHandle::output(output_handle, NOMINAL_HANDLE_BYTES), seconds, metric })
            }
            Some(Response::HelloOk { .. }) => unreachable!("hello_ok has no req_id"),
        }
    }
}

impl Drop for ExternalExecutor {
    fn drop(&mut self) {
        if let Some(mut w) = self.worker.take() {
            if w.send(&Request::Shutdown).is_ok() {
                for _ in 0..50 {
                    if let Ok(Some(_)) = w.child.try_wait() {
                        return;
                    }
                    thread::sleep(Duration::from_millis(10));
                }
            }
            w.kill();
        }
    }
}
