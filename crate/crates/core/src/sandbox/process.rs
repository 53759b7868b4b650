use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;
use tracing::debug;

use super::{
    check_args, parse_report, Sandbox, SandboxError, SandboxResult, SandboxSpec, TestReport,
    TIMEOUT_EXIT_CODE,
};
use crate::build::ToolPackage;
use crate::parser::truncate_chars;

/// Environment variable naming the JSON argument file handed to a tool.
pub const TOOL_ARGS_ENV: &str = "TOOL_ARGS_FILE";

pub const TOOL_FILE: &str = "tool.py";
pub const TEST_FILE: &str = "test_tool.py";
const ARGS_FILE: &str = "args.json";

/// Child-process sandbox.
#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    spec: SandboxSpec,
}

impl ProcessSandbox {
    pub fn new(spec: SandboxSpec) -> Result<Self, SandboxError> {
        spec.validate()?;
        fs::create_dir_all(&spec.workdir)?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SandboxSpec {
        &self.spec
    }

    fn private_dir(&self) -> Result<TempDir, SandboxError> {
        Ok(tempfile::Builder::new()
            .prefix("toolforge-exec-")
            .tempdir_in(&self.spec.workdir)?)
    }

    fn finish(&self, dir: TempDir) {
        if self.spec.keep_workdir {
            let kept = dir.keep();
            debug!(path = %kept.display(), "kept sandbox workdir");
        }
    }

    fn run(
        &self,
        command: &[String],
        cwd: &Path,
        env: &BTreeMap<&str, String>,
    ) -> Result<SandboxResult, SandboxError> {
        let mut cmd = Command::new(&command[0]);
        cmd.args(&command[1..])
            .current_dir(cwd)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()))
            .env("HOME", cwd)
            .env("TMPDIR", cwd)
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .envs(env.iter().map(|(k, v)| (*k, v.as_str())))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        confine(&mut cmd, self.spec.memory_cap_bytes, self.spec.network_allowed);

        let start = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::SpawnFailure(format!("{}: {e}", command[0])))?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());
        let timeout = Duration::from_millis(self.spec.timeout_ms);
        let (status, timed_out) = wait_with_timeout(&mut child, timeout)?;
        let duration_ms = start.elapsed().as_millis() as u64;
        let stdout = stdout.join().unwrap_or_default();
        let stderr = stderr.join().unwrap_or_default();
        let exit_code = if timed_out { TIMEOUT_EXIT_CODE } else { status };
        Ok(SandboxResult {
            exit_code,
            stdout: truncate_chars(&stdout, self.spec.stream_cap),
            stderr: truncate_chars(&stderr, self.spec.stream_cap),
            timed_out,
            duration_ms,
        })
    }
}

impl Sandbox for ProcessSandbox {
    fn execute_tool(&self, pkg: &ToolPackage, args: &Value) -> Result<SandboxResult, SandboxError> {
        check_args(pkg, args)?;
        let dir = self.private_dir()?;
        let tool = dir.path().join(TOOL_FILE);
        let args_path = dir.path().join(ARGS_FILE);
        fs::write(&tool, &pkg.code)?;
        fs::write(&args_path, serde_json::to_vec(args).expect("json serializes"))?;
        let mut command = self.spec.interpreter_command.clone();
        command.push(tool.display().to_string());
        let env = BTreeMap::from([(TOOL_ARGS_ENV, args_path.display().to_string())]);
        let result = self.run(&command, dir.path(), &env);
        self.finish(dir);
        result
    }

    fn run_tests(&self, code: &str, test_script: &str) -> Result<TestReport, SandboxError> {
        let dir = self.private_dir()?;
        let tool = dir.path().join(TOOL_FILE);
        let tests = dir.path().join(TEST_FILE);
        fs::write(&tool, code)?;
        fs::write(&tests, test_script)?;
        let mut command = self.spec.harness_command.clone();
        command.push(tool.display().to_string());
        command.push(tests.display().to_string());
        let result = self.run(&command, dir.path(), &BTreeMap::new());
        self.finish(dir);
        Ok(parse_report(&result?))
    }
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut pipe) = pipe {
            let _ = pipe.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> Result<(i32, bool), SandboxError> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((exit_code(status), false));
        }
        if Instant::now() >= deadline {
            kill_group(child);
            let status = child.wait()?;
            return Ok((exit_code(status), true));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

#[cfg(unix)]
fn kill_group(child: &mut Child) {
    // The child leads its own process group, so this also reaps grandchildren.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_group(child: &mut Child) {
    let _ = child.kill();
}

#[cfg(unix)]
fn confine(cmd: &mut Command, memory_cap: u64, network_allowed: bool) {
    use std::os::unix::process::CommandExt;
    cmd.process_group(0);
    unsafe {
        cmd.pre_exec(move || {
            if memory_cap > 0 {
                let limit = libc::rlimit {
                    rlim_cur: memory_cap as libc::rlim_t,
                    rlim_max: memory_cap as libc::rlim_t,
                };
                if libc::setrlimit(libc::RLIMIT_AS, &limit) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
            }
            #[cfg(target_os = "linux")]
            if !network_allowed {
                // Needs CAP_SYS_ADMIN; without it the child keeps the host network.
                let _ = libc::unshare(libc::CLONE_NEWNET);
            }
            Ok(())
        });
    }
}

#[cfg(not(unix))]
fn confine(_: &mut Command, _: u64, _: bool) {}
