//! Local restricted-subprocess sandbox.
//!
//! Each sandbox id maps to its own working directory under `root`. Commands
//! run through `sh -c` with `ulimit` CPU and file-size caps, a scrubbed
//! environment and a wall-clock timeout that kills the whole process group.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use url::Url;
use wait_timeout::ChildExt;

use super::http::get_bytes;
use super::{BackendOutput, FileBackend, SandboxBackend, ToolFailure};
use crate::trajectory::ErrorClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceLimits {
    pub cpu_seconds: u64,
    pub max_file_kb: u64,
    pub max_download_bytes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            cpu_seconds: 60,
            max_file_kb: 512 * 1024,
            max_download_bytes: 256 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalSandbox {
    root: PathBuf,
    /// Host directory that upload/download paths are resolved against.
    local_root: PathBuf,
    limits: ResourceLimits,
    python: String,
}

impl LocalSandbox {
    pub fn new(root: impl Into<PathBuf>, local_root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            local_root: local_root.into(),
            limits: ResourceLimits::default(),
            python: "python3".into(),
        }
    }

    pub fn with_limits(mut self, limits: ResourceLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_python(mut self, python: impl Into<String>) -> Self {
        self.python = python.into();
        self
    }

    fn dir(&self, sandbox_id: &str) -> PathBuf {
        let safe: String = sandbox_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        self.root.join(safe)
    }

    fn run(&self, sandbox_id: &str, program: &str, args: &[&str], timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        let dir = self.dir(sandbox_id);
        let script = format!(
            "ulimit -t {} 2>/dev/null; ulimit -f {} 2>/dev/null; exec \"$0\" \"$@\"",
            self.limits.cpu_seconds, self.limits.max_file_kb
        );
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&script)
            .arg(program)
            .args(args)
            .current_dir(&dir)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()))
            .env("HOME", &dir)
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let mut child = cmd
            .spawn()
            .map_err(|e| ToolFailure::tool(format!("failed to start process: {e}")))?;

        let mut stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let status = child
            .wait_timeout(timeout)
            .map_err(|e| ToolFailure::tool(format!("wait failed: {e}")))?;
        let timed_out = status.is_none();
        if timed_out {
            // The child leads its own process group; take the whole group down.
            if let Ok(pgid) = i32::try_from(child.id()) {
                if pgid > 0 {
                    unsafe { libc::kill(-pgid, libc::SIGKILL) };
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        }
        let out = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
        let err = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
        let mut text = out;
        if !err.is_empty() {
            if !text.is_empty() && !text.ends_with('\n') {
                text.push('\n');
            }
            text.push_str("[stderr]\n");
            text.push_str(&err);
        }
        if timed_out {
            return Err(ToolFailure::new(ErrorClass::Timeout, format!("process exceeded {timeout:?}"))
                .with_partial(text));
        }
        if let Some(code) = status.and_then(|s| s.code()).filter(|c| *c != 0) {
            if !text.is_empty() && !text.ends_with('\n') {
                text.push('\n');
            }
            text.push_str(&format!("[exit code {code}]"));
        }
        Ok(BackendOutput::text(text))
    }

    fn inside(&self, base: &Path, rel: &str) -> Result<PathBuf, ToolFailure> {
        let p = Path::new(rel);
        if p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(ToolFailure::tool(format!("path `{rel}` must be relative and stay inside its root")));
        }
        Ok(base.join(p))
    }
}

impl SandboxBackend for LocalSandbox {
    fn create(&self, sandbox_id: &str) -> Result<(), ToolFailure> {
        std::fs::create_dir_all(self.dir(sandbox_id))
            .map_err(|e| ToolFailure::tool(format!("cannot create sandbox directory: {e}")))
    }

    fn run_command(&self, sandbox_id: &str, command: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        self.run(sandbox_id, "sh", &["-c", command], timeout)
    }

    fn run_python(&self, sandbox_id: &str, code: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        let python = self.python.clone();
        self.run(sandbox_id, &python, &["-c", code], timeout)
    }

    fn close(&self, sandbox_id: &str) {
        let _ = std::fs::remove_dir_all(self.dir(sandbox_id));
    }
}

impl FileBackend for LocalSandbox {
    fn upload(&self, sandbox_id: &str, local_path: &str, sandbox_path: &str) -> Result<BackendOutput, ToolFailure> {
        let src = self.inside(&self.local_root, local_path)?;
        let dst = self.inside(&self.dir(sandbox_id), sandbox_path)?;
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ToolFailure::tool(e.to_string()))?;
        }
        let n = std::fs::copy(&src, &dst)
            .map_err(|e| ToolFailure::tool(format!("upload of {local_path} failed: {e}")))?;
        Ok(BackendOutput::text(format!("uploaded {local_path} to {sandbox_path} ({n} bytes)")))
    }

    fn download(&self, sandbox_id: &str, sandbox_path: &str, local_path: &str) -> Result<BackendOutput, ToolFailure> {
        let src = self.inside(&self.dir(sandbox_id), sandbox_path)?;
        let dst = self.inside(&self.local_root, local_path)?;
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ToolFailure::tool(e.to_string()))?;
        }
        let n = std::fs::copy(&src, &dst)
            .map_err(|e| ToolFailure::tool(format!("download of {sandbox_path} failed: {e}")))?;
        Ok(BackendOutput::text(format!("saved {sandbox_path} to {local_path} ({n} bytes)")))
    }

    fn fetch_url(&self, sandbox_id: &str, url: &Url, sandbox_path: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        let dst = self.inside(&self.dir(sandbox_id), sandbox_path)?;
        let bytes = get_bytes(url.as_str(), timeout, self.limits.max_download_bytes)?;
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ToolFailure::tool(e.to_string()))?;
        }
        std::fs::write(&dst, &bytes).map_err(|e| ToolFailure::tool(e.to_string()))?;
        Ok(BackendOutput::text(format!("downloaded {url} to {sandbox_path} ({} bytes)", bytes.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox() -> (tempfile::TempDir, LocalSandbox) {
        let tmp = tempfile::tempdir().unwrap();
        let sb = LocalSandbox::new(tmp.path().join("boxes"), tmp.path().join("host"));
        std::fs::create_dir_all(tmp.path().join("host")).unwrap();
        (tmp, sb)
    }

    #[test]
    fn runs_commands_in_its_own_directory() {
        let (_tmp, sb) = sandbox();
        sb.create("a").unwrap();
        sb.create("b").unwrap();
        sb.run_command("a", "echo hi > f.txt", Duration::from_secs(10)).unwrap();
        let out = sb.run_command("a", "cat f.txt", Duration::from_secs(10)).unwrap();
        assert_eq!(out.content, "hi\n");
        let out = sb.run_command("b", "cat f.txt", Duration::from_secs(10)).unwrap();
        assert!(out.content.contains("[exit code"));
    }

    #[test]
    fn timeout_kills_and_reports() {
        let (_tmp, sb) = sandbox();
        sb.create("a").unwrap();
        let err = sb
            .run_command("a", "echo start; sleep 30", Duration::from_millis(300))
            .unwrap_err();
        assert_eq!(err.class, ErrorClass::Timeout);
        assert_eq!(err.partial.as_deref(), Some("start\n"));
    }

    #[test]
    fn paths_cannot_escape() {
        let (_tmp, sb) = sandbox();
        sb.create("a").unwrap();
        assert!(sb.upload("a", "../etc/passwd", "x").is_err());
        assert!(sb.download("a", "/etc/passwd", "x").is_err());
    }

    #[test]
    fn upload_and_download_roundtrip() {
        let (tmp, sb) = sandbox();
        sb.create("a").unwrap();
        std::fs::write(tmp.path().join("host/in.txt"), "data").unwrap();
        sb.upload("a", "in.txt", "sub/in.txt").unwrap();
        sb.download("a", "sub/in.txt", "out.txt").unwrap();
        assert_eq!(std::fs::read_to_string(tmp.path().join("host/out.txt")).unwrap(), "data");
    }
}
