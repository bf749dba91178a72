//! Confined execution of generated seed scripts.
//!
//! A script runs in a fresh temporary directory with a wall-clock timeout,
//! a file-size limit, and, where the kernel supports it, a Landlock domain
//! that allows writes only beneath that directory and denies TCP bind and
//! connect. A Python audit hook additionally refuses sockets, subprocesses
//! and writes outside the directory.

use std::ffi::CString;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::process::run_captured;
use crate::trace::ExitKind;

pub const DEFAULT_SCRIPT_TIMEOUT_SECS: u64 = 30;
pub const DEFAULT_OUTPUT_CAP: u64 = 16 << 20;
pub const OUTPUT_NAME: &str = "seed.bin";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("script exited with {exit:?}: {stderr}")]
    ScriptCrash { exit: ExitKind, stderr: String },
    #[error("script timed out after {0} s")]
    Timeout(u64),
    #[error("script produced no output file")]
    OutputMissing,
    #[error("script output exceeds {cap} bytes")]
    OutputTooLarge { cap: u64 },
    #[error("interpreter {0} not found")]
    InterpreterNotFound(String),
    #[error("sandbox i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub interpreter: String,
    pub timeout_secs: u64,
    pub output_cap: u64,
    /// Apply Landlock when the kernel offers it.
    pub landlock: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: "python3".into(),
            timeout_secs: DEFAULT_SCRIPT_TIMEOUT_SECS,
            output_cap: DEFAULT_OUTPUT_CAP,
            landlock: true,
        }
    }
}

const BOOTSTRAP: &str = r#"
import os, runpy, sys

_root = os.path.realpath(sys.argv[1])
_script = sys.argv[2]
_out = sys.argv[3]
_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_APPEND | os.O_CREAT | os.O_TRUNC
_BLOCKED = ("subprocess.Popen", "os.system", "os.exec", "os.posix_spawn", "os.spawn", "os.fork", "os.forkpty", "pty.spawn")
_PATH_EVENTS = ("os.remove", "os.rename", "os.rmdir", "os.mkdir", "os.symlink", "os.link", "os.truncate", "os.chmod", "os.chown", "shutil.rmtree", "shutil.copyfile", "shutil.move")

def _inside(path):
    if isinstance(path, int):
        return True
    if isinstance(path, bytes):
        path = os.fsdecode(path)
    full = os.path.realpath(os.path.join(os.getcwd(), os.fspath(path)))
    return full == _root or full.startswith(_root + os.sep)

def _hook(event, args):
    if event.startswith("socket.") or event in _BLOCKED:
        raise PermissionError("sandbox: %s is not allowed" % event)
    if event == "open" and args:
        path, mode, flags = (list(args) + [None, None, 0])[:3]
        writing = (isinstance(mode, str) and any(c in mode for c in "wax+")) or (isinstance(flags, int) and flags & _WRITE_FLAGS)
        if writing and path is not None and not _inside(path):
            raise PermissionError("sandbox: write outside the work directory: %r" % (path,))
    elif event in _PATH_EVENTS:
        for p in args[:2]:
            if isinstance(p, (str, bytes, os.PathLike)) and not _inside(p):
                raise PermissionError("sandbox: %s outside the work directory: %r" % (event, p))

sys.addaudithook(_hook)
sys.argv = [_script, _out]
runpy.run_path(_script, run_name="__main__")
"#;

mod landlock {
    //! Raw Landlock syscalls; only async-signal-safe calls, for `pre_exec`.

    pub const CREATE_RULESET_VERSION: u32 = 1;
    const RULE_PATH_BENEATH: u32 = 1;

    const WRITE_FILE: u64 = 1 << 1;
    const REMOVE_DIR: u64 = 1 << 4;
    const REMOVE_FILE: u64 = 1 << 5;
    const MAKE_CHAR: u64 = 1 << 6;
    const MAKE_DIR: u64 = 1 << 7;
    const MAKE_REG: u64 = 1 << 8;
    const MAKE_SOCK: u64 = 1 << 9;
    const MAKE_FIFO: u64 = 1 << 10;
    const MAKE_BLOCK: u64 = 1 << 11;
    const MAKE_SYM: u64 = 1 << 12;
    const REFER: u64 = 1 << 13;
    const TRUNCATE: u64 = 1 << 14;
    const NET_BIND_TCP: u64 = 1 << 0;
    const NET_CONNECT_TCP: u64 = 1 << 1;

    #[repr(C)]
    struct RulesetAttr {
        handled_access_fs: u64,
        handled_access_net: u64,
    }

    #[repr(C, packed)]
    struct PathBeneathAttr {
        allowed_access: u64,
        parent_fd: i32,
    }

    /// Landlock ABI version, or 0 when unavailable.
    pub fn abi() -> i64 {
        // SAFETY: a version query takes no pointers.
        let v = unsafe {
            libc::syscall(libc::SYS_landlock_create_ruleset, std::ptr::null::<u8>(), 0usize, CREATE_RULESET_VERSION)
        };
        v.max(0)
    }

    fn write_rights(abi: i64) -> u64 {
        let mut r = WRITE_FILE
            | REMOVE_DIR
            | REMOVE_FILE
            | MAKE_CHAR
            | MAKE_DIR
            | MAKE_REG
            | MAKE_SOCK
            | MAKE_FIFO
            | MAKE_BLOCK
            | MAKE_SYM;
        if abi >= 2 {
            r |= REFER;
        }
        if abi >= 3 {
            r |= TRUNCATE;
        }
        r
    }

    /// Restricts the calling process: writes only beneath `dir` (and to
    /// `/dev/null`), no TCP when the ABI covers networking.
    ///
    /// # Safety
    /// Must be called between fork and exec with NUL-terminated paths.
    pub unsafe fn restrict(abi: i64, dir: &std::ffi::CStr, dev_null: &std::ffi::CStr) -> std::io::Result<()> {
        let fs = write_rights(abi);
        let attr = RulesetAttr { handled_access_fs: fs, handled_access_net: NET_BIND_TCP | NET_CONNECT_TCP };
        let size = if abi >= 4 { std::mem::size_of::<RulesetAttr>() } else { std::mem::size_of::<u64>() };
        let ruleset = libc::syscall(libc::SYS_landlock_create_ruleset, &attr as *const RulesetAttr, size, 0u32);
        if ruleset < 0 {
            return Err(std::io::Error::last_os_error());
        }
        let ruleset = ruleset as i32;
        let add = |path: &std::ffi::CStr, access: u64| -> std::io::Result<()> {
            let fd = libc::open(path.as_ptr(), libc::O_PATH | libc::O_CLOEXEC);
            if fd < 0 {
                return Err(std::io::Error::last_os_error());
            }
            let rule = PathBeneathAttr { allowed_access: access, parent_fd: fd };
            let rc = libc::syscall(libc::SYS_landlock_add_rule, ruleset, RULE_PATH_BENEATH, &rule as *const PathBeneathAttr, 0u32);
            libc::close(fd);
            if rc < 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        };
        add(dir, fs)?;
        let file_rights = if abi >= 3 { WRITE_FILE | TRUNCATE } else { WRITE_FILE };
        let _ = add(dev_null, file_rights);
        if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
            return Err(std::io::Error::last_os_error());
        }
        if libc::syscall(libc::SYS_landlock_restrict_self, ruleset, 0u32) != 0 {
            return Err(std::io::Error::last_os_error());
        }
        libc::close(ruleset);
        Ok(())
    }
}

/// Landlock ABI version offered by the running kernel (0 when absent).
pub fn landlock_abi() -> i64 {
    landlock::abi()
}

#[derive(Debug, Clone)]
pub struct ScriptRun {
    pub bytes: Vec<u8>,
    pub stderr: String,
    pub landlock_abi: i64,
}

/// Runs `script_body` under the sandbox and returns the bytes it wrote to
/// the path passed as its first argument.
pub fn run_script(script_body: &str, cfg: &SandboxConfig) -> Result<ScriptRun, SandboxError> {
    let work = tempfile::tempdir()?;
    let dir = work.path().canonicalize()?;
    run_script_in(script_body, cfg, &dir)
}

/// Same as [`run_script`] inside an existing directory.
pub fn run_script_in(script_body: &str, cfg: &SandboxConfig, dir: &Path) -> Result<ScriptRun, SandboxError> {
    let script = dir.join("seed_script.py");
    let boot = dir.join(".bootstrap.py");
    let out: PathBuf = dir.join(OUTPUT_NAME);
    std::fs::write(&script, script_body)?;
    std::fs::write(&boot, BOOTSTRAP)?;
    let _ = std::fs::remove_file(&out);

    let abi = if cfg.landlock { landlock::abi() } else { 0 };
    if cfg.landlock && abi == 0 {
        log::warn!("Landlock unavailable; seed script confined by rlimits and audit hook only");
    }
    let dir_c = CString::new(dir.as_os_str().as_bytes()).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    let dev_null = CString::new("/dev/null").expect("no interior NUL");
    let fsize = cfg.output_cap.saturating_add(1);
    let cpu = cfg.timeout_secs.saturating_add(1);

    let mut cmd = Command::new(&cfg.interpreter);
    cmd.arg("-I")
        .arg("-B")
        .arg(&boot)
        .arg(dir)
        .arg(&script)
        .arg(&out)
        .current_dir(dir)
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
        .env("HOME", dir)
        .env("TMPDIR", dir)
        .env("PYTHONDONTWRITEBYTECODE", "1");
    // SAFETY: the closure only issues setrlimit, open/close, prctl and Landlock syscalls.
    unsafe {
        cmd.pre_exec(move || {
            let f = libc::rlimit { rlim_cur: fsize as libc::rlim_t, rlim_max: fsize as libc::rlim_t };
            libc::setrlimit(libc::RLIMIT_FSIZE, &f);
            let c = libc::rlimit { rlim_cur: cpu as libc::rlim_t, rlim_max: cpu as libc::rlim_t };
            libc::setrlimit(libc::RLIMIT_CPU, &c);
            let zero = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
            libc::setrlimit(libc::RLIMIT_CORE, &zero);
            if abi > 0 {
                landlock::restrict(abi, &dir_c, &dev_null)?;
            }
            Ok(())
        });
    }
    let captured = run_captured(cmd, Duration::from_secs(cfg.timeout_secs)).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SandboxError::InterpreterNotFound(cfg.interpreter.clone())
        } else {
            SandboxError::Io(e)
        }
    })?;
    let stderr = String::from_utf8_lossy(&captured.stderr).into_owned();
    let size = std::fs::metadata(&out).map(|m| m.len()).ok();
    match captured.exit {
        ExitKind::Timeout => return Err(SandboxError::Timeout(cfg.timeout_secs)),
        ExitKind::Signaled(s) if s == libc::SIGXFSZ => return Err(SandboxError::OutputTooLarge { cap: cfg.output_cap }),
        ExitKind::Signaled(s) if s == libc::SIGXCPU => return Err(SandboxError::Timeout(cfg.timeout_secs)),
        ExitKind::Exited(0) => {}
        exit if size.is_some_and(|n| n > cfg.output_cap) => {
            let _ = exit;
            return Err(SandboxError::OutputTooLarge { cap: cfg.output_cap });
        }
        exit => {
            let tail: String = stderr.chars().rev().take(2000).collect::<Vec<_>>().into_iter().rev().collect();
            return Err(SandboxError::ScriptCrash { exit, stderr: tail });
        }
    }
    match size {
        None => Err(SandboxError::OutputMissing),
        Some(n) if n > cfg.output_cap => Err(SandboxError::OutputTooLarge { cap: cfg.output_cap }),
        Some(_) => Ok(ScriptRun { bytes: std::fs::read(&out)?, stderr, landlock_abi: abi }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SandboxConfig {
        SandboxConfig { timeout_secs: 5, ..SandboxConfig::default() }
    }

    #[test]
    fn returns_written_bytes() {
        let run = run_script("import sys\nopen(sys.argv[1], 'wb').write(b'P6 1 1 100 3\\n\\x10\\x00\\x00')\n", &cfg()).unwrap();
        assert_eq!(run.bytes, b"P6 1 1 100 3\n\x10\x00\x00");
    }

    #[test]
    fn infinite_loop_times_out() {
        let c = SandboxConfig { timeout_secs: 1, ..SandboxConfig::default() };
        assert!(matches!(run_script("while True:\n    pass\n", &c), Err(SandboxError::Timeout(1))));
    }

    #[test]
    fn no_output_is_reported() {
        assert!(matches!(run_script("x = 1\n", &cfg()), Err(SandboxError::OutputMissing)));
    }

    #[test]
    fn failing_script_is_a_crash() {
        match run_script("raise SystemExit(3)\n", &cfg()) {
            Err(SandboxError::ScriptCrash { exit: ExitKind::Exited(3), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_cap_is_enforced() {
        let c = SandboxConfig { output_cap: 1000, ..cfg() };
        let r = run_script("import sys\nopen(sys.argv[1], 'wb').write(b'x' * 5000)\n", &c);
        assert!(matches!(r, Err(SandboxError::OutputTooLarge { cap: 1000 })), "{r:?}");
    }

    fn canary_script(canary: &Path, raw_syscall: bool) -> String {
        let write = if raw_syscall {
            // ctypes bypasses the audit hook; only the kernel layer can stop it.
            format!(
                "import ctypes\nlibc = ctypes.CDLL(None)\nfd = libc.open({:?}.encode(), 0o101, 0o644)\nif fd >= 0:\n    libc.write(fd, b'pwned', 5)\n",
                canary.display().to_string()
            )
        } else {
            format!("try:\n    open({:?}, 'w').write('pwned')\nexcept Exception:\n    pass\n", canary.display().to_string())
        };
        format!("import sys\n{write}open(sys.argv[1], 'wb').write(b'ok')\n")
    }

    #[test]
    fn canary_outside_workdir_is_never_written() {
        let outside = tempfile::tempdir().unwrap();
        for raw in [false, true] {
            let canary = outside.path().join(format!("canary_{raw}"));
            let result = run_script(&canary_script(&canary, raw), &cfg());
            assert!(!canary.exists(), "canary written (raw={raw}): {result:?}");
            if !raw || landlock_abi() > 0 {
                assert_eq!(result.unwrap().bytes, b"ok");
            }
        }
    }

    #[test]
    fn network_is_refused() {
        let script = "import socket, sys\ntry:\n    socket.create_connection(('127.0.0.1', 9), timeout=1)\n    r = b'connected'\nexcept Exception as e:\n    r = type(e).__name__.encode()\nopen(sys.argv[1], 'wb').write(r)\n";
        let run = run_script(script, &cfg()).unwrap();
        assert_eq!(run.bytes, b"PermissionError");
    }
}
