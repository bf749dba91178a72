//! Subprocess execution with a wall-clock limit and captured output.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use crate::trace::ExitKind;

#[derive(Debug, Clone)]
pub struct Captured {
    pub exit: ExitKind,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration: Duration,
}

impl Captured {
    pub fn success(&self) -> bool {
        self.exit == ExitKind::Exited(0)
    }

    /// Stdout followed by stderr, lossily decoded.
    pub fn combined(&self) -> String {
        let mut s = String::from_utf8_lossy(&self.stdout).into_owned();
        s.push_str(&String::from_utf8_lossy(&self.stderr));
        s
    }
}

/// Runs `cmd` to completion or until `timeout`, killing its whole process
/// group on expiry. Stdin is closed; stdout and stderr are captured in full.
pub fn run_captured(mut cmd: Command, timeout: Duration) -> std::io::Result<Captured> {
    cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    // SAFETY: setpgid is async-signal-safe.
    unsafe {
        cmd.pre_exec(|| {
            libc::setpgid(0, 0);
            Ok(())
        });
    }
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let mut out = child.stdout.take().expect("piped");
    let mut err = child.stderr.take().expect("piped");
    let out_t = std::thread::spawn(move || {
        let mut b = Vec::new();
        let _ = out.read_to_end(&mut b);
        b
    });
    let err_t = std::thread::spawn(move || {
        let mut b = Vec::new();
        let _ = err.read_to_end(&mut b);
        b
    });
    let exit = match child.wait_timeout(timeout)? {
        Some(status) => match (status.code(), status.signal()) {
            (Some(c), _) => ExitKind::Exited(c),
            (None, Some(s)) => ExitKind::Signaled(s),
            (None, None) => ExitKind::Exited(-1),
        },
        None => {
            // SAFETY: the child leads its own process group.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            ExitKind::Timeout
        }
    };
    let duration = start.elapsed();
    Ok(Captured { exit, stdout: out_t.join().unwrap_or_default(), stderr: err_t.join().unwrap_or_default(), duration })
}
