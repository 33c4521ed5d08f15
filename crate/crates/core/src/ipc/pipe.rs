//! Named-pipe (FIFO) staging for consumers on the same host.
//!
//! A consumer claims the FIFO by creating `<token>.claim` exclusively before
//! opening it, so at most one reader ever attaches to the writer.

use std::ffi::CString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::OpenOptionsExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::IpcError;

fn mkfifo(path: &Path) -> io::Result<()> {
    let c = CString::new(path.as_os_str().as_bytes()).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    // SAFETY: `c` is a valid NUL-terminated path for the duration of the call.
    if unsafe { libc::mkfifo(c.as_ptr(), 0o600) } == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

fn claim_path(fifo: &Path) -> PathBuf {
    fifo.with_extension("claim")
}

pub(super) fn stage(
    root: &Path,
    token: &str,
    bytes: Vec<u8>,
    cancel: Arc<AtomicBool>,
    done: Arc<AtomicBool>,
) -> Result<PathBuf, IpcError> {
    let failed = |e: io::Error| IpcError::StagingFailed(format!("{}: {e}", root.display()));
    fs::create_dir_all(root).map_err(failed)?;
    let path = root.join(format!("{token}.fifo"));
    mkfifo(&path).map_err(failed)?;
    let writer_path = path.clone();
    thread::Builder::new()
        .name("flowpipe-stage-pipe".into())
        .spawn(move || {
            // blocks until a reader attaches (or the reaper pokes it)
            if let Ok(mut f) = OpenOptions::new().write(true).open(&writer_path) {
                if !cancel.load(Ordering::SeqCst) {
                    let _ = f.write_all(&(bytes.len() as u64).to_be_bytes()).and_then(|_| f.write_all(&bytes));
                }
            }
            let _ = fs::remove_file(&writer_path);
            done.store(true, Ordering::SeqCst);
        })
        .map_err(|e| IpcError::StagingFailed(e.to_string()))?;
    Ok(path)
}

/// Unblocks a writer still waiting for a reader and removes the FIFO.
pub(super) fn release(path: &Path) {
    if let Ok(f) = OpenOptions::new().read(true).custom_flags(libc::O_NONBLOCK).open(path) {
        let _ = fs::remove_file(path);
        // give the writer a moment to observe the cancel flag before EOF
        thread::sleep(Duration::from_millis(1));
        drop(f);
    }
    let _ = fs::remove_file(path);
}

pub(super) fn redeem(address: &str, timeout: Duration) -> Result<Vec<u8>, IpcError> {
    let path = PathBuf::from(address);
    let claim = claim_path(&path);
    match OpenOptions::new().write(true).create_new(true).open(&claim) {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(IpcError::AlreadyRedeemed),
        Err(e) => return Err(IpcError::TransportError(format!("{address}: {e}"))),
    }
    let result = read_claimed(&path, timeout);
    let _ = fs::remove_file(&path);
    let _ = fs::remove_file(&claim);
    result
}

fn read_claimed(path: &Path, timeout: Duration) -> Result<Vec<u8>, IpcError> {
    if !path.exists() {
        return Err(IpcError::AlreadyRedeemed);
    }
    let transport = |e: io::Error| IpcError::TransportError(format!("{}: {e}", path.display()));
    let (tx, rx) = crossbeam_channel::bounded::<io::Result<File>>(1);
    let open_path = path.to_path_buf();
    thread::spawn(move || {
        let _ = tx.send(File::open(&open_path));
    });
    let mut f = match rx.recv_timeout(timeout) {
        Ok(r) => r.map_err(transport)?,
        Err(_) => {
            // no writer showed up: attach a throwaway writer so the opener returns
            let _ = OpenOptions::new().write(true).custom_flags(libc::O_NONBLOCK).open(path);
            return Err(IpcError::TransportError(format!("{}: producer did not connect", path.display())));
        }
    };
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(transport)?;
    let len = u64::from_be_bytes(len);
    let mut bytes = Vec::new();
    f.take(len).read_to_end(&mut bytes).map_err(transport)?;
    if bytes.len() as u64 != len {
        return Err(IpcError::TransportError(format!("{}: short read", path.display())));
    }
    Ok(bytes)
}
