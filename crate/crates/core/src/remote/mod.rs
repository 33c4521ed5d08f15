//! The worker-server protocol: framed CALL/RESULT messaging between a manager
//! and processes that evaluate registry-named worker chains.

mod client;
pub mod frame;
pub mod message;
mod server;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

pub use client::RemoteSlotPool;
pub use message::{decode_frame, encode_frame, Message, ProtocolError};
pub use server::{Server, ServerHandle};

pub const PROTOCOL_VERSION: u32 = 1;

/// How long a client waits for the handshake reply.
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("worker server {addr} unreachable: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("protocol version mismatch with {addr}: ours {ours}, theirs {theirs}")]
    VersionMismatch { addr: String, ours: u32, theirs: u32 },
    #[error("handshake with {addr} failed: {reason}")]
    Handshake { addr: String, reason: String },
    #[error("could not start local worker process: {0}")]
    Spawn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A `serve` child process on the loopback interface, killed on drop.
#[derive(Debug)]
pub struct LocalWorkerProcess {
    child: Child,
    port: u16,
}

impl LocalWorkerProcess {
    /// Runs `<program> serve --port=0 --slots=N --bind=127.0.0.1` and waits
    /// for its `LISTENING <addr>` line.
    pub fn spawn(program: &Path, slots: u32) -> Result<Self, RemoteError> {
        let mut child = Command::new(program)
            .args(["serve", "--port=0", &format!("--slots={slots}"), "--bind=127.0.0.1", "--log-level=ERROR"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| RemoteError::Spawn(format!("{}: {e}", program.display())))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut reader = BufReader::new(stdout);
        let mut line = String::new();
        let read = reader.read_line(&mut line);
        // Whatever the child prints later (io.print) is passed through.
        std::thread::spawn(move || {
            let _ = std::io::copy(&mut reader, &mut std::io::stdout());
        });
        let port = line
            .trim()
            .strip_prefix("LISTENING ")
            .and_then(|a| a.rsplit_once(':'))
            .and_then(|(_, p)| p.parse::<u16>().ok());
        match (read, port) {
            (Ok(_), Some(port)) => Ok(LocalWorkerProcess { child, port }),
            (read, _) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(RemoteError::Spawn(format!("{}: no LISTENING line ({read:?}, got {line:?})", program.display())))
            }
        }
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for LocalWorkerProcess {
    fn drop(&mut self) {
        self.kill();
    }
}
