//! Socket staging: one listener per payload, a single accept, then close.
//!
//! Stream layout: 8-byte big-endian payload length, then the payload.

use std::io::{Read, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::IpcError;

pub(super) fn stage(
    interface: IpAddr,
    bytes: Vec<u8>,
    cancel: Arc<AtomicBool>,
    done: Arc<AtomicBool>,
) -> Result<SocketAddr, IpcError> {
    let listener =
        TcpListener::bind((interface, 0)).map_err(|e| IpcError::StagingFailed(format!("bind {interface}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| IpcError::StagingFailed(e.to_string()))?;
    thread::Builder::new()
        .name("flowpipe-stage-socket".into())
        .spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                drop(listener);
                if !cancel.load(Ordering::SeqCst) {
                    let _ = stream
                        .write_all(&(bytes.len() as u64).to_be_bytes())
                        .and_then(|_| stream.write_all(&bytes))
                        .and_then(|_| stream.flush());
                    let _ = stream.shutdown(Shutdown::Write);
                    // wait for the reader to close so the payload is not cut short
                    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
                    let _ = stream.read(&mut [0u8; 1]);
                }
            }
            done.store(true, Ordering::SeqCst);
        })
        .map_err(|e| IpcError::StagingFailed(e.to_string()))?;
    Ok(addr)
}

/// Wakes the accepting thread of a cancelled item.
pub(super) fn release(addr: SocketAddr) {
    let _ = TcpStream::connect_timeout(&addr, Duration::from_secs(1));
}

pub(super) fn redeem(address: &str, timeout: Duration) -> Result<Vec<u8>, IpcError> {
    let transport = |e: std::io::Error| IpcError::TransportError(format!("{address}: {e}"));
    let addr = address
        .to_socket_addrs()
        .map_err(transport)?
        .next()
        .ok_or_else(|| IpcError::TransportError(format!("{address}: no address")))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(transport)?;
    stream.set_read_timeout(Some(timeout)).map_err(transport)?;
    let mut len = [0u8; 8];
    stream.read_exact(&mut len).map_err(transport)?;
    let len = u64::from_be_bytes(len) as usize;
    let mut bytes = Vec::new();
    (&mut stream).take(len as u64).read_to_end(&mut bytes).map_err(transport)?;
    if bytes.len() != len {
        return Err(IpcError::TransportError(format!("{address}: short read {} of {len}", bytes.len())));
    }
    Ok(bytes)
}
