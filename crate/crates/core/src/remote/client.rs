//! Client side: one multiplexed connection per server, with at most `slots`
//! calls outstanding. Results are matched to calls by `call_id` only.

use std::collections::HashMap;
use std::fmt;
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::Sender;

use super::frame::{read_frame, write_frame};
use super::message::Message;
use super::{RemoteError, HANDSHAKE_TIMEOUT, PROTOCOL_VERSION};
use crate::codec::Codec;
use crate::envelope::{Envelope, ErrorClass, FaultInfo};
use crate::log::Logger;
use crate::registry::WorkerChain;

#[derive(Default)]
struct Shared {
    pending: Mutex<HashMap<u64, Sender<Envelope>>>,
    pong: Mutex<Option<Sender<()>>>,
    broken: AtomicBool,
    closing: AtomicBool,
}

impl Shared {
    fn fail_all(&self) {
        self.broken.store(true, Ordering::SeqCst);
        self.pending.lock().unwrap().clear();
        self.pong.lock().unwrap().take();
    }
}

/// A handshaken connection to one worker server.
pub struct RemoteSlotPool {
    addr: String,
    slots: u32,
    worker_names: Vec<String>,
    codec: Codec,
    writer: Mutex<TcpStream>,
    shared: Arc<Shared>,
    next_id: AtomicU64,
    in_use: Mutex<u32>,
    freed: Condvar,
    max_in_use: AtomicU32,
    logger: Logger,
}

impl fmt::Debug for RemoteSlotPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteSlotPool").field("addr", &self.addr).field("slots", &self.slots).finish()
    }
}

impl RemoteSlotPool {
    /// Connects and performs the HELLO / HELLO_ACK exchange, asking for `bin-v1`.
    pub fn connect(host: &str, port: u16, logger: Logger) -> Result<Arc<Self>, RemoteError> {
        Self::connect_with(host, port, Codec::BinV1, PROTOCOL_VERSION, logger)
    }

    pub fn connect_with(
        host: &str,
        port: u16,
        codec: Codec,
        version: u32,
        logger: Logger,
    ) -> Result<Arc<Self>, RemoteError> {
        let addr = format!("{host}:{port}");
        let unreachable = |reason: String| RemoteError::Unreachable { addr: addr.clone(), reason };
        let targets: Vec<SocketAddr> =
            (host, port).to_socket_addrs().map_err(|e| unreachable(e.to_string()))?.collect();
        let mut last = "no address".to_owned();
        let mut stream = None;
        for t in targets {
            match TcpStream::connect_timeout(&t, HANDSHAKE_TIMEOUT) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e.to_string(),
            }
        }
        let mut stream = stream.ok_or_else(|| unreachable(last))?;
        let _ = stream.set_nodelay(true);
        let handshake = |reason: String| RemoteError::Handshake { addr: addr.clone(), reason };

        let hello = Message::Hello { protocol_version: version, client_name: client_name(), codec };
        write_frame(&mut stream, &hello.encode(Codec::TextV1).map_err(|e| handshake(e.to_string()))?)
            .map_err(|e| unreachable(e.to_string()))?;
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let body = read_frame(&mut stream).map_err(|e| handshake(e.to_string()))?;
        let (theirs, worker_names, slots, codec) = match Message::decode(&body, Codec::TextV1) {
            Ok(Message::HelloAck { protocol_version, worker_names, slots, codec }) => {
                (protocol_version, worker_names, slots, codec)
            }
            Ok(other) => return Err(handshake(format!("expected HELLO_ACK, got {}", other.type_name()))),
            Err(e) => return Err(handshake(e.to_string())),
        };
        if theirs != version {
            let _ = stream.shutdown(Shutdown::Both);
            return Err(RemoteError::VersionMismatch { addr, ours: version, theirs });
        }
        if slots == 0 {
            return Err(handshake("server advertises zero slots".into()));
        }
        stream.set_read_timeout(None)?;

        let shared = Arc::new(Shared::default());
        let reader = stream.try_clone()?;
        let reader_shared = shared.clone();
        thread::Builder::new()
            .name(format!("remote-{addr}"))
            .spawn(move || read_loop(reader, codec, &reader_shared))?;
        Ok(Arc::new(RemoteSlotPool {
            addr,
            slots,
            worker_names,
            codec,
            writer: Mutex::new(stream),
            shared,
            next_id: AtomicU64::new(0),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            max_in_use: AtomicU32::new(0),
            logger,
        }))
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn slots(&self) -> u32 {
        self.slots
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    /// Worker names advertised by the server.
    pub fn worker_names(&self) -> &[String] {
        &self.worker_names
    }

    /// Chain stages the server does not advertise.
    pub fn missing(&self, chain: &WorkerChain) -> Vec<String> {
        chain.stages().iter().filter(|s| !self.worker_names.contains(&s.name)).map(|s| s.name.clone()).collect()
    }

    /// Highest number of calls that were outstanding at once.
    pub fn max_outstanding(&self) -> u32 {
        self.max_in_use.load(Ordering::SeqCst)
    }

    pub fn is_broken(&self) -> bool {
        self.shared.broken.load(Ordering::SeqCst)
    }

    /// Evaluates `chain` remotely. Blocks while all slots are busy. Transport
    /// failures come back as `remote_error` faults.
    pub fn call(&self, chain: &WorkerChain, piper: &str, inbox: &[Envelope]) -> Envelope {
        let (item, sub) = inbox.first().map(|e| (e.item_index, e.sub_index)).unwrap_or((0, None));
        let _slot = self.acquire();
        let outcome = self.call_inner(chain, piper, inbox);
        outcome.unwrap_or_else(|reason| {
            let fault = FaultInfo::new(piper, 0, ErrorClass::Remote, format!("{}: {reason}", self.addr));
            if !self.shared.closing.load(Ordering::SeqCst) {
                self.logger.error(piper, format_args!("item {item}: {fault}"));
            }
            Envelope::fault(item, fault).with_sub_index(sub)
        })
    }

    fn call_inner(&self, chain: &WorkerChain, piper: &str, inbox: &[Envelope]) -> Result<Envelope, String> {
        if self.is_broken() {
            return Err("connection lost".into());
        }
        let call_id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let msg = Message::Call { call_id, piper: piper.to_owned(), chain: chain.clone(), inbox: inbox.to_vec() };
        let body = msg.encode(self.codec).map_err(|e| e.to_string())?;
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.shared.pending.lock().unwrap().insert(call_id, tx);
        if self.is_broken() {
            self.shared.pending.lock().unwrap().remove(&call_id);
            return Err("connection lost".into());
        }
        let sent = write_frame(&mut *self.writer.lock().unwrap(), &body);
        if let Err(e) = sent {
            self.shared.pending.lock().unwrap().remove(&call_id);
            self.shared.fail_all();
            return Err(format!("send failed: {e}"));
        }
        rx.recv().map_err(|_| "connection lost mid-call".to_owned())
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut n = self.in_use.lock().unwrap();
        while *n >= self.slots {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        self.max_in_use.fetch_max(*n, Ordering::SeqCst);
        SlotGuard(self)
    }

    /// Round-trips a PING.
    pub fn ping(&self, timeout: Duration) -> bool {
        let (tx, rx) = crossbeam_channel::bounded(1);
        *self.shared.pong.lock().unwrap() = Some(tx);
        let Ok(body) = Message::Ping.encode(self.codec) else { return false };
        if write_frame(&mut *self.writer.lock().unwrap(), &body).is_err() {
            return false;
        }
        rx.recv_timeout(timeout).is_ok()
    }

    /// Asks the server process to stop.
    pub fn shutdown_server(&self) {
        if let Ok(body) = Message::Shutdown.encode(self.codec) {
            let _ = write_frame(&mut *self.writer.lock().unwrap(), &body);
        }
    }

    /// Closes the connection without logging the resulting faults.
    pub fn close(&self) {
        self.shared.closing.store(true, Ordering::SeqCst);
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
    }
}

impl Drop for RemoteSlotPool {
    fn drop(&mut self) {
        self.close();
    }
}

struct SlotGuard<'a>(&'a RemoteSlotPool);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_use.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

fn read_loop(mut stream: TcpStream, codec: Codec, shared: &Shared) {
    while let Ok(body) = read_frame(&mut stream) {
        match Message::decode(&body, codec) {
            Ok(Message::Result { call_id, envelope }) => {
                if let Some(tx) = shared.pending.lock().unwrap().remove(&call_id) {
                    let _ = tx.send(envelope);
                }
            }
            Ok(Message::Pong) => {
                if let Some(tx) = shared.pong.lock().unwrap().take() {
                    let _ = tx.send(());
                }
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    shared.fail_all();
}

fn client_name() -> String {
    format!("flowpipe-{}", std::process::id())
}
