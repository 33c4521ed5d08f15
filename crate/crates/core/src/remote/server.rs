//! The worker server: one acceptor, one reader per connection, and a fixed
//! pool of `slots` evaluation threads shared by all connections.

use std::io::{self, ErrorKind};
use std::net::{IpAddr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};

use super::frame::{read_frame, write_frame};
use super::message::Message;
use super::{RemoteError, PROTOCOL_VERSION};
use crate::codec::Codec;
use crate::envelope::{Envelope, ErrorClass, FaultInfo};
use crate::log::Logger;
use crate::registry::{apply_chain, WorkerChain, WorkerRegistry};

const SOURCE: &str = "serve";

struct Job {
    call_id: u64,
    piper: String,
    chain: WorkerChain,
    inbox: Vec<Envelope>,
    reply: Arc<Mutex<TcpStream>>,
    codec: Codec,
}

pub struct Server {
    listener: TcpListener,
    registry: Arc<WorkerRegistry>,
    slots: u32,
    logger: Logger,
    stop: Arc<AtomicBool>,
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `bind:port` (port 0 picks a free port). Slots below 1 are raised to 1.
    pub fn bind(
        registry: Arc<WorkerRegistry>,
        bind: IpAddr,
        port: u16,
        slots: u32,
        logger: Logger,
    ) -> Result<Server, RemoteError> {
        let listener = TcpListener::bind((bind, port)).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => RemoteError::PortInUse(port),
            _ => RemoteError::Io(e),
        })?;
        Ok(Server { listener, registry, slots: slots.max(1), logger, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serves until a SHUTDOWN message arrives.
    pub fn run(self) {
        let addr = self.local_addr();
        let (jobs_tx, jobs_rx) = crossbeam_channel::unbounded::<Job>();
        let workers: Vec<_> = (0..self.slots)
            .map(|i| {
                let rx = jobs_rx.clone();
                let registry = self.registry.clone();
                let logger = self.logger.clone();
                thread::Builder::new()
                    .name(format!("slot-{i}"))
                    .spawn(move || slot_loop(rx, &registry, &logger))
                    .expect("spawn slot thread")
            })
            .collect();
        drop(jobs_rx);
        self.logger.info(SOURCE, format_args!("listening on {addr} with {} slot(s)", self.slots));
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let ctx = Conn {
                registry: self.registry.clone(),
                slots: self.slots,
                jobs: jobs_tx.clone(),
                logger: self.logger.clone(),
                stop: self.stop.clone(),
                addr,
            };
            let _ = thread::Builder::new().name("conn".into()).spawn(move || ctx.serve(stream));
        }
        drop(jobs_tx);
        for w in workers {
            let _ = w.join();
        }
        self.logger.info(SOURCE, "shut down");
    }

    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let stop = self.stop.clone();
        let thread =
            thread::Builder::new().name("flowpipe-server".into()).spawn(move || self.run()).expect("spawn server");
        ServerHandle { addr, stop, thread: Some(thread) }
    }
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Stops accepting and waits for in-progress calls to finish.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        wake(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn wake(addr: SocketAddr) {
    let _ = TcpStream::connect_timeout(&addr, Duration::from_secs(1));
}

fn slot_loop(jobs: Receiver<Job>, registry: &WorkerRegistry, logger: &Logger) {
    for job in jobs {
        let envelope = evaluate(registry, &job, logger);
        let reply = Message::Result { call_id: job.call_id, envelope };
        let body = reply.encode(job.codec).or_else(|e| {
            let fault = FaultInfo::new(&job.piper, 0, ErrorClass::Remote, format!("result not encodable: {e}"));
            logger.error(&job.piper, format_args!("item {}: {fault}", job.inbox.first().map_or(0, |e| e.item_index)));
            let item = job.inbox.first().map_or(0, |e| e.item_index);
            Message::Result { call_id: job.call_id, envelope: Envelope::fault(item, fault) }.encode(job.codec)
        });
        if let Ok(body) = body {
            let mut w = job.reply.lock().unwrap();
            let _ = write_frame(&mut *w, &body);
        }
    }
}

fn evaluate(registry: &WorkerRegistry, job: &Job, logger: &Logger) -> Envelope {
    let item = job.inbox.first().map(|e| (e.item_index, e.sub_index)).unwrap_or((0, None));
    let missing = job.chain.stages().iter().position(|s| !registry.contains(&s.name));
    if let Some(stage) = missing {
        let name = &job.chain.stages()[stage].name;
        let fault = FaultInfo::new(
            &job.piper,
            stage as u32,
            ErrorClass::Remote,
            format!("worker `{name}` is not registered on this server"),
        );
        logger.error(&job.piper, format_args!("item {}: {fault}", item.0));
        return Envelope::fault(item.0, fault).with_sub_index(item.1);
    }
    apply_chain(registry, &job.chain, &job.piper, &job.inbox, logger)
}

struct Conn {
    registry: Arc<WorkerRegistry>,
    slots: u32,
    jobs: Sender<Job>,
    logger: Logger,
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl Conn {
    fn serve(self, stream: TcpStream) {
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        if let Err(e) = self.serve_inner(stream) {
            self.logger.debug(SOURCE, format_args!("connection {peer} closed: {e}"));
        }
    }

    fn serve_inner(&self, mut stream: TcpStream) -> io::Result<()> {
        let _ = stream.set_nodelay(true);
        let err = |e: &dyn std::fmt::Display| io::Error::new(ErrorKind::InvalidData, e.to_string());
        let body = read_frame(&mut stream).map_err(|e| err(&e))?;
        let (version, codec) = match Message::decode(&body, Codec::TextV1) {
            Ok(Message::Hello { protocol_version, codec, .. }) => (protocol_version, codec),
            Ok(Message::Shutdown) => {
                self.shutdown();
                return Ok(());
            }
            Ok(other) => return Err(err(&format!("expected HELLO, got {}", other.type_name()))),
            Err(e) => return Err(err(&e)),
        };
        let ack = Message::HelloAck {
            protocol_version: PROTOCOL_VERSION,
            worker_names: self.registry.names(),
            slots: self.slots,
            codec,
        };
        write_frame(&mut stream, &ack.encode(Codec::TextV1).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
        if version != PROTOCOL_VERSION {
            return Err(err(&format!("client speaks protocol {version}")));
        }
        let writer = Arc::new(Mutex::new(stream.try_clone()?));
        loop {
            let body = read_frame(&mut stream).map_err(|e| err(&e))?;
            match Message::decode(&body, codec) {
                Ok(Message::Call { call_id, piper, chain, inbox }) => {
                    let job = Job { call_id, piper, chain, inbox, reply: writer.clone(), codec };
                    if self.jobs.send(job).is_err() {
                        return Ok(());
                    }
                }
                Ok(Message::Ping) => {
                    let pong = Message::Pong.encode(codec).map_err(|e| err(&e))?;
                    write_frame(&mut *writer.lock().unwrap(), &pong).map_err(|e| err(&e))?;
                }
                Ok(Message::Shutdown) => {
                    self.shutdown();
                    return Ok(());
                }
                Ok(other) => self.logger.debug(SOURCE, format_args!("ignoring unexpected {}", other.type_name())),
                Err(e) => return Err(err(&e)),
            }
        }
    }

    fn shutdown(&self) {
        self.logger.info(SOURCE, "SHUTDOWN received");
        self.stop.store(true, Ordering::SeqCst);
        wake(self.addr);
    }
}
