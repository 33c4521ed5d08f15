//! Direct producer-to-consumer payload transfer.
//!
//! `dump_item` stages a payload out of band and returns a small [`Locator`];
//! the locator travels through the pipeline in place of the payload, and
//! `load_item` redeems it exactly once on the consumer side. Staged items
//! that nobody redeems are released by [`Stage::reap_expired`].

mod file;
#[cfg(unix)]
mod pipe;
mod socket;

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::RngCore;

use crate::codec::{Codec, CodecError};
use crate::value::Value;

/// Environment key overriding the file/pipe staging root.
pub const STAGE_ROOT_ENV: &str = "FLOWPIPE_STAGE_ROOT";
/// Environment key overriding the interface socket staging binds to.
pub const STAGE_INTERFACE_ENV: &str = "FLOWPIPE_STAGE_INTERFACE";

pub const DEFAULT_EXPIRY: Duration = Duration::from_secs(300);

const LOCATOR_KIND: &str = "locator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Socket,
    Pipe,
    File,
    /// Reserved; not implemented.
    Shm,
    /// Reserved; not implemented.
    Database,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Socket => "socket",
            Method::Pipe => "pipe",
            Method::File => "file",
            Method::Shm => "shm",
            Method::Database => "database",
        }
    }

    pub fn is_supported(self) -> bool {
        match self {
            Method::Socket | Method::File => true,
            Method::Pipe => cfg!(unix),
            Method::Shm | Method::Database => false,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = IpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "socket" | "tcp" => Method::Socket,
            "pipe" | "fifo" => Method::Pipe,
            "file" => Method::File,
            "shm" => Method::Shm,
            "database" | "db" => Method::Database,
            other => return Err(IpcError::UnsupportedMethod(other.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IpcError {
    #[error("transfer method `{0}` is not supported on this platform")]
    UnsupportedMethod(String),
    #[error("staging failed: {0}")]
    StagingFailed(String),
    #[error("locator was already redeemed")]
    AlreadyRedeemed,
    #[error("locator expired")]
    Expired,
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("malformed locator: {0}")]
    BadLocator(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// An out-of-band payload address. Small regardless of payload size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Locator {
    pub method: Method,
    /// `host:port` for sockets, a filesystem path otherwise.
    pub address: String,
    pub codec: Codec,
    pub payload_bytes: Option<u64>,
    pub one_shot: bool,
    pub token: String,
    pub expires_at_ms: u64,
}

impl Locator {
    pub fn to_value(&self) -> Value {
        let mut v = crate::vmap! {
            "kind" => LOCATOR_KIND,
            "method" => self.method.as_str(),
            "address" => self.address.as_str(),
            "codec" => self.codec.id(),
            "one_shot" => self.one_shot,
            "token" => self.token.as_str(),
            "expires_at_ms" => self.expires_at_ms as i64,
        };
        if let (Some(n), Value::Map(m)) = (self.payload_bytes, &mut v) {
            m.insert("payload_bytes".into(), Value::Int(n as i64));
        }
        v
    }

    pub fn from_value(v: &Value) -> Result<Self, IpcError> {
        let bad = |what: &str| IpcError::BadLocator(what.to_owned());
        if v.get("kind").and_then(Value::as_str) != Some(LOCATOR_KIND) {
            return Err(bad("not a locator"));
        }
        let s = |k: &str| v.get(k).and_then(Value::as_str).ok_or_else(|| bad(k));
        let u = |k: &str| v.get(k).and_then(Value::as_i64).and_then(|i| u64::try_from(i).ok());
        Ok(Locator {
            method: s("method")?.parse()?,
            address: s("address")?.to_owned(),
            codec: s("codec")?.parse()?,
            payload_bytes: u("payload_bytes"),
            one_shot: v.get("one_shot").and_then(Value::as_bool).unwrap_or(true),
            token: s("token")?.to_owned(),
            expires_at_ms: u("expires_at_ms").ok_or_else(|| bad("expires_at_ms"))?,
        })
    }

    pub fn is_expired_at(&self, now: SystemTime) -> bool {
        millis(now) > self.expires_at_ms
    }
}

fn millis(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub trait Clock: Send + Sync {
    fn now(&self) -> SystemTime;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> SystemTime {
        SystemTime::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<SystemTime>>);

impl ManualClock {
    pub fn new(start: SystemTime) -> Self {
        ManualClock(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> SystemTime {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    /// Directory for file and pipe staging.
    pub root: PathBuf,
    /// Interface socket staging binds to; also the host advertised in locators.
    pub interface: IpAddr,
    pub expiry: Duration,
    /// Bound on how long a consumer waits for a producer.
    pub transport_timeout: Duration,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            root: std::env::temp_dir().join("flowpipe-stage"),
            interface: IpAddr::from([127, 0, 0, 1]),
            expiry: DEFAULT_EXPIRY,
            transport_timeout: Duration::from_secs(10),
        }
    }
}

impl StageConfig {
    pub fn from_env() -> Self {
        let mut c = StageConfig::default();
        if let Some(root) = std::env::var_os(STAGE_ROOT_ENV) {
            c.root = PathBuf::from(root);
        }
        if let Some(ip) = std::env::var(STAGE_INTERFACE_ENV).ok().and_then(|s| s.parse().ok()) {
            c.interface = ip;
        }
        c
    }
}

enum Resource {
    File(PathBuf),
    #[cfg_attr(not(unix), allow(dead_code))]
    Pipe(PathBuf),
    Socket(std::net::SocketAddr),
}

struct Staged {
    expires_at: SystemTime,
    resource: Resource,
    cancel: Arc<AtomicBool>,
    done: Arc<AtomicBool>,
}

impl Staged {
    fn finished(&self) -> bool {
        match &self.resource {
            Resource::File(p) => !p.exists(),
            _ => self.done.load(Ordering::SeqCst),
        }
    }

    fn release(&self) {
        self.cancel.store(true, Ordering::SeqCst);
        match &self.resource {
            Resource::File(p) => {
                let _ = std::fs::remove_file(p);
            }
            #[cfg(unix)]
            Resource::Pipe(p) => pipe::release(p),
            #[cfg(not(unix))]
            Resource::Pipe(_) => {}
            Resource::Socket(addr) => socket::release(*addr),
        }
    }
}

/// Producer- and consumer-side staging state for one process.
pub struct Stage {
    config: StageConfig,
    clock: Arc<dyn Clock>,
    staged: Mutex<HashMap<String, Staged>>,
    /// Tokens redeemed by this process, with their expiry in unix millis.
    redeemed: Mutex<HashMap<String, u64>>,
}

impl fmt::Debug for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stage").field("config", &self.config).finish()
    }
}

impl Stage {
    pub fn new(config: StageConfig) -> Self {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: StageConfig, clock: Arc<dyn Clock>) -> Self {
        Stage { config, clock, staged: Mutex::new(HashMap::new()), redeemed: Mutex::new(HashMap::new()) }
    }

    /// The process-wide stage used by the `io.dump_item` / `io.load_item` workers.
    pub fn global() -> &'static Stage {
        static GLOBAL: OnceLock<Stage> = OnceLock::new();
        GLOBAL.get_or_init(|| Stage::new(StageConfig::from_env()))
    }

    pub fn config(&self) -> &StageConfig {
        &self.config
    }

    pub fn dump_item(&self, payload: &Value, method: Method, codec: Codec) -> Result<Locator, IpcError> {
        if !method.is_supported() {
            return Err(IpcError::UnsupportedMethod(method.as_str().to_owned()));
        }
        let bytes = codec.encode(payload)?;
        let now = self.clock.now();
        self.reap_expired(now);
        let token = new_token();
        let cancel = Arc::new(AtomicBool::new(false));
        let done = Arc::new(AtomicBool::new(false));
        let payload_bytes = bytes.len() as u64;
        let (address, resource) = match method {
            Method::File => {
                let path = file::stage(&self.config.root, &token, &bytes)?;
                (path.display().to_string(), Resource::File(path))
            }
            #[cfg(unix)]
            Method::Pipe => {
                let path = pipe::stage(&self.config.root, &token, bytes, cancel.clone(), done.clone())?;
                (path.display().to_string(), Resource::Pipe(path))
            }
            Method::Socket => {
                let addr = socket::stage(self.config.interface, bytes, cancel.clone(), done.clone())?;
                (addr.to_string(), Resource::Socket(addr))
            }
            _ => return Err(IpcError::UnsupportedMethod(method.as_str().to_owned())),
        };
        let expires_at = now + self.config.expiry;
        self.staged.lock().unwrap().insert(token.clone(), Staged { expires_at, resource, cancel, done });
        Ok(Locator {
            method,
            address,
            codec,
            payload_bytes: Some(payload_bytes),
            one_shot: true,
            token,
            expires_at_ms: millis(expires_at),
        })
    }

    pub fn load_item(&self, locator: &Locator) -> Result<Value, IpcError> {
        if !locator.method.is_supported() {
            return Err(IpcError::UnsupportedMethod(locator.method.as_str().to_owned()));
        }
        if locator.is_expired_at(self.clock.now()) {
            return Err(IpcError::Expired);
        }
        if self.redeemed.lock().unwrap().insert(locator.token.clone(), locator.expires_at_ms).is_some() {
            return Err(IpcError::AlreadyRedeemed);
        }
        let timeout = self.config.transport_timeout;
        let bytes = match locator.method {
            Method::File => file::redeem(&locator.address)?,
            #[cfg(unix)]
            Method::Pipe => pipe::redeem(&locator.address, timeout)?,
            Method::Socket => socket::redeem(&locator.address, timeout)?,
            other => return Err(IpcError::UnsupportedMethod(other.as_str().to_owned())),
        };
        if let Some(n) = locator.payload_bytes {
            if n != bytes.len() as u64 {
                return Err(IpcError::TransportError(format!("expected {n} bytes, got {}", bytes.len())));
            }
        }
        Ok(locator.codec.decode(&bytes)?)
    }

    /// Releases items staged longer than the expiry window and forgets items
    /// already redeemed. Returns how many expired items were released.
    pub fn reap_expired(&self, now: SystemTime) -> usize {
        let now_ms = millis(now);
        self.redeemed.lock().unwrap().retain(|_, &mut exp| exp >= now_ms);
        let mut staged = self.staged.lock().unwrap();
        staged.retain(|_, s| !s.finished());
        let expired: Vec<String> = staged.iter().filter(|(_, s)| s.expires_at <= now).map(|(k, _)| k.clone()).collect();
        for token in &expired {
            if let Some(s) = staged.remove(token) {
                s.release();
            }
        }
        expired.len()
    }

    /// Items staged by this process and not yet redeemed or released.
    pub fn staged_count(&self) -> usize {
        let mut staged = self.staged.lock().unwrap();
        staged.retain(|_, s| !s.finished());
        staged.len()
    }
}

fn new_token() -> String {
    let mut raw = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut raw);
    raw.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(dir: &std::path::Path) -> Stage {
        Stage::new(StageConfig { root: dir.to_path_buf(), ..StageConfig::default() })
    }

    #[test]
    fn file_roundtrip_and_single_redemption() {
        let dir = tempfile::tempdir().unwrap();
        let st = stage(dir.path());
        let payload = crate::vmap! {"a" => 1};
        let loc = st.dump_item(&payload, Method::File, Codec::TextV1).unwrap();
        assert_eq!(st.load_item(&loc).unwrap(), payload);
        assert_eq!(st.load_item(&loc), Err(IpcError::AlreadyRedeemed));
        // another process (fresh stage) sees the file gone
        assert_eq!(stage(dir.path()).load_item(&loc), Err(IpcError::AlreadyRedeemed));
        assert_eq!(st.staged_count(), 0);
    }

    #[test]
    fn reserved_methods_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let st = stage(dir.path());
        for m in [Method::Shm, Method::Database] {
            assert!(matches!(st.dump_item(&Value::Null, m, Codec::BinV1), Err(IpcError::UnsupportedMethod(_))));
        }
        assert_eq!("tcp".parse::<Method>().unwrap(), Method::Socket);
    }

    #[cfg(not(unix))]
    #[test]
    fn pipe_requires_fifo_platform() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            stage(dir.path()).dump_item(&Value::Null, Method::Pipe, Codec::BinV1),
            Err(IpcError::UnsupportedMethod(_))
        ));
    }

    #[test]
    fn reap_with_injected_clock() {
        let dir = tempfile::tempdir().unwrap();
        let t0 = SystemTime::now();
        let clock = ManualClock::new(t0);
        let st = Stage::with_clock(
            StageConfig { root: dir.path().to_path_buf(), ..StageConfig::default() },
            Arc::new(clock.clone()),
        );
        assert_eq!(st.reap_expired(t0), 0);
        let loc = st.dump_item(&Value::from(1), Method::File, Codec::BinV1).unwrap();
        clock.advance(Duration::from_secs(100));
        let fresh = st.dump_item(&Value::from(2), Method::File, Codec::BinV1).unwrap();
        clock.advance(Duration::from_secs(201));
        assert_eq!(st.reap_expired(clock.now()), 1);
        assert_eq!(st.load_item(&loc), Err(IpcError::Expired));
        assert_eq!(st.staged_count(), 1);
        assert_eq!(st.load_item(&fresh).unwrap(), Value::from(2));
        assert_eq!(st.staged_count(), 0);
    }

    #[test]
    fn locator_is_small_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let st = stage(dir.path());
        let blob = Value::Bytes(vec![7; 1 << 20]);
        let loc = st.dump_item(&blob, Method::Socket, Codec::BinV1).unwrap();
        assert!(loc.to_value().encoded_len() <= 1024);
        assert_eq!(Locator::from_value(&loc.to_value()).unwrap(), loc);
        assert_eq!(st.load_item(&loc).unwrap(), blob);
        assert!(Locator::from_value(&Value::from(3)).is_err());
    }
}
