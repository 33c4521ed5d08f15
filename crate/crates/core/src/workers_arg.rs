//! The `--workers=HOST:PORT#SLOTS,...` argument.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RemoteWorker {
    pub host: String,
    pub port: u16,
    pub slots: u32,
}

impl RemoteWorker {
    pub fn new(host: impl Into<String>, port: u16, slots: u32) -> Self {
        RemoteWorker { host: host.into(), port, slots }
    }

    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl fmt::Display for RemoteWorker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}#{}", self.host, self.port, self.slots)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed workers argument at byte {position}: `{fragment}` ({reason})")]
pub struct MalformedWorkersArg {
    pub fragment: String,
    pub position: usize,
    pub reason: &'static str,
}

impl FromStr for RemoteWorker {
    type Err = MalformedWorkersArg;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_entry(s, 0)
    }
}

fn parse_entry(entry: &str, offset: usize) -> Result<RemoteWorker, MalformedWorkersArg> {
    let bad = |reason| MalformedWorkersArg { fragment: entry.to_owned(), position: offset, reason };
    let (addr, slots) = entry.rsplit_once('#').ok_or_else(|| bad("missing `#slots`"))?;
    let (host, port) = addr.rsplit_once(':').ok_or_else(|| bad("missing `:port`"))?;
    if host.is_empty() || host.contains(['#', ',', ' ']) {
        return Err(bad("bad host"));
    }
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(port) {
        return Err(bad("bad port"));
    }
    let port: u16 = port.parse().map_err(|_| bad("port out of range"))?;
    if !digits(slots) {
        return Err(bad("bad slot count"));
    }
    let slots: u32 = slots.parse().map_err(|_| bad("slot count out of range"))?;
    if slots == 0 {
        return Err(bad("slots must be at least 1"));
    }
    Ok(RemoteWorker { host: host.to_owned(), port, slots })
}

/// Parses `entry ("," entry)*` with `entry = host ":" port "#" slots`.
pub fn parse_workers_arg(text: &str) -> Result<Vec<RemoteWorker>, MalformedWorkersArg> {
    let mut out = Vec::new();
    let mut offset = 0;
    for entry in text.split(',') {
        out.push(parse_entry(entry, offset)?);
        offset += entry.len() + 1;
    }
    Ok(out)
}

pub fn format_workers_arg(workers: &[RemoteWorker]) -> String {
    workers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
