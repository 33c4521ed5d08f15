//! Leveled, real-time workflow logging.
//!
//! Every record is written and flushed as soon as it is emitted, one line
//! per record: `timestamp<TAB>LEVEL<TAB>source<TAB>message`, with an
//! ISO-8601 UTC timestamp.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Debug,
    Info,
    Error,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "DEBUG",
            Level::Info => "INFO",
            Level::Error => "ERROR",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DEBUG" => Ok(Level::Debug),
            "INFO" => Ok(Level::Info),
            "ERROR" => Ok(Level::Error),
            _ => Err(format!("unknown log level `{s}` (expected DEBUG, INFO or ERROR)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub timestamp: DateTime<Utc>,
    pub level: Level,
    pub source: String,
    pub message: String,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
            self.level,
            one_line(&self.source),
            one_line(&self.message)
        )
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Where records go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogSink {
    Stderr,
    File(PathBuf),
    /// Kept in memory; read back with [`Logger::records`].
    Memory,
}

enum SinkState {
    Stderr,
    File(File),
    Memory(Vec<LogRecord>),
}

struct Inner {
    min_level: Level,
    sink: Mutex<(SinkState, Option<DateTime<Utc>>)>,
}

#[derive(Clone)]
pub struct Logger {
    inner: Arc<Inner>,
}

impl fmt::Debug for Logger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Logger").field("min_level", &self.inner.min_level).finish()
    }
}

impl Default for Logger {
    fn default() -> Self {
        Logger::stderr(Level::Info)
    }
}

impl Logger {
    pub fn new(sink: LogSink, min_level: Level) -> io::Result<Logger> {
        let state = match sink {
            LogSink::Stderr => SinkState::Stderr,
            LogSink::File(path) => SinkState::File(OpenOptions::new().create(true).append(true).open(path)?),
            LogSink::Memory => SinkState::Memory(Vec::new()),
        };
        Ok(Logger { inner: Arc::new(Inner { min_level, sink: Mutex::new((state, None)) }) })
    }

    pub fn stderr(min_level: Level) -> Logger {
        Logger::new(LogSink::Stderr, min_level).expect("stderr sink cannot fail")
    }

    pub fn memory(min_level: Level) -> Logger {
        Logger::new(LogSink::Memory, min_level).expect("memory sink cannot fail")
    }

    pub fn min_level(&self) -> Level {
        self.inner.min_level
    }

    pub fn enabled(&self, level: Level) -> bool {
        level >= self.inner.min_level
    }

    pub fn emit(&self, level: Level, source: &str, message: impl fmt::Display) {
        if !self.enabled(level) {
            return;
        }
        let mut guard = self.inner.sink.lock().unwrap_or_else(|p| p.into_inner());
        let (state, last) = &mut *guard;
        // stamped under the sink lock so timestamps never go backwards per sink
        let mut timestamp = Utc::now();
        if let Some(prev) = *last {
            timestamp = timestamp.max(prev);
        }
        *last = Some(timestamp);
        let record = LogRecord { timestamp, level, source: source.to_owned(), message: message.to_string() };
        match state {
            SinkState::Stderr => write_stderr(&record),
            SinkState::File(f) => {
                let line = record.to_line();
                if writeln!(f, "{line}").and_then(|_| f.flush()).is_err() {
                    write_stderr(&record);
                }
            }
            SinkState::Memory(buf) => buf.push(record),
        }
    }

    pub fn debug(&self, source: &str, message: impl fmt::Display) {
        self.emit(Level::Debug, source, message)
    }

    pub fn info(&self, source: &str, message: impl fmt::Display) {
        self.emit(Level::Info, source, message)
    }

    pub fn error(&self, source: &str, message: impl fmt::Display) {
        self.emit(Level::Error, source, message)
    }

    /// Records captured by a [`LogSink::Memory`] logger; empty for other sinks.
    pub fn records(&self) -> Vec<LogRecord> {
        match &self.inner.sink.lock().unwrap_or_else(|p| p.into_inner()).0 {
            SinkState::Memory(buf) => buf.clone(),
            _ => Vec::new(),
        }
    }
}

fn write_stderr(record: &LogRecord) {
    let mut err = io::stderr().lock();
    let _ = writeln!(err, "{}", record.to_line());
    let _ = err.flush();
}

static GLOBAL: RwLock<Option<Logger>> = RwLock::new(None);

/// Installs the process-wide logger. Defaults to stderr at INFO when never called.
pub fn setup(sink: LogSink, min_level: Level) -> io::Result<Logger> {
    let logger = Logger::new(sink, min_level)?;
    *GLOBAL.write().unwrap_or_else(|p| p.into_inner()) = Some(logger.clone());
    Ok(logger)
}

pub fn global() -> Logger {
    if let Some(l) = GLOBAL.read().unwrap_or_else(|p| p.into_inner()).as_ref() {
        return l.clone();
    }
    let mut w = GLOBAL.write().unwrap_or_else(|p| p.into_inner());
    w.get_or_insert_with(Logger::default).clone()
}

pub fn emit(level: Level, source: &str, message: impl fmt::Display) {
    global().emit(level, source, message)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_level_filters() {
        let l = Logger::memory(Level::Error);
        l.debug("x", "hidden");
        l.info("x", "hidden");
        l.error("x", "shown");
        let r = l.records();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].message, "shown");
    }

    #[test]
    fn line_format() {
        let l = Logger::memory(Level::Debug);
        l.info("piper\tA", "two\nlines");
        let line = l.records()[0].to_line();
        let re = regex::Regex::new(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{6}Z\tINFO\tpiper A\ttwo lines$").unwrap();
        assert!(re.is_match(&line), "{line}");
    }

    #[test]
    fn file_sink_is_flushed_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.txt");
        let l = Logger::new(LogSink::File(path.clone()), Level::Debug).unwrap();
        l.error("p", "first");
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        l.debug("p", "second");
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn timestamps_non_decreasing() {
        let l = Logger::memory(Level::Debug);
        for i in 0..200 {
            l.debug("s", i);
        }
        let r = l.records();
        assert!(r.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn level_parse() {
        assert_eq!("error".parse::<Level>().unwrap(), Level::Error);
        assert!("WARN".parse::<Level>().is_err());
    }
}
