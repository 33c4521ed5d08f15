//! Envelopes: the unit that flows through pipes.
//!
//! An envelope is either a payload or a [`FaultInfo`] placeholder. Faults are
//! created where a user function fails and are passed downstream untouched
//! (apart from the hop counter), so one bad item never stops the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::value::Value;

/// Key marking a fault when it is handed to a fault-handling function as a value.
pub const FAULT_MARKER_KEY: &str = "$fault";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    User,
    Timeout,
    Ipc,
    Remote,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::User => "user_error",
            ErrorClass::Timeout => "timeout",
            ErrorClass::Ipc => "ipc_error",
            ErrorClass::Remote => "remote_error",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "user_error" => ErrorClass::User,
            "timeout" => ErrorClass::Timeout,
            "ipc_error" => ErrorClass::Ipc,
            "remote_error" => ErrorClass::Remote,
            other => return Err(format!("unknown error class `{other}`")),
        })
    }
}

/// Where one faulted sub-item of a gathered group came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubFault {
    pub sub_index: u32,
    pub origin_piper: String,
    pub stage_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultInfo {
    pub origin_piper: String,
    pub stage_index: u32,
    pub error_class: ErrorClass,
    pub message: String,
    pub hops: u32,
    /// Non-empty only for faults collapsed at a gather.
    pub sub_faults: Vec<SubFault>,
}

impl FaultInfo {
    pub fn new(
        origin_piper: impl Into<String>,
        stage_index: u32,
        error_class: ErrorClass,
        message: impl Into<String>,
    ) -> Self {
        FaultInfo {
            origin_piper: origin_piper.into(),
            stage_index,
            error_class,
            message: message.into(),
            hops: 0,
            sub_faults: Vec::new(),
        }
    }

    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("origin_piper".into(), Value::from(self.origin_piper.as_str()));
        m.insert("stage_index".into(), Value::from(self.stage_index));
        m.insert("error_class".into(), Value::from(self.error_class.as_str()));
        m.insert("message".into(), Value::from(self.message.as_str()));
        m.insert("hops".into(), Value::from(self.hops));
        if !self.sub_faults.is_empty() {
            let subs = self
                .sub_faults
                .iter()
                .map(|s| {
                    crate::vmap! {
                        "sub_index" => s.sub_index,
                        "origin_piper" => s.origin_piper.as_str(),
                        "stage_index" => s.stage_index,
                    }
                })
                .collect::<Vec<_>>();
            m.insert("sub_faults".into(), Value::List(subs));
        }
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<Self, String> {
        let str_field = |k: &str| v.get(k).and_then(Value::as_str).ok_or_else(|| format!("fault field `{k}` missing"));
        let u32_field = |v: &Value, k: &str| {
            v.get(k)
                .and_then(Value::as_i64)
                .and_then(|i| u32::try_from(i).ok())
                .ok_or_else(|| format!("fault field `{k}` missing or out of range"))
        };
        let sub_faults = match v.get("sub_faults") {
            None => Vec::new(),
            Some(Value::List(l)) => l
                .iter()
                .map(|s| {
                    Ok(SubFault {
                        sub_index: u32_field(s, "sub_index")?,
                        origin_piper: s
                            .get("origin_piper")
                            .and_then(Value::as_str)
                            .ok_or("sub fault origin missing")?
                            .to_owned(),
                        stage_index: u32_field(s, "stage_index")?,
                    })
                })
                .collect::<Result<_, String>>()?,
            Some(_) => return Err("sub_faults must be a list".into()),
        };
        Ok(FaultInfo {
            origin_piper: str_field("origin_piper")?.to_owned(),
            stage_index: u32_field(v, "stage_index")?,
            error_class: str_field("error_class")?.parse()?,
            message: str_field("message")?.to_owned(),
            hops: u32_field(v, "hops")?,
            sub_faults,
        })
    }

    /// The value a fault-handling function sees in place of this fault.
    pub fn to_marker(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert(FAULT_MARKER_KEY.to_owned(), self.to_value());
        Value::Map(m)
    }

    /// Recognizes a value produced by [`FaultInfo::to_marker`].
    pub fn from_marker(v: &Value) -> Option<FaultInfo> {
        let m = v.as_map()?;
        if m.len() != 1 {
            return None;
        }
        FaultInfo::from_value(m.get(FAULT_MARKER_KEY)?).ok()
    }
}

impl fmt::Display for FaultInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at {}[{}] (hops={}): {}",
            self.error_class, self.origin_piper, self.stage_index, self.hops, self.message
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Payload(Value),
    Fault(FaultInfo),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    /// Position of the originating input item in its input stream.
    pub item_index: u64,
    /// Position within a scattered group, between produce and consume.
    pub sub_index: Option<u32>,
    pub body: Body,
}

impl Envelope {
    pub fn payload(item_index: u64, value: impl Into<Value>) -> Self {
        Envelope { item_index, sub_index: None, body: Body::Payload(value.into()) }
    }

    pub fn fault(item_index: u64, fault: FaultInfo) -> Self {
        Envelope { item_index, sub_index: None, body: Body::Fault(fault) }
    }

    pub fn with_sub_index(mut self, sub: Option<u32>) -> Self {
        self.sub_index = sub;
        self
    }

    pub fn is_fault(&self) -> bool {
        matches!(self.body, Body::Fault(_))
    }

    pub fn as_payload(&self) -> Option<&Value> {
        match &self.body {
            Body::Payload(v) => Some(v),
            Body::Fault(_) => None,
        }
    }

    pub fn as_fault(&self) -> Option<&FaultInfo> {
        match &self.body {
            Body::Fault(f) => Some(f),
            Body::Payload(_) => None,
        }
    }

    /// Bytes this envelope occupies on a `bin-v1` wire.
    pub fn encoded_len(&self) -> usize {
        match &self.body {
            Body::Payload(v) => v.encoded_len(),
            Body::Fault(f) => f.to_value().encoded_len(),
        }
    }

    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("item_index".into(), Value::Int(self.item_index as i64));
        if let Some(s) = self.sub_index {
            m.insert("sub_index".into(), Value::from(s));
        }
        match &self.body {
            Body::Payload(v) => m.insert("payload".into(), v.clone()),
            Body::Fault(f) => m.insert("fault".into(), f.to_value()),
        };
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<Self, String> {
        let item_index = v
            .get("item_index")
            .and_then(Value::as_i64)
            .and_then(|i| u64::try_from(i).ok())
            .ok_or("envelope item_index missing")?;
        let sub_index = match v.get("sub_index") {
            None => None,
            Some(s) => Some(s.as_i64().and_then(|i| u32::try_from(i).ok()).ok_or("bad sub_index")?),
        };
        let body = match (v.get("payload"), v.get("fault")) {
            (Some(p), None) => Body::Payload(p.clone()),
            (None, Some(f)) => Body::Fault(FaultInfo::from_value(f)?),
            _ => return Err("envelope needs exactly one of payload/fault".into()),
        };
        Ok(Envelope { item_index, sub_index, body })
    }
}
