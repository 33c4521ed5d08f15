//! Payload codecs: one structured-text (`text-v1`, JSON) and one binary
//! (`bin-v1`, tagged and length-prefixed).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::value::Value;

/// Nesting limit enforced while decoding untrusted bytes.
const MAX_DEPTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Codec {
    #[default]
    TextV1,
    BinV1,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("value not representable: {0}")]
    Unrepresentable(String),
    #[error("malformed {codec} body: {reason}")]
    Malformed { codec: Codec, reason: String },
    #[error("unknown codec `{0}`")]
    UnknownCodec(String),
}

impl Codec {
    pub fn id(self) -> &'static str {
        match self {
            Codec::TextV1 => "text-v1",
            Codec::BinV1 => "bin-v1",
        }
    }

    pub fn encode(self, value: &Value) -> Result<Vec<u8>, CodecError> {
        match self {
            Codec::TextV1 => {
                let json = value.to_json().map_err(|e| CodecError::Unrepresentable(e.to_string()))?;
                Ok(serde_json::to_vec(&json).expect("json tree always serializes"))
            }
            Codec::BinV1 => {
                let mut out = Vec::with_capacity(value.encoded_len());
                write_bin(value, &mut out);
                Ok(out)
            }
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Result<Value, CodecError> {
        match self {
            Codec::TextV1 => {
                let json: serde_json::Value =
                    serde_json::from_slice(bytes).map_err(|e| self.malformed(e.to_string()))?;
                Value::from_json(&json).map_err(|e| self.malformed(e.to_string()))
            }
            Codec::BinV1 => {
                let mut reader = BinReader { buf: bytes, pos: 0 };
                let v = reader.value(0)?;
                if reader.pos != bytes.len() {
                    return Err(self.malformed(format!("{} trailing bytes", bytes.len() - reader.pos)));
                }
                Ok(v)
            }
        }
    }

    fn malformed(self, reason: impl Into<String>) -> CodecError {
        CodecError::Malformed { codec: self, reason: reason.into() }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Codec {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text-v1" => Ok(Codec::TextV1),
            "bin-v1" => Ok(Codec::BinV1),
            other => Err(CodecError::UnknownCodec(other.to_owned())),
        }
    }
}

mod tag {
    pub const NULL: u8 = 0;
    pub const FALSE: u8 = 1;
    pub const TRUE: u8 = 2;
    pub const INT: u8 = 3;
    pub const FLOAT: u8 = 4;
    pub const STR: u8 = 5;
    pub const BYTES: u8 = 6;
    pub const LIST: u8 = 7;
    pub const MAP: u8 = 8;
}

fn write_len(len: usize, out: &mut Vec<u8>) {
    let len = u32::try_from(len).expect("bin-v1 element longer than 4 GiB");
    out.extend_from_slice(&len.to_be_bytes());
}

fn write_bin(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.push(tag::NULL),
        Value::Bool(false) => out.push(tag::FALSE),
        Value::Bool(true) => out.push(tag::TRUE),
        Value::Int(i) => {
            out.push(tag::INT);
            out.extend_from_slice(&i.to_be_bytes());
        }
        Value::Float(f) => {
            out.push(tag::FLOAT);
            out.extend_from_slice(&f.to_bits().to_be_bytes());
        }
        Value::Str(s) => {
            out.push(tag::STR);
            write_len(s.len(), out);
            out.extend_from_slice(s.as_bytes());
        }
        Value::Bytes(b) => {
            out.push(tag::BYTES);
            write_len(b.len(), out);
            out.extend_from_slice(b);
        }
        Value::List(l) => {
            out.push(tag::LIST);
            write_len(l.len(), out);
            for v in l {
                write_bin(v, out);
            }
        }
        Value::Map(m) => {
            out.push(tag::MAP);
            write_len(m.len(), out);
            for (k, v) in m {
                write_len(k.len(), out);
                out.extend_from_slice(k.as_bytes());
                write_bin(v, out);
            }
        }
    }
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    fn err(&self, reason: impl Into<String>) -> CodecError {
        Codec::BinV1.malformed(format!("{} at offset {}", reason.into(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("need {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u32()?;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    fn value(&mut self, depth: usize) -> Result<Value, CodecError> {
        if depth > MAX_DEPTH {
            return Err(self.err("nesting too deep"));
        }
        let t = self.take(1)?[0];
        Ok(match t {
            tag::NULL => Value::Null,
            tag::FALSE => Value::Bool(false),
            tag::TRUE => Value::Bool(true),
            tag::INT => Value::Int(self.u64()? as i64),
            tag::FLOAT => Value::Float(f64::from_bits(self.u64()?)),
            tag::STR => Value::Str(self.string()?),
            tag::BYTES => {
                let len = self.u32()?;
                Value::Bytes(self.take(len)?.to_vec())
            }
            tag::LIST => {
                let n = self.u32()?;
                // every element occupies at least one byte
                if n > self.buf.len() - self.pos {
                    return Err(self.err("list length exceeds input"));
                }
                let mut l = Vec::with_capacity(n);
                for _ in 0..n {
                    l.push(self.value(depth + 1)?);
                }
                Value::List(l)
            }
            tag::MAP => {
                let n = self.u32()?;
                if n > self.buf.len() - self.pos {
                    return Err(self.err("map length exceeds input"));
                }
                let mut m = BTreeMap::new();
                for _ in 0..n {
                    let k = self.string()?;
                    let v = self.value(depth + 1)?;
                    m.insert(k, v);
                }
                Value::Map(m)
            }
            other => return Err(self.err(format!("unknown tag {other}"))),
        })
    }
}
