//! Protocol messages and their body encoding.
//!
//! Every message is a map with a `type` key; the map is encoded with the
//! connection's codec. The handshake pair is always `text-v1`.

use std::collections::BTreeMap;

use super::frame::{self, FrameError};
use crate::codec::{Codec, CodecError};
use crate::envelope::Envelope;
use crate::registry::{FunctionRef, WorkerChain};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { protocol_version: u32, client_name: String, codec: Codec },
    HelloAck { protocol_version: u32, worker_names: Vec<String>, slots: u32, codec: Codec },
    Call { call_id: u64, piper: String, chain: WorkerChain, inbox: Vec<Envelope> },
    Result { call_id: u64, envelope: Envelope },
    Ping,
    Pong,
    Shutdown,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("truncated frame: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("malformed message body: {0}")]
    MalformedBody(String),
    #[error("message not encodable: {0}")]
    Unencodable(String),
}

impl From<FrameError> for ProtocolError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Oversize(n) => ProtocolError::Oversize(n),
            FrameError::Truncated { expected, got } => ProtocolError::Truncated { expected, got },
            other => ProtocolError::MalformedBody(other.to_string()),
        }
    }
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::HelloAck { .. } => "HELLO_ACK",
            Message::Call { .. } => "CALL",
            Message::Result { .. } => "RESULT",
            Message::Ping => "PING",
            Message::Pong => "PONG",
            Message::Shutdown => "SHUTDOWN",
        }
    }

    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("type".to_owned(), Value::from(self.type_name()));
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_owned(), v);
        };
        match self {
            Message::Hello { protocol_version, client_name, codec } => {
                put("protocol_version", Value::from(*protocol_version));
                put("client_name", Value::from(client_name.as_str()));
                put("codec", Value::from(codec.id()));
            }
            Message::HelloAck { protocol_version, worker_names, slots, codec } => {
                put("protocol_version", Value::from(*protocol_version));
                put("worker_names", Value::List(worker_names.iter().map(|n| Value::from(n.as_str())).collect()));
                put("slots", Value::from(*slots));
                put("codec", Value::from(codec.id()));
            }
            Message::Call { call_id, piper, chain, inbox } => {
                put("call_id", Value::Int(*call_id as i64));
                put("piper", Value::from(piper.as_str()));
                put("chain", Value::List(chain.stages().iter().map(FunctionRef::to_value).collect()));
                put("handles_faults", Value::Bool(chain.handles_faults));
                put("inbox", Value::List(inbox.iter().map(Envelope::to_value).collect()));
            }
            Message::Result { call_id, envelope } => {
                put("call_id", Value::Int(*call_id as i64));
                put("envelope", envelope.to_value());
            }
            Message::Ping | Message::Pong | Message::Shutdown => {}
        }
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<Message, ProtocolError> {
        let bad = |what: &str| ProtocolError::MalformedBody(what.to_owned());
        let field = |k: &str| v.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        let uint = |k: &str| -> Result<u64, ProtocolError> {
            field(k)?
                .as_i64()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| bad(&format!("`{k}` must be a non-negative integer")))
        };
        let u32_field =
            |k: &str| uint(k).and_then(|n| u32::try_from(n).map_err(|_| bad(&format!("`{k}` out of range"))));
        let string = |k: &str| -> Result<String, ProtocolError> {
            field(k)?.as_str().map(str::to_owned).ok_or_else(|| bad(&format!("`{k}` must be a string")))
        };
        let codec = || -> Result<Codec, ProtocolError> {
            string("codec")?.parse().map_err(|e: CodecError| bad(&e.to_string()))
        };
        let list = |k: &str| field(k)?.as_list().ok_or_else(|| bad(&format!("`{k}` must be a list")));

        let ty = v.get("type").and_then(Value::as_str).ok_or_else(|| bad("missing `type`"))?;
        Ok(match ty {
            "HELLO" => Message::Hello {
                protocol_version: u32_field("protocol_version")?,
                client_name: string("client_name")?,
                codec: codec()?,
            },
            "HELLO_ACK" => Message::HelloAck {
                protocol_version: u32_field("protocol_version")?,
                worker_names: list("worker_names")?
                    .iter()
                    .map(|n| n.as_str().map(str::to_owned).ok_or_else(|| bad("worker name must be a string")))
                    .collect::<Result<_, _>>()?,
                slots: u32_field("slots")?,
                codec: codec()?,
            },
            "CALL" => {
                let stages = list("chain")?
                    .iter()
                    .map(|s| FunctionRef::from_value(s).map_err(|e| bad(&e)))
                    .collect::<Result<Vec<_>, _>>()?;
                let handles_faults = match v.get("handles_faults") {
                    None => false,
                    Some(b) => b.as_bool().ok_or_else(|| bad("`handles_faults` must be a bool"))?,
                };
                let chain = WorkerChain::new(stages).map_err(|e| bad(&e.to_string()))?.handling_faults(handles_faults);
                let inbox = list("inbox")?
                    .iter()
                    .map(|e| Envelope::from_value(e).map_err(|e| bad(&e)))
                    .collect::<Result<_, _>>()?;
                Message::Call { call_id: uint("call_id")?, piper: string("piper")?, chain, inbox }
            }
            "RESULT" => Message::Result {
                call_id: uint("call_id")?,
                envelope: Envelope::from_value(field("envelope")?).map_err(|e| bad(&e))?,
            },
            "PING" => Message::Ping,
            "PONG" => Message::Pong,
            "SHUTDOWN" => Message::Shutdown,
            other => return Err(bad(&format!("unknown message type `{other}`"))),
        })
    }

    /// Encodes the message body (without the length header).
    pub fn encode(&self, codec: Codec) -> Result<Vec<u8>, ProtocolError> {
        let body = codec.encode(&self.to_value()).map_err(|e| ProtocolError::Unencodable(e.to_string()))?;
        if body.len() > frame::MAX_FRAME {
            return Err(ProtocolError::Oversize(body.len()));
        }
        Ok(body)
    }

    pub fn decode(body: &[u8], codec: Codec) -> Result<Message, ProtocolError> {
        let v = codec.decode(body).map_err(|e| ProtocolError::MalformedBody(e.to_string()))?;
        Message::from_value(&v)
    }
}

/// Encodes `message` as one complete frame.
pub fn encode_frame(message: &Message, codec: Codec) -> Result<Vec<u8>, ProtocolError> {
    Ok(frame::frame(&message.encode(codec)?)?)
}

/// Decodes one complete frame; trailing bytes are an error.
pub fn decode_frame(bytes: &[u8], codec: Codec) -> Result<Message, ProtocolError> {
    let (body, rest) = frame::unframe(bytes)?;
    if !rest.is_empty() {
        return Err(ProtocolError::MalformedBody(format!("{} trailing bytes after frame", rest.len())));
    }
    Message::decode(body, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{ErrorClass, FaultInfo};
    use proptest::prelude::*;

    fn samples() -> Vec<Message> {
        let chain =
            WorkerChain::new(vec![FunctionRef::new("math.add").kwarg("n", 2), FunctionRef::new("identity")]).unwrap();
        vec![
            Message::Hello { protocol_version: 1, client_name: "c".into(), codec: Codec::BinV1 },
            Message::HelloAck {
                protocol_version: 1,
                worker_names: vec!["identity".into(), "where".into()],
                slots: 4,
                codec: Codec::TextV1,
            },
            Message::Call {
                call_id: 9,
                piper: "p".into(),
                chain: chain.handling_faults(true),
                inbox: vec![Envelope::payload(3, Value::Bytes(vec![0, 255])).with_sub_index(Some(1))],
            },
            Message::Result {
                call_id: 9,
                envelope: Envelope::fault(3, FaultInfo::new("p", 1, ErrorClass::Remote, "boom")),
            },
            Message::Ping,
            Message::Pong,
            Message::Shutdown,
        ]
    }

    #[test]
    fn every_type_roundtrips_in_both_codecs() {
        for codec in [Codec::TextV1, Codec::BinV1] {
            for m in samples() {
                let bytes = encode_frame(&m, codec).unwrap();
                assert_eq!(decode_frame(&bytes, codec).unwrap(), m, "{codec}");
            }
        }
    }

    #[test]
    fn text_body_is_a_typed_object() {
        let body = Message::Ping.encode(Codec::TextV1).unwrap();
        assert_eq!(body, br#"{"type":"PING"}"#);
    }

    #[test]
    fn oversize_message_rejected() {
        let big =
            Message::Result { call_id: 0, envelope: Envelope::payload(0, Value::Bytes(vec![0; frame::MAX_FRAME + 1])) };
        assert!(matches!(encode_frame(&big, Codec::BinV1), Err(ProtocolError::Oversize(_))));
    }

    #[test]
    fn truncated_frame() {
        let bytes = encode_frame(&Message::Ping, Codec::TextV1).unwrap();
        assert!(matches!(decode_frame(&bytes[..bytes.len() - 1], Codec::TextV1), Err(ProtocolError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn fuzz_bodies_never_panic(body in prop::collection::vec(any::<u8>(), 0..256)) {
            for codec in [Codec::TextV1, Codec::BinV1] {
                let framed = frame::frame(&body).unwrap();
                prop_assert!(matches!(decode_frame(&framed, codec), Err(ProtocolError::MalformedBody(_)) | Ok(_)));
            }
        }

        #[test]
        fn fuzz_raw_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_frame(&bytes, Codec::BinV1);
            let _ = decode_frame(&bytes, Codec::TextV1);
        }
    }
}
