//! Length-prefixed framing: a 4-byte big-endian body length, then the body.

use std::io::{self, Read, Write};

/// Largest accepted body.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("truncated frame: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn frame(body: &[u8]) -> Result<Vec<u8>, FrameError> {
    if body.len() > MAX_FRAME {
        return Err(FrameError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Splits one complete frame off the front of `bytes`; returns the body and
/// the remaining bytes.
pub fn unframe(bytes: &[u8]) -> Result<(&[u8], &[u8]), FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::Truncated { expected: 4, got: bytes.len() });
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::Oversize(len));
    }
    let rest = &bytes[4..];
    if rest.len() < len {
        return Err(FrameError::Truncated { expected: len, got: rest.len() });
    }
    Ok(rest.split_at(len))
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> Result<(), FrameError> {
    let framed = frame(body)?;
    w.write_all(&framed)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. A clean end of stream before the header is `Closed`.
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, FrameError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Truncated { expected: 4, got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::Oversize(len));
    }
    let mut body = Vec::with_capacity(len.min(1 << 20));
    let n = r.take(len as u64).read_to_end(&mut body)?;
    if n < len {
        return Err(FrameError::Truncated { expected: len, got: n });
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_big_endian() {
        assert_eq!(frame(b"abc").unwrap(), [0, 0, 0, 3, b'a', b'b', b'c']);
    }

    #[test]
    fn stream_roundtrip_and_truncation() {
        let mut wire = Vec::new();
        write_frame(&mut wire, b"hello").unwrap();
        write_frame(&mut wire, b"").unwrap();
        let mut r = &wire[..];
        assert_eq!(read_frame(&mut r).unwrap(), b"hello");
        assert_eq!(read_frame(&mut r).unwrap(), b"");
        assert!(matches!(read_frame(&mut r), Err(FrameError::Closed)));
        let mut cut = &wire[..6];
        assert!(matches!(read_frame(&mut cut), Err(FrameError::Truncated { expected: 5, got: 2 })));
    }

    #[test]
    fn oversize_boundary() {
        let header = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(matches!(unframe(&header), Err(FrameError::Oversize(n)) if n == MAX_FRAME + 1));
        assert!(matches!(read_frame(&mut &header[..]), Err(FrameError::Oversize(_))));
        let header = (MAX_FRAME as u32).to_be_bytes();
        assert!(matches!(unframe(&header), Err(FrameError::Truncated { .. })));
    }
}
