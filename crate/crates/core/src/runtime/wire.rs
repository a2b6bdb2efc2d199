//! Socket framing.
//!
//! ```text
//! u32 frame_len   bytes that follow this field (22 + payload)
//! u16 stream_id
//! u64 tag
//! u32 src_copy
//! u64 seq
//! [u8] payload
//! ```
//!
//! All integers little-endian.

use std::io::{self, Read};

use super::{Envelope, StreamId};

pub const HEADER_LEN: usize = 2 + 8 + 4 + 8;
pub const MAX_FRAME: usize = 1 << 30;

pub fn encode_frame(env: &Envelope, out: &mut Vec<u8>) {
    let len = (HEADER_LEN + env.payload.len()) as u32;
    out.reserve(4 + len as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&env.stream.0.to_le_bytes());
    out.extend_from_slice(&env.tag.to_le_bytes());
    out.extend_from_slice(&env.src_copy.to_le_bytes());
    out.extend_from_slice(&env.seq.to_le_bytes());
    out.extend_from_slice(&env.payload);
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte of
/// the next frame.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Envelope>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if !(HEADER_LEN..=MAX_FRAME).contains(&len) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let payload = body.split_off(HEADER_LEN);
    Ok(Some(Envelope {
        stream: StreamId(u16::from_le_bytes([body[0], body[1]])),
        tag: u64::from_le_bytes(body[2..10].try_into().unwrap()),
        src_copy: u32::from_le_bytes(body[10..14].try_into().unwrap()),
        seq: u64::from_le_bytes(body[14..22].try_into().unwrap()),
        payload,
    }))
}
