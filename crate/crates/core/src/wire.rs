//! Length-prefixed framing and the message codec.
//!
//! ```text
//! frame   = length:u32be type:u8 payload[length - 1]
//! Hello      0x01  node_id:u32 role:u8
//! Ping       0x02  seq:u32 pad[1491]          (1500 bytes on the wire)
//! Pong       0x03  seq:u32
//! MeasReport 0x04  eh_id:u32 eh_role:u8 m_i:f64 count:u16 sample*
//!                  sample = oh_id:u32 status:u8 conn:f64 (lat:f64 x3 | elapsed:f64)
//! Assign     0x05  oh_id:u32
//! Reject     0x06
//! LoadReport 0x07  load:u16                   (round(load * 65535))
//! Data       0x08  msg_id:u64 origin:u32 hop:u8 payload
//! Bye        0x09
//! ```
//!
//! All integers are big-endian; durations are IEEE-754 doubles in
//! milliseconds.

use crate::endhost::{LatencySample, MeasurementReport, SampleStatus};
use crate::model::{DurationMs, NodeId, Role};
use crate::overlay::{DataMessage, Hop};

pub const MAX_PAYLOAD: usize = 1 << 20;
pub const PING_FRAME_LEN: usize = 1500;
const HEADER_LEN: usize = 5;
const PING_PAD: usize = PING_FRAME_LEN - HEADER_LEN - 4;

pub const T_HELLO: u8 = 0x01;
pub const T_PING: u8 = 0x02;
pub const T_PONG: u8 = 0x03;
pub const T_MEAS_REPORT: u8 = 0x04;
pub const T_ASSIGN: u8 = 0x05;
pub const T_REJECT: u8 = 0x06;
pub const T_LOAD_REPORT: u8 = 0x07;
pub const T_DATA: u8 = 0x08;
pub const T_BYE: u8 = 0x09;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello { node: NodeId },
    Ping { seq: u32 },
    Pong { seq: u32 },
    MeasReport(MeasurementReport),
    Assign { oh: NodeId },
    Reject,
    /// Load scaled to `0..=65535`.
    LoadReport { scaled: u16 },
    Data(DataMessage),
    Bye,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the 1 MiB limit")]
    Oversize(usize),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("stream closed inside a frame ({0} bytes pending)")]
    Truncated(usize),
}

pub fn load_to_wire(load: f64) -> u16 {
    (load.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn load_from_wire(scaled: u16) -> f64 {
    f64::from(scaled) / 65535.0
}

impl Message {
    pub fn load_report(load: f64) -> Self {
        Message::LoadReport {
            scaled: load_to_wire(load),
        }
    }

    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => T_HELLO,
            Message::Ping { .. } => T_PING,
            Message::Pong { .. } => T_PONG,
            Message::MeasReport(_) => T_MEAS_REPORT,
            Message::Assign { .. } => T_ASSIGN,
            Message::Reject => T_REJECT,
            Message::LoadReport { .. } => T_LOAD_REPORT,
            Message::Data(_) => T_DATA,
            Message::Bye => T_BYE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Ping { .. } => "ping",
            Message::Pong { .. } => "pong",
            Message::MeasReport(_) => "meas_report",
            Message::Assign { .. } => "assign",
            Message::Reject => "reject",
            Message::LoadReport { .. } => "load_report",
            Message::Data(_) => "data",
            Message::Bye => "bye",
        }
    }
}

fn put_f64(buf: &mut Vec<u8>, v: DurationMs) {
    buf.extend_from_slice(&v.ms().to_be_bytes());
}

fn encode_payload(msg: &Message, buf: &mut Vec<u8>) {
    match msg {
        Message::Hello { node } => {
            buf.extend_from_slice(&node.id.to_be_bytes());
            buf.push(node.role.to_byte());
        }
        Message::Ping { seq } => {
            buf.extend_from_slice(&seq.to_be_bytes());
            buf.resize(buf.len() + PING_PAD, 0);
        }
        Message::Pong { seq } => buf.extend_from_slice(&seq.to_be_bytes()),
        Message::MeasReport(r) => {
            buf.extend_from_slice(&r.eh.id.to_be_bytes());
            buf.push(r.eh.role.to_byte());
            put_f64(buf, r.m_i_ms);
            buf.extend_from_slice(&(r.samples.len() as u16).to_be_bytes());
            for s in &r.samples {
                buf.extend_from_slice(&s.oh.id.to_be_bytes());
                match (s.status, s.lats) {
                    (SampleStatus::Ok, Some(lats)) => {
                        buf.push(0);
                        put_f64(buf, s.conn_ms);
                        for l in lats {
                            put_f64(buf, l);
                        }
                    }
                    (SampleStatus::Ok, None) => unreachable!("Ok sample without latencies"),
                    (SampleStatus::ConnFailed(e), _) => {
                        buf.push(1);
                        put_f64(buf, s.conn_ms);
                        put_f64(buf, e);
                    }
                    (SampleStatus::TimedOut(e), _) => {
                        buf.push(2);
                        put_f64(buf, s.conn_ms);
                        put_f64(buf, e);
                    }
                }
            }
        }
        Message::Assign { oh } => buf.extend_from_slice(&oh.id.to_be_bytes()),
        Message::Reject | Message::Bye => {}
        Message::LoadReport { scaled } => buf.extend_from_slice(&scaled.to_be_bytes()),
        Message::Data(d) => {
            buf.extend_from_slice(&d.msg_id.to_be_bytes());
            buf.extend_from_slice(&d.origin_eh.id.to_be_bytes());
            buf.push(d.hop.to_byte());
            buf.extend_from_slice(&d.payload);
        }
    }
}

/// Encodes one message as a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(&[0; HEADER_LEN]);
    encode_payload(msg, &mut buf);
    let payload_len = buf.len() - HEADER_LEN;
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::Oversize(payload_len));
    }
    buf[..4].copy_from_slice(&(payload_len as u32 + 1).to_be_bytes());
    buf[4] = msg.type_byte();
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed("payload too short"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn duration(&mut self) -> Result<DurationMs, WireError> {
        let v = f64::from_bits(self.u64()?);
        DurationMs::try_new(v).ok_or(WireError::Malformed("invalid duration"))
    }

    fn end(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes"))
        }
    }
}

fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: payload };
    let msg = match ty {
        T_HELLO => {
            let id = r.u32()?;
            let role = Role::from_byte(r.u8()?).ok_or(WireError::Malformed("bad role"))?;
            Message::Hello {
                node: NodeId::new(role, id),
            }
        }
        T_PING => {
            let seq = r.u32()?;
            let pad = r.take(PING_PAD)?;
            if pad.iter().any(|&b| b != 0) {
                return Err(WireError::Malformed("non-zero ping padding"));
            }
            Message::Ping { seq }
        }
        T_PONG => Message::Pong { seq: r.u32()? },
        T_MEAS_REPORT => {
            let id = r.u32()?;
            let role = Role::from_byte(r.u8()?).ok_or(WireError::Malformed("bad role"))?;
            let m_i_ms = r.duration()?;
            let n = r.u16()?;
            let mut samples = Vec::with_capacity(usize::from(n));
            for _ in 0..n {
                let oh = NodeId::oh(r.u32()?);
                let status = r.u8()?;
                let conn_ms = r.duration()?;
                let sample = match status {
                    0 => LatencySample {
                        oh,
                        conn_ms,
                        lats: Some([r.duration()?, r.duration()?, r.duration()?]),
                        status: SampleStatus::Ok,
                    },
                    1 | 2 => {
                        let e = r.duration()?;
                        LatencySample {
                            oh,
                            conn_ms,
                            lats: None,
                            status: if status == 1 {
                                SampleStatus::ConnFailed(e)
                            } else {
                                SampleStatus::TimedOut(e)
                            },
                        }
                    }
                    _ => return Err(WireError::Malformed("bad sample status")),
                };
                samples.push(sample);
            }
            Message::MeasReport(MeasurementReport {
                eh: NodeId::new(role, id),
                samples,
                m_i_ms,
            })
        }
        T_ASSIGN => Message::Assign {
            oh: NodeId::oh(r.u32()?),
        },
        T_REJECT => Message::Reject,
        T_LOAD_REPORT => Message::LoadReport { scaled: r.u16()? },
        T_DATA => {
            let msg_id = r.u64()?;
            let origin_eh = NodeId::eh(r.u32()?);
            let hop = Hop::from_byte(r.u8()?).ok_or(WireError::Malformed("bad hop"))?;
            let payload = std::mem::take(&mut r.buf).to_vec();
            Message::Data(DataMessage {
                msg_id,
                origin_eh,
                hop,
                payload,
            })
        }
        T_BYE => Message::Bye,
        other => return Err(WireError::UnknownType(other)),
    };
    r.end()?;
    Ok(msg)
}

/// Decodes the first frame of `buf`. Returns `Ok(None)` when more bytes are
/// needed, otherwise the message and the bytes after it.
pub fn decode(buf: &[u8]) -> Result<Option<(Message, &[u8])>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(WireError::Malformed("zero length"));
    }
    if len - 1 > MAX_PAYLOAD {
        return Err(WireError::Oversize(len - 1));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let msg = decode_payload(buf[4], &buf[HEADER_LEN..4 + len])?;
    Ok(Some((msg, &buf[4 + len..])))
}

/// Streaming decoder owned by one connection.
#[derive(Default, Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if any.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        let pending = &self.buf[self.start..];
        match decode(pending)? {
            None => Ok(None),
            Some((msg, rest)) => {
                self.start = self.buf.len() - rest.len();
                if self.start > 64 * 1024 {
                    self.buf.drain(..self.start);
                    self.start = 0;
                }
                Ok(Some(msg))
            }
        }
    }

    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Call at end of stream; fails if a partial frame is buffered.
    pub fn finish(&self) -> Result<(), WireError> {
        match self.pending() {
            0 => Ok(()),
            n => Err(WireError::Truncated(n)),
        }
    }
}
