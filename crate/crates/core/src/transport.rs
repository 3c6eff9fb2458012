//! Wire protocol: framing, 32-bit scalar payloads, byte metering, and the
//! loopback and TCP channels that carry frames.
//!
//! ```text
//! frame = msg_type u8 | round u32 | client_id u32 | payload_len u32 | payload
//! ```
//!
//! All integers are little-endian. Vector payloads are IEEE-754 `f32`
//! little-endian. A seed envelope payload is `recipient u32 | sealed bytes`
//! and its `client_id` is the sender.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};

use thiserror::Error;

use crate::error::{Error, Result};
use crate::projection::SeedEnvelope;

pub const HEADER_LEN: usize = 13;
pub const SERVER_ID: u32 = 0xFFFF_FFFF;
pub const SCALAR_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    SeedEnvelope = 1,
    ClientUpdate = 2,
    ServerBroadcast = 3,
    FullParams = 4,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::SeedEnvelope),
            2 => Some(Self::ClientUpdate),
            3 => Some(Self::ServerBroadcast),
            4 => Some(Self::FullParams),
            _ => None,
        }
    }

    pub fn carries_vector(self) -> bool {
        self != Self::SeedEnvelope
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload length mismatch: declared {declared}, frame carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed payload: {0}")]
    BadPayload(&'static str),
    #[error("non-finite scalar at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    /// Frame carrying `values` as 32-bit scalars.
    pub fn vector(msg_type: MsgType, round: u32, client_id: u32, values: &[f64]) -> Result<Self> {
        if !msg_type.carries_vector() {
            return Err(Error::InvalidArgument(format!("{msg_type:?} does not carry a vector")));
        }
        let bytes = values
            .len()
            .checked_mul(SCALAR_BYTES)
            .filter(|&b| b <= u32::MAX as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("vector of {} scalars is too long to frame", values.len())))?;
        let mut payload = Vec::with_capacity(bytes);
        for (i, &v) in values.iter().enumerate() {
            let s = v as f32;
            if !s.is_finite() {
                return Err(Error::InvalidArgument(format!("scalar {i} ({v}) is not finite in 32 bits")));
            }
            payload.extend_from_slice(&s.to_le_bytes());
        }
        Ok(Self {
            msg_type,
            round,
            client_id,
            payload,
        })
    }

    pub fn seed_envelope(env: &SeedEnvelope) -> Self {
        let mut payload = Vec::with_capacity(4 + env.sealed_payload.len());
        payload.extend_from_slice(&env.recipient_client.to_le_bytes());
        payload.extend_from_slice(&env.sealed_payload);
        Self {
            msg_type: MsgType::SeedEnvelope,
            round: env.round,
            client_id: env.sender_client,
            payload,
        }
    }

    /// Scalars of a vector frame, widened to `f64`.
    pub fn to_vector(&self) -> Result<Vec<f64>, DecodeError> {
        if !self.msg_type.carries_vector() {
            return Err(DecodeError::BadPayload("seed envelope carries no vector"));
        }
        decode_scalars(&self.payload)
    }

    pub fn to_envelope(&self) -> Result<SeedEnvelope, DecodeError> {
        if self.msg_type != MsgType::SeedEnvelope {
            return Err(DecodeError::BadPayload("not a seed envelope"));
        }
        if self.payload.len() < 4 {
            return Err(DecodeError::BadPayload("seed envelope shorter than its recipient field"));
        }
        let (recipient, sealed) = self.payload.split_at(4);
        Ok(SeedEnvelope {
            round: self.round,
            sender_client: self.client_id,
            recipient_client: u32::from_le_bytes(recipient.try_into().expect("4 bytes")),
            sealed_payload: sealed.to_vec(),
        })
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

fn decode_scalars(payload: &[u8]) -> Result<Vec<f64>, DecodeError> {
    if !payload.len().is_multiple_of(SCALAR_BYTES) {
        return Err(DecodeError::BadPayload("vector payload is not a whole number of scalars"));
    }
    payload
        .chunks_exact(SCALAR_BYTES)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(DecodeError::NonFinite(i))
            }
        })
        .collect()
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let len = u32::try_from(msg.payload.len())
        .map_err(|_| Error::InvalidArgument(format!("payload of {} bytes is too long", msg.payload.len())))?;
    let mut out = Vec::with_capacity(msg.frame_len());
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

struct Header {
    msg_type: MsgType,
    round: u32,
    client_id: u32,
    payload_len: usize,
}

fn decode_header(bytes: &[u8]) -> Result<Header, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let msg_type = MsgType::from_byte(bytes[0]).ok_or(DecodeError::UnknownType(bytes[0]))?;
    Ok(Header {
        msg_type,
        round: word(1),
        client_id: word(5),
        payload_len: word(9) as usize,
    })
}

/// Parses one complete frame. Vector payloads are checked to be whole,
/// finite scalars.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    let h = decode_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < h.payload_len {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN + h.payload_len,
            available: bytes.len(),
        });
    }
    if body.len() > h.payload_len {
        return Err(DecodeError::LengthMismatch {
            declared: h.payload_len,
            actual: body.len(),
        });
    }
    let msg = WireMessage {
        msg_type: h.msg_type,
        round: h.round,
        client_id: h.client_id,
        payload: body.to_vec(),
    };
    if msg.msg_type.carries_vector() {
        decode_scalars(&msg.payload)?;
    } else if msg.payload.len() < 4 {
        return Err(DecodeError::BadPayload("seed envelope shorter than its recipient field"));
    }
    Ok(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Payload byte counts. Seed envelopes and frame headers are tallied
/// separately and never enter the up/down payload counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteMeter {
    pub per_round_up: u64,
    pub per_round_down: u64,
    pub cumulative: u64,
    pub envelope_bytes: u64,
    pub header_bytes: u64,
}

impl ByteMeter {
    pub fn record(&mut self, msg: &WireMessage, dir: Direction) {
        let payload = msg.payload.len() as u64;
        self.header_bytes += HEADER_LEN as u64;
        if msg.msg_type == MsgType::SeedEnvelope {
            self.envelope_bytes += payload;
            return;
        }
        match dir {
            Direction::Up => self.per_round_up += payload,
            Direction::Down => self.per_round_down += payload,
        }
        self.cumulative += payload;
    }

    /// Clears the per-round counters.
    pub fn start_round(&mut self) {
        self.per_round_up = 0;
        self.per_round_down = 0;
    }

    /// Payload plus headers plus envelopes.
    pub fn total_with_overhead(&self) -> u64 {
        self.cumulative + self.envelope_bytes + self.header_bytes
    }
}

pub fn meter(mut m: ByteMeter, msg: &WireMessage, dir: Direction) -> ByteMeter {
    m.record(msg, dir);
    m
}

/// Bidirectional, ordered, reliable frame pipe.
pub trait Channel: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
    /// Closes the sending side; the peer's next receive fails.
    fn close(&mut self);
}

pub fn transport_send(ch: &mut dyn Channel, msg: &WireMessage) -> Result<()> {
    ch.send_frame(&encode(msg)?)
}

pub fn transport_recv(ch: &mut dyn Channel) -> Result<WireMessage> {
    let frame = ch.recv_frame()?;
    Ok(decode(&frame)?)
}

fn disconnected() -> Error {
    Error::Transport("peer disconnected".into())
}

pub struct LoopbackChannel {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn loopback_pair() -> (LoopbackChannel, LoopbackChannel) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        LoopbackChannel { tx: Some(a_tx), rx: a_rx },
        LoopbackChannel { tx: Some(b_tx), rx: b_rx },
    )
}

impl Channel for LoopbackChannel {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        let tx = self.tx.as_ref().ok_or_else(disconnected)?;
        tx.send(frame.to_vec()).map_err(|_| disconnected())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.rx.recv().map_err(|_| disconnected())
    }

    fn close(&mut self) {
        self.tx = None;
    }
}

pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }
}

fn map_io(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::NotConnected => disconnected(),
        _ => Error::Transport(e.to_string()),
    }
}

impl Channel for TcpChannel {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.stream.write_all(frame).map_err(map_io)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut frame = vec![0u8; HEADER_LEN];
        self.stream.read_exact(&mut frame).map_err(map_io)?;
        let h = decode_header(&frame)?;
        frame.resize(HEADER_LEN + h.payload_len, 0);
        self.stream.read_exact(&mut frame[HEADER_LEN..]).map_err(map_io)?;
        Ok(frame)
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Connects `k` client sockets to a listener on `addr` (port 0 picks a free
/// port). Returns `(server_side, client_side)` pairs in client order.
pub fn tcp_pairs(addr: &str, k: usize) -> Result<Vec<(TcpChannel, TcpChannel)>> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
    let local = listener.local_addr()?;
    (0..k)
        .map(|_| {
            let client = TcpChannel::connect(local)?;
            let (server, _) = listener.accept()?;
            Ok((TcpChannel::new(server)?, client))
        })
        .collect()
}
