//! Wire format for LTP packets.
//!
//! Every datagram starts with a 9-byte header: 68 bits of fields followed by
//! 4 zero bits of padding. Fields are packed most-significant bit first.
//!
//! ```text
//!  bit 0        16                      40  42  44          56          68  72
//!  +------------+-----------------------+---+---+-----------+-----------+---+
//!  |  flow_id   |        seq_id         |imp|typ| rtprop_q  | btlbw_q   |pad|
//!  |   16 bit   |        24 bit         | 2 | 2 |  12 bit   |  12 bit   | 4 |
//!  +------------+-----------------------+---+---+-----------+-----------+---+
//! ```
//!
//! Payload roles:
//! - `Registration`: two big-endian `u32`: segment count, total byte length.
//! - `Data`: one segment, at most [`MAX_SEGMENT_BYTES`].
//! - `Ack`, `End`: empty.
//!
//! Registration and End occupy the two highest sequence ids so that an Ack,
//! which only echoes `(flow_id, seq_id)`, identifies the packet it confirms.

use std::time::Duration;

use thiserror::Error;

pub const HEADER_LEN: usize = 9;
pub const MTU: usize = 1500;
/// IPv4 (20) + UDP (8).
pub const IP_UDP_OVERHEAD: usize = 28;
pub const MAX_DATAGRAM: usize = MTU - IP_UDP_OVERHEAD;
/// Largest multiple of 4 that fits in a datagram after the header.
pub const MAX_SEGMENT_BYTES: usize = (MAX_DATAGRAM - HEADER_LEN) / 4 * 4;

pub const SEQ_BITS: u32 = 24;
pub const SEQ_MAX: u32 = (1 << SEQ_BITS) - 1;
/// Sequence id carried by Registration packets and their Acks.
pub const REGISTRATION_SEQ: SeqId = SeqId(SEQ_MAX);
/// Sequence id carried by End packets and their Acks.
pub const END_SEQ: SeqId = SeqId(SEQ_MAX - 1);
/// Highest sequence id usable by a Data segment.
pub const MAX_DATA_SEQ: u32 = SEQ_MAX - 2;

pub const Q12_MAX: u16 = (1 << 12) - 1;
pub const RTPROP_UNIT: Duration = Duration::from_micros(100);
pub const BTLBW_UNIT_BPS: f64 = 10e6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("{ptype:?} packet with invalid payload length {len}")]
    BadPayload { ptype: PacketType, len: usize },
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM}-byte limit")]
    Oversized(usize),
}

/// 24-bit segment index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeqId(u32);

impl SeqId {
    pub const fn new(v: u32) -> Option<SeqId> {
        if v <= SEQ_MAX {
            Some(SeqId(v))
        } else {
            None
        }
    }

    pub const fn get(self) -> u32 {
        self.0
    }

    pub fn is_data(self) -> bool {
        self.0 <= MAX_DATA_SEQ
    }
}

/// Unsigned 12-bit quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Q12(u16);

impl Q12 {
    pub const ZERO: Q12 = Q12(0);

    pub const fn new(v: u16) -> Option<Q12> {
        if v <= Q12_MAX {
            Some(Q12(v))
        } else {
            None
        }
    }

    pub const fn saturating(v: u64) -> Q12 {
        if v > Q12_MAX as u64 {
            Q12(Q12_MAX)
        } else {
            Q12(v as u16)
        }
    }

    pub const fn get(self) -> u16 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Importance {
    NotCritical,
    Critical,
}

impl Importance {
    fn code(self) -> u8 {
        match self {
            Importance::NotCritical => 0b00,
            Importance::Critical => 0b11,
        }
    }

    fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0b00 => Ok(Importance::NotCritical),
            0b11 => Ok(Importance::Critical),
            _ => Err(WireError::MalformedHeader("undefined importance code")),
        }
    }

    pub fn is_critical(self) -> bool {
        self == Importance::Critical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketType {
    Registration,
    Data,
    Ack,
    End,
}

impl PacketType {
    fn code(self) -> u8 {
        match self {
            PacketType::Registration => 0b00,
            PacketType::Data => 0b01,
            PacketType::Ack => 0b10,
            PacketType::End => 0b11,
        }
    }

    fn from_code(code: u8) -> Self {
        match code & 0b11 {
            0b00 => PacketType::Registration,
            0b01 => PacketType::Data,
            0b10 => PacketType::Ack,
            _ => PacketType::End,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketHeader {
    pub flow_id: u16,
    pub seq_id: SeqId,
    pub importance: Importance,
    pub ptype: PacketType,
    /// Sender's RTprop estimate in units of 100 µs; 0 means unknown.
    pub rtprop_q: Q12,
    /// Sender's BtlBw estimate in units of 10 Mbit/s; 0 means unknown.
    pub btlbw_q: Q12,
}

pub fn encode_header(h: &PacketHeader) -> [u8; HEADER_LEN] {
    let bits: u128 = (u128::from(h.flow_id) << 56)
        | (u128::from(h.seq_id.0) << 32)
        | (u128::from(h.importance.code()) << 30)
        | (u128::from(h.ptype.code()) << 28)
        | (u128::from(h.rtprop_q.0) << 16)
        | (u128::from(h.btlbw_q.0) << 4);
    let wide = bits.to_be_bytes();
    let mut out = [0u8; HEADER_LEN];
    out.copy_from_slice(&wide[16 - HEADER_LEN..]);
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<PacketHeader, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::MalformedHeader("shorter than 9 bytes"));
    }
    let mut wide = [0u8; 16];
    wide[16 - HEADER_LEN..].copy_from_slice(&bytes[..HEADER_LEN]);
    let bits = u128::from_be_bytes(wide);
    if bits & 0xF != 0 {
        return Err(WireError::MalformedHeader("nonzero pad bits"));
    }
    Ok(PacketHeader {
        flow_id: (bits >> 56) as u16,
        seq_id: SeqId(((bits >> 32) as u32) & SEQ_MAX),
        importance: Importance::from_code(((bits >> 30) & 0b11) as u8)?,
        ptype: PacketType::from_code(((bits >> 28) & 0b11) as u8),
        rtprop_q: Q12(((bits >> 16) as u16) & Q12_MAX),
        btlbw_q: Q12(((bits >> 4) as u16) & Q12_MAX),
    })
}

/// Quantizes congestion estimates for the header echo. Saturates at 4095.
pub fn quantize_cc(rtprop: Duration, btlbw_bps: f64) -> (Q12, Q12) {
    let rt = (rtprop.as_nanos() as f64 / RTPROP_UNIT.as_nanos() as f64).round();
    let bw = (btlbw_bps.max(0.0) / BTLBW_UNIT_BPS).round();
    (Q12::saturating(rt as u64), Q12::saturating(bw as u64))
}

/// Inverse of [`quantize_cc`]; `None` for fields carrying the "unknown" code.
pub fn dequantize_cc(rtprop_q: Q12, btlbw_q: Q12) -> (Option<Duration>, Option<f64>) {
    let rt = (rtprop_q.0 > 0).then(|| RTPROP_UNIT * u32::from(rtprop_q.0));
    let bw = (btlbw_q.0 > 0).then(|| f64::from(btlbw_q.0) * BTLBW_UNIT_BPS);
    (rt, bw)
}

/// Payload of a Registration packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Registration {
    pub segments: u32,
    pub total_bytes: u32,
}

impl Registration {
    pub const LEN: usize = 8;

    pub fn to_bytes(self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..4].copy_from_slice(&self.segments.to_be_bytes());
        out[4..].copy_from_slice(&self.total_bytes.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Registration> {
        if b.len() != Self::LEN {
            return None;
        }
        Some(Registration {
            segments: u32::from_be_bytes(b[..4].try_into().ok()?),
            total_bytes: u32::from_be_bytes(b[4..].try_into().ok()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: PacketHeader,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn registration(flow_id: u16, reg: Registration, cc: (Q12, Q12)) -> Packet {
        Packet {
            header: PacketHeader {
                flow_id,
                seq_id: REGISTRATION_SEQ,
                importance: Importance::Critical,
                ptype: PacketType::Registration,
                rtprop_q: cc.0,
                btlbw_q: cc.1,
            },
            payload: reg.to_bytes().to_vec(),
        }
    }

    pub fn data(flow_id: u16, seq_id: SeqId, importance: Importance, payload: Vec<u8>, cc: (Q12, Q12)) -> Packet {
        Packet {
            header: PacketHeader {
                flow_id,
                seq_id,
                importance,
                ptype: PacketType::Data,
                rtprop_q: cc.0,
                btlbw_q: cc.1,
            },
            payload,
        }
    }

    pub fn ack(flow_id: u16, seq_id: SeqId) -> Packet {
        Packet {
            header: PacketHeader {
                flow_id,
                seq_id,
                importance: Importance::NotCritical,
                ptype: PacketType::Ack,
                rtprop_q: Q12::ZERO,
                btlbw_q: Q12::ZERO,
            },
            payload: Vec::new(),
        }
    }

    /// End packet. Sent by a sender it means "all queued data sent"; sent by a
    /// receiver it is the Early Close stop signal.
    pub fn end(flow_id: u16, cc: (Q12, Q12)) -> Packet {
        Packet {
            header: PacketHeader {
                flow_id,
                seq_id: END_SEQ,
                importance: Importance::Critical,
                ptype: PacketType::End,
                rtprop_q: cc.0,
                btlbw_q: cc.1,
            },
            payload: Vec::new(),
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&encode_header(&self.header));
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
        if bytes.len() > MAX_DATAGRAM {
            return Err(WireError::Oversized(bytes.len()));
        }
        let header = decode_header(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        let ok = match header.ptype {
            PacketType::Registration => payload.len() == Registration::LEN,
            PacketType::Data => !payload.is_empty() && payload.len() <= MAX_SEGMENT_BYTES,
            PacketType::Ack | PacketType::End => payload.is_empty(),
        };
        if !ok {
            return Err(WireError::BadPayload { ptype: header.ptype, len: payload.len() });
        }
        Ok(Packet { header, payload: payload.to_vec() })
    }

    pub fn registration_payload(&self) -> Option<Registration> {
        match self.header.ptype {
            PacketType::Registration => Registration::from_bytes(&self.payload),
            _ => None,
        }
    }
}
