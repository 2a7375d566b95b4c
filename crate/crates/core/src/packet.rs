//! IPv4/IPv6 + TCP packets.
//!
//! Packets are held as structured values and converted to and from their
//! wire representation with [`Packet::serialize`] and [`Packet::parse`].
//! Every mutating helper in this module leaves both the TCP checksum and (for
//! IPv4) the header checksum valid.
//!
//! The discovery identifier travels in a shared-use experimental TCP option:
//!
//! ```text
//! +--------+--------+--------+--------+------------------ ... ----+
//! | kind   | length | experiment id   | identifier (16 bytes)     |
//! | 254    | 20     | 0xEB 0x9F       |                           |
//! +--------+--------+--------+--------+------------------ ... ----+
//! ```

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTO_TCP: u8 = 6;

pub const OPT_END: u8 = 0;
pub const OPT_NOP: u8 = 1;
pub const OPT_MSS: u8 = 2;
pub const OPT_WINDOW_SCALE: u8 = 3;
pub const OPT_SACK_PERMITTED: u8 = 4;
pub const OPT_SACK: u8 = 5;
pub const OPT_TIMESTAMP: u8 = 8;

/// Option kind used for the discovery identifier (shared experimental kind).
pub const DISCOVERY_KIND: u8 = 254;
/// Experiment identifier that prefixes the discovery option payload.
pub const DISCOVERY_EXID: u16 = 0xEB9F;
/// Serialized size of the discovery option: kind, length, ExID, identifier.
pub const DISCOVERY_OPTION_LEN: usize = 20;

pub const IPV4_MIN_HEADER: usize = 20;
pub const IPV6_HEADER: usize = 40;
pub const TCP_MIN_HEADER: usize = 20;
pub const TCP_MAX_HEADER: usize = 60;

const DEFAULT_TTL: u8 = 64;
const DONT_FRAGMENT: u16 = 0x4000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("truncated packet: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unsupported IP version {0}")]
    UnsupportedVersion(u8),
    #[error("not a TCP packet (protocol {0})")]
    NotTcp(u8),
    #[error("invalid TCP data offset {0}")]
    BadDataOffset(u8),
    #[error("invalid IPv4 header length {0}")]
    BadIhl(u8),
    #[error("inconsistent length field: {0}")]
    LengthMismatch(&'static str),
    #[error("malformed TCP option at byte {0} of the options region")]
    MalformedOption(usize),
    #[error("structural error: {0}")]
    Structure(&'static str),
    #[error("no room for the discovery option in a {header_len}-byte TCP header")]
    NoRoom { header_len: usize },
    #[error("packet already carries a discovery option")]
    AlreadyTagged,
    #[error("source and destination address families differ")]
    FamilyMismatch,
}

/// Ones-complement of the ones-complement sum of big-endian 16-bit words.
/// Odd-length input is padded with a trailing zero byte.
pub fn internet_checksum(bytes: &[u8]) -> u16 {
    let mut acc = Checksum::default();
    acc.add(bytes);
    acc.finish()
}

/// Streaming internet checksum, used to fold a pseudo-header and a segment
/// without concatenating them. Chunks must be added at even offsets except
/// for the final one.
#[derive(Debug, Default, Clone, Copy)]
pub struct Checksum {
    sum: u64,
}

impl Checksum {
    pub fn add(&mut self, bytes: &[u8]) {
        let mut chunks = bytes.chunks_exact(2);
        for w in &mut chunks {
            self.sum += u64::from(u16::from_be_bytes([w[0], w[1]]));
        }
        if let [last] = chunks.remainder() {
            self.sum += u64::from(*last) << 8;
        }
    }

    pub fn add_u16(&mut self, v: u16) {
        self.sum += u64::from(v);
    }

    pub fn add_u32(&mut self, v: u32) {
        self.sum += u64::from(v >> 16) + u64::from(v & 0xffff);
    }

    pub fn finish(self) -> u16 {
        let mut s = self.sum;
        while s >> 16 != 0 {
            s = (s & 0xffff) + (s >> 16);
        }
        !(s as u16)
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
        const URG = 0x20;
        const ECE = 0x40;
        const CWR = 0x80;
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TcpFlags, char); 6] = [
            (TcpFlags::SYN, 'S'),
            (TcpFlags::ACK, '.'),
            (TcpFlags::PSH, 'P'),
            (TcpFlags::FIN, 'F'),
            (TcpFlags::RST, 'R'),
            (TcpFlags::URG, 'U'),
        ];
        for (flag, c) in NAMES {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// The 16-byte value that links a sending process to the receiving one.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiscoveryIdentifier(pub [u8; 16]);

impl DiscoveryIdentifier {
    pub fn from_parts(nonce: u64, counter: u64) -> Self {
        let mut v = [0u8; 16];
        v[..8].copy_from_slice(&nonce.to_be_bytes());
        v[8..].copy_from_slice(&counter.to_be_bytes());
        DiscoveryIdentifier(v)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Display for DiscoveryIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for DiscoveryIdentifier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.len() != 32 || !s.is_ascii() {
            return Err(format!("identifier must be 32 hex digits: {s}"));
        }
        let mut v = [0u8; 16];
        for (i, b) in v.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| format!("{s}: {e}"))?;
        }
        Ok(DiscoveryIdentifier(v))
    }
}

impl Serialize for DiscoveryIdentifier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DiscoveryIdentifier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for DiscoveryIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DiscoveryIdentifier({self})")
    }
}

/// A TCP option. Kinds 0 (end of list) and 1 (no-op) serialize as a single
/// byte and carry no payload; every other kind serializes as
/// `kind, payload.len() + 2, payload`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TcpOption {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl TcpOption {
    pub fn new(kind: u8, payload: impl Into<Vec<u8>>) -> Self {
        TcpOption { kind, payload: payload.into() }
    }

    pub fn end() -> Self {
        TcpOption { kind: OPT_END, payload: Vec::new() }
    }

    pub fn nop() -> Self {
        TcpOption { kind: OPT_NOP, payload: Vec::new() }
    }

    pub fn mss(mss: u16) -> Self {
        TcpOption::new(OPT_MSS, mss.to_be_bytes())
    }

    pub fn discovery(id: &DiscoveryIdentifier) -> Self {
        let mut payload = Vec::with_capacity(DISCOVERY_OPTION_LEN - 2);
        payload.extend_from_slice(&DISCOVERY_EXID.to_be_bytes());
        payload.extend_from_slice(id.as_bytes());
        TcpOption { kind: DISCOVERY_KIND, payload }
    }

    fn is_single_byte(&self) -> bool {
        self.kind == OPT_END || self.kind == OPT_NOP
    }

    pub fn wire_len(&self) -> usize {
        if self.is_single_byte() {
            1
        } else {
            self.payload.len() + 2
        }
    }

    /// True for any option in the discovery experiment space, well-formed or not.
    fn is_discovery_experiment(&self) -> bool {
        self.kind == DISCOVERY_KIND && self.payload.get(..2) == Some(&DISCOVERY_EXID.to_be_bytes())
    }

    fn discovery_id(&self) -> Option<DiscoveryIdentifier> {
        if !self.is_discovery_experiment() || self.payload.len() != DISCOVERY_OPTION_LEN - 2 {
            return None;
        }
        let mut v = [0u8; 16];
        v.copy_from_slice(&self.payload[2..]);
        Some(DiscoveryIdentifier(v))
    }

    /// Options a conservative middlebox recognises.
    pub fn is_well_known(&self) -> bool {
        matches!(
            self.kind,
            OPT_END | OPT_NOP | OPT_MSS | OPT_WINDOW_SCALE | OPT_SACK_PERMITTED | OPT_SACK | OPT_TIMESTAMP
        )
    }
}

fn options_wire_len(options: &[TcpOption]) -> usize {
    options.iter().map(TcpOption::wire_len).sum()
}

fn padded(len: usize) -> usize {
    (len + 3) & !3
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ipv4Header {
    pub dscp_ecn: u8,
    pub identification: u16,
    pub flags_fragment: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub checksum: u16,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    /// Raw IPv4 options, a multiple of four bytes.
    pub options: Vec<u8>,
}

impl Ipv4Header {
    pub fn header_len(&self) -> usize {
        IPV4_MIN_HEADER + self.options.len()
    }

    fn write(&self, total_len: u16, out: &mut Vec<u8>) {
        let ihl = (self.header_len() / 4) as u8;
        out.push(0x40 | ihl);
        out.push(self.dscp_ecn);
        out.extend_from_slice(&total_len.to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&self.flags_fragment.to_be_bytes());
        out.push(self.ttl);
        out.push(self.protocol);
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        out.extend_from_slice(&self.options);
    }

    fn compute_checksum(&self, total_len: u16) -> u16 {
        let mut bytes = Vec::with_capacity(self.header_len());
        let zeroed = Ipv4Header { checksum: 0, ..self.clone() };
        zeroed.write(total_len, &mut bytes);
        internet_checksum(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ipv6Header {
    pub traffic_class: u8,
    /// 20-bit flow label.
    pub flow_label: u32,
    pub next_header: u8,
    pub hop_limit: u8,
    pub src: Ipv6Addr,
    pub dst: Ipv6Addr,
}

impl Ipv6Header {
    fn write(&self, payload_len: u16, out: &mut Vec<u8>) {
        let word = (6u32 << 28) | (u32::from(self.traffic_class) << 20) | (self.flow_label & 0xfffff);
        out.extend_from_slice(&word.to_be_bytes());
        out.extend_from_slice(&payload_len.to_be_bytes());
        out.push(self.next_header);
        out.push(self.hop_limit);
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IpHeader {
    V4(Ipv4Header),
    V6(Ipv6Header),
}

impl IpHeader {
    pub fn version(&self) -> u8 {
        match self {
            IpHeader::V4(_) => 4,
            IpHeader::V6(_) => 6,
        }
    }

    pub fn src(&self) -> IpAddr {
        match self {
            IpHeader::V4(h) => IpAddr::V4(h.src),
            IpHeader::V6(h) => IpAddr::V6(h.src),
        }
    }

    pub fn dst(&self) -> IpAddr {
        match self {
            IpHeader::V4(h) => IpAddr::V4(h.dst),
            IpHeader::V6(h) => IpAddr::V6(h.dst),
        }
    }

    pub fn protocol(&self) -> u8 {
        match self {
            IpHeader::V4(h) => h.protocol,
            IpHeader::V6(h) => h.next_header,
        }
    }

    pub fn ttl(&self) -> u8 {
        match self {
            IpHeader::V4(h) => h.ttl,
            IpHeader::V6(h) => h.hop_limit,
        }
    }

    /// IPv4 header checksum; `None` for IPv6.
    pub fn header_checksum(&self) -> Option<u16> {
        match self {
            IpHeader::V4(h) => Some(h.checksum),
            IpHeader::V6(_) => None,
        }
    }

    pub fn header_len(&self) -> usize {
        match self {
            IpHeader::V4(h) => h.header_len(),
            IpHeader::V6(_) => IPV6_HEADER,
        }
    }

    fn set_src(&mut self, addr: IpAddr) -> Result<(), PacketError> {
        match (self, addr) {
            (IpHeader::V4(h), IpAddr::V4(a)) => h.src = a,
            (IpHeader::V6(h), IpAddr::V6(a)) => h.src = a,
            _ => return Err(PacketError::FamilyMismatch),
        }
        Ok(())
    }

    fn set_dst(&mut self, addr: IpAddr) -> Result<(), PacketError> {
        match (self, addr) {
            (IpHeader::V4(h), IpAddr::V4(a)) => h.dst = a,
            (IpHeader::V6(h), IpAddr::V6(a)) => h.dst = a,
            _ => return Err(PacketError::FamilyMismatch),
        }
        Ok(())
    }

    /// Adds the TCP pseudo-header for `segment_len` bytes of TCP.
    fn pseudo_header(&self, segment_len: usize, acc: &mut Checksum) {
        match self {
            IpHeader::V4(h) => {
                acc.add(&h.src.octets());
                acc.add(&h.dst.octets());
                acc.add_u16(u16::from(h.protocol));
                acc.add_u16(segment_len as u16);
            }
            IpHeader::V6(h) => {
                acc.add(&h.src.octets());
                acc.add(&h.dst.octets());
                acc.add_u32(segment_len as u32);
                acc.add_u16(u16::from(h.next_header));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// Header length in 32-bit words, 5..=15.
    pub data_offset: u8,
    /// The four bits between the data offset and the flags (reserved + NS).
    pub reserved: u8,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub urgent_ptr: u16,
    /// Options in wire order; end-of-list padding shows up as explicit
    /// `OPT_END` entries after a parse.
    pub options: Vec<TcpOption>,
}

impl TcpHeader {
    pub fn new(src_port: u16, dst_port: u16, seq: u32, ack: u32, flags: TcpFlags) -> Self {
        TcpHeader {
            src_port,
            dst_port,
            seq,
            ack,
            data_offset: 5,
            reserved: 0,
            flags,
            window: 65535,
            checksum: 0,
            urgent_ptr: 0,
            options: Vec::new(),
        }
    }

    pub fn header_len(&self) -> usize {
        usize::from(self.data_offset) * 4
    }

    /// Replaces the options, padding with end-of-list bytes to a four-byte
    /// boundary and updating `data_offset`. Checksums are not touched.
    pub fn set_options(&mut self, mut options: Vec<TcpOption>) -> Result<(), PacketError> {
        let len = options_wire_len(&options);
        if TCP_MIN_HEADER + padded(len) > TCP_MAX_HEADER {
            return Err(PacketError::Structure("options exceed 40 bytes"));
        }
        for _ in len..padded(len) {
            options.push(TcpOption::end());
        }
        self.data_offset = ((TCP_MIN_HEADER + padded(len)) / 4) as u8;
        self.options = options;
        Ok(())
    }

    fn validate(&self) -> Result<(), PacketError> {
        if !(5..=15).contains(&self.data_offset) {
            return Err(PacketError::BadDataOffset(self.data_offset));
        }
        for opt in &self.options {
            if opt.is_single_byte() && !opt.payload.is_empty() {
                return Err(PacketError::Structure("end/no-op option with payload"));
            }
            if opt.payload.len() > 253 {
                return Err(PacketError::Structure("option payload too long"));
            }
        }
        let opt_len = padded(options_wire_len(&self.options));
        if TCP_MIN_HEADER + opt_len != self.header_len() {
            return Err(PacketError::Structure("data offset does not match options"));
        }
        Ok(())
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.push((self.data_offset << 4) | (self.reserved & 0x0f));
        out.push(self.flags.bits());
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.urgent_ptr.to_be_bytes());
        let start = out.len();
        for opt in &self.options {
            out.push(opt.kind);
            if !opt.is_single_byte() {
                out.push((opt.payload.len() + 2) as u8);
                out.extend_from_slice(&opt.payload);
            }
        }
        let written = out.len() - start;
        out.resize(start + padded(written), OPT_END);
    }

    fn parse(bytes: &[u8]) -> Result<(TcpHeader, usize), PacketError> {
        if bytes.len() < TCP_MIN_HEADER {
            return Err(PacketError::Truncated { need: TCP_MIN_HEADER, have: bytes.len() });
        }
        let data_offset = bytes[12] >> 4;
        if data_offset < 5 {
            return Err(PacketError::BadDataOffset(data_offset));
        }
        let header_len = usize::from(data_offset) * 4;
        if bytes.len() < header_len {
            return Err(PacketError::Truncated { need: header_len, have: bytes.len() });
        }
        let options = parse_options(&bytes[TCP_MIN_HEADER..header_len])?;
        let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let be32 = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let header = TcpHeader {
            src_port: be16(0),
            dst_port: be16(2),
            seq: be32(4),
            ack: be32(8),
            data_offset,
            reserved: bytes[12] & 0x0f,
            flags: TcpFlags::from_bits_retain(bytes[13]),
            window: be16(14),
            checksum: be16(16),
            urgent_ptr: be16(18),
            options,
        };
        Ok((header, header_len))
    }
}

fn parse_options(mut region: &[u8]) -> Result<Vec<TcpOption>, PacketError> {
    let total = region.len();
    let mut options = Vec::new();
    while let Some(&kind) = region.first() {
        if kind == OPT_END || kind == OPT_NOP {
            options.push(TcpOption { kind, payload: Vec::new() });
            region = &region[1..];
            continue;
        }
        let at = total - region.len();
        let len = usize::from(*region.get(1).ok_or(PacketError::MalformedOption(at))?);
        if len < 2 || len > region.len() {
            return Err(PacketError::MalformedOption(at));
        }
        options.push(TcpOption { kind, payload: region[2..len].to_vec() });
        region = &region[len..];
    }
    Ok(options)
}

/// Transport five-tuple, oriented from `src` to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub protocol: u8,
    pub src: SocketAddr,
    pub dst: SocketAddr,
}

impl FiveTuple {
    pub fn tcp(src: SocketAddr, dst: SocketAddr) -> Self {
        FiveTuple { protocol: PROTO_TCP, src, dst }
    }

    pub fn reversed(&self) -> Self {
        FiveTuple { protocol: self.protocol, src: self.dst, dst: self.src }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = if self.protocol == PROTO_TCP { "tcp".to_string() } else { self.protocol.to_string() };
        write!(f, "{proto} {}>{}", self.src, self.dst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Packet {
    pub ip: IpHeader,
    pub tcp: TcpHeader,
    pub payload: Vec<u8>,
}

impl Packet {
    /// Builds a TCP packet with default IP fields (TTL 64, DF set) and valid
    /// checksums.
    pub fn tcp(
        src: SocketAddr,
        dst: SocketAddr,
        flags: TcpFlags,
        seq: u32,
        ack: u32,
        payload: impl Into<Vec<u8>>,
    ) -> Result<Packet, PacketError> {
        let ip = match (src.ip(), dst.ip()) {
            (IpAddr::V4(s), IpAddr::V4(d)) => IpHeader::V4(Ipv4Header {
                dscp_ecn: 0,
                identification: 0,
                flags_fragment: DONT_FRAGMENT,
                ttl: DEFAULT_TTL,
                protocol: PROTO_TCP,
                checksum: 0,
                src: s,
                dst: d,
                options: Vec::new(),
            }),
            (IpAddr::V6(s), IpAddr::V6(d)) => IpHeader::V6(Ipv6Header {
                traffic_class: 0,
                flow_label: 0,
                next_header: PROTO_TCP,
                hop_limit: DEFAULT_TTL,
                src: s,
                dst: d,
            }),
            _ => return Err(PacketError::FamilyMismatch),
        };
        let mut p =
            Packet { ip, tcp: TcpHeader::new(src.port(), dst.port(), seq, ack, flags), payload: payload.into() };
        p.refresh_checksums();
        Ok(p)
    }

    pub fn five_tuple(&self) -> FiveTuple {
        FiveTuple {
            protocol: self.ip.protocol(),
            src: SocketAddr::new(self.ip.src(), self.tcp.src_port),
            dst: SocketAddr::new(self.ip.dst(), self.tcp.dst_port),
        }
    }

    pub fn src(&self) -> SocketAddr {
        SocketAddr::new(self.ip.src(), self.tcp.src_port)
    }

    pub fn dst(&self) -> SocketAddr {
        SocketAddr::new(self.ip.dst(), self.tcp.dst_port)
    }

    fn segment_len(&self) -> usize {
        self.tcp.header_len() + self.payload.len()
    }

    fn ip_length_field(&self) -> usize {
        match &self.ip {
            IpHeader::V4(h) => h.header_len() + self.segment_len(),
            IpHeader::V6(_) => self.segment_len(),
        }
    }

    fn tcp_segment_bytes(&self) -> Vec<u8> {
        let mut seg = Vec::with_capacity(self.segment_len());
        self.tcp.write(&mut seg);
        seg.extend_from_slice(&self.payload);
        seg
    }

    fn compute_tcp_checksum(&self) -> u16 {
        let mut zeroed = self.tcp.clone();
        zeroed.checksum = 0;
        let mut seg = Vec::with_capacity(self.segment_len());
        zeroed.write(&mut seg);
        seg.extend_from_slice(&self.payload);
        let mut acc = Checksum::default();
        self.ip.pseudo_header(seg.len(), &mut acc);
        acc.add(&seg);
        acc.finish()
    }

    /// Recomputes the TCP checksum and, for IPv4, the header checksum.
    pub fn refresh_checksums(&mut self) {
        self.tcp.checksum = self.compute_tcp_checksum();
        let total = self.ip_length_field() as u16;
        if let IpHeader::V4(h) = &mut self.ip {
            h.checksum = h.compute_checksum(total);
        }
    }

    pub fn tcp_checksum_valid(&self) -> bool {
        let mut acc = Checksum::default();
        self.ip.pseudo_header(self.segment_len(), &mut acc);
        acc.add(&self.tcp_segment_bytes());
        acc.finish() == 0
    }

    /// Always true for IPv6, which has no header checksum.
    pub fn ip_checksum_valid(&self) -> bool {
        match &self.ip {
            IpHeader::V4(h) => {
                let mut bytes = Vec::with_capacity(h.header_len());
                h.write(self.ip_length_field() as u16, &mut bytes);
                internet_checksum(&bytes) == 0
            }
            IpHeader::V6(_) => true,
        }
    }

    pub fn checksums_valid(&self) -> bool {
        self.tcp_checksum_valid() && self.ip_checksum_valid()
    }

    fn validate(&self) -> Result<(), PacketError> {
        self.tcp.validate()?;
        if self.ip.protocol() != PROTO_TCP {
            return Err(PacketError::NotTcp(self.ip.protocol()));
        }
        if let IpHeader::V4(h) = &self.ip {
            if h.options.len() % 4 != 0 || h.options.len() > 40 {
                return Err(PacketError::Structure("IPv4 options must be 0..=40 bytes in 4-byte words"));
            }
        }
        if self.ip_length_field() > usize::from(u16::MAX) {
            return Err(PacketError::Structure("packet exceeds 65535 bytes"));
        }
        Ok(())
    }

    /// Network byte order wire form. Checksums are written as stored.
    pub fn serialize(&self) -> Result<Vec<u8>, PacketError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.ip.header_len() + self.segment_len());
        let len = self.ip_length_field() as u16;
        match &self.ip {
            IpHeader::V4(h) => h.write(len, &mut out),
            IpHeader::V6(h) => h.write(len, &mut out),
        }
        self.tcp.write(&mut out);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Packet, PacketError> {
        let first = *bytes.first().ok_or(PacketError::Truncated { need: 1, have: 0 })?;
        let (ip, segment) = match first >> 4 {
            4 => {
                let min = IPV4_MIN_HEADER + TCP_MIN_HEADER;
                if bytes.len() < min {
                    return Err(PacketError::Truncated { need: min, have: bytes.len() });
                }
                let ihl = first & 0x0f;
                if ihl < 5 {
                    return Err(PacketError::BadIhl(ihl));
                }
                let hlen = usize::from(ihl) * 4;
                let total = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
                if bytes.len() < total {
                    return Err(PacketError::Truncated { need: total, have: bytes.len() });
                }
                if total != bytes.len() {
                    return Err(PacketError::LengthMismatch("IPv4 total length differs from buffer length"));
                }
                if total < hlen + TCP_MIN_HEADER {
                    return Err(PacketError::LengthMismatch("IPv4 total length shorter than headers"));
                }
                let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
                let oct = |i: usize| Ipv4Addr::new(bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]);
                let h = Ipv4Header {
                    dscp_ecn: bytes[1],
                    identification: be16(4),
                    flags_fragment: be16(6),
                    ttl: bytes[8],
                    protocol: bytes[9],
                    checksum: be16(10),
                    src: oct(12),
                    dst: oct(16),
                    options: bytes[IPV4_MIN_HEADER..hlen].to_vec(),
                };
                (IpHeader::V4(h), &bytes[hlen..total])
            }
            6 => {
                let min = IPV6_HEADER + TCP_MIN_HEADER;
                if bytes.len() < min {
                    return Err(PacketError::Truncated { need: min, have: bytes.len() });
                }
                let word = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
                let payload_len = usize::from(u16::from_be_bytes([bytes[4], bytes[5]]));
                if bytes.len() < IPV6_HEADER + payload_len {
                    return Err(PacketError::Truncated { need: IPV6_HEADER + payload_len, have: bytes.len() });
                }
                if bytes.len() != IPV6_HEADER + payload_len {
                    return Err(PacketError::LengthMismatch("IPv6 payload length differs from buffer length"));
                }
                let mut src = [0u8; 16];
                let mut dst = [0u8; 16];
                src.copy_from_slice(&bytes[8..24]);
                dst.copy_from_slice(&bytes[24..40]);
                let h = Ipv6Header {
                    traffic_class: ((word >> 20) & 0xff) as u8,
                    flow_label: word & 0xfffff,
                    next_header: bytes[6],
                    hop_limit: bytes[7],
                    src: Ipv6Addr::from(src),
                    dst: Ipv6Addr::from(dst),
                };
                (IpHeader::V6(h), &bytes[IPV6_HEADER..])
            }
            v => return Err(PacketError::UnsupportedVersion(v)),
        };
        if ip.protocol() != PROTO_TCP {
            return Err(PacketError::NotTcp(ip.protocol()));
        }
        let (tcp, hlen) = TcpHeader::parse(segment)?;
        Ok(Packet { ip, tcp, payload: segment[hlen..].to_vec() })
    }

    pub fn has_discovery_option(&self) -> bool {
        self.tcp.options.iter().any(TcpOption::is_discovery_experiment)
    }

    /// Appends the discovery option carrying `id`.
    ///
    /// Trailing end-of-list padding is rewritten to no-ops so the new option
    /// stays inside the parsed option list; the header grows by exactly five
    /// words. Fails with [`PacketError::NoRoom`] when the header would exceed
    /// 60 bytes and with [`PacketError::AlreadyTagged`] when a discovery
    /// option is already present.
    pub fn inject_identifier(&self, id: &DiscoveryIdentifier) -> Result<Packet, PacketError> {
        self.tcp.validate()?;
        if self.has_discovery_option() {
            return Err(PacketError::AlreadyTagged);
        }
        let header_len = self.tcp.header_len();
        if header_len + DISCOVERY_OPTION_LEN > TCP_MAX_HEADER {
            return Err(PacketError::NoRoom { header_len });
        }
        let mut out = self.clone();
        for opt in out.tcp.options.iter_mut().rev() {
            if opt.kind != OPT_END {
                break;
            }
            opt.kind = OPT_NOP;
        }
        out.tcp.options.push(TcpOption::discovery(id));
        out.tcp.data_offset += (DISCOVERY_OPTION_LEN / 4) as u8;
        out.refresh_checksums();
        Ok(out)
    }

    /// The identifier carried by a well-formed discovery option, if any.
    pub fn extract_identifier(&self) -> Option<DiscoveryIdentifier> {
        self.tcp.options.iter().find_map(TcpOption::discovery_id)
    }

    pub fn set_source(&mut self, addr: SocketAddr) -> Result<(), PacketError> {
        self.ip.set_src(addr.ip())?;
        self.tcp.src_port = addr.port();
        self.refresh_checksums();
        Ok(())
    }

    pub fn set_destination(&mut self, addr: SocketAddr) -> Result<(), PacketError> {
        self.ip.set_dst(addr.ip())?;
        self.tcp.dst_port = addr.port();
        self.refresh_checksums();
        Ok(())
    }

    /// Decrements TTL / hop limit. Returns false (leaving the packet
    /// untouched) when it is already at zero or one.
    pub fn decrement_ttl(&mut self) -> bool {
        let ttl = match &mut self.ip {
            IpHeader::V4(h) => &mut h.ttl,
            IpHeader::V6(h) => &mut h.hop_limit,
        };
        if *ttl <= 1 {
            return false;
        }
        *ttl -= 1;
        self.refresh_checksums();
        true
    }

    /// Removes options a conservative middlebox does not recognise,
    /// re-padding the option list. Returns true if anything was removed.
    pub fn strip_unknown_options(&mut self) -> bool {
        let kept: Vec<TcpOption> =
            self.tcp.options.iter().filter(|o| o.is_well_known() && o.kind != OPT_END).cloned().collect();
        let had_unknown = self.tcp.options.iter().any(|o| !o.is_well_known());
        if !had_unknown {
            return false;
        }
        // cannot fail: the kept options are a subset of a valid list
        let _ = self.tcp.set_options(kept);
        self.refresh_checksums();
        true
    }
}

impl fmt::Display for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] seq={} ack={} len={}",
            self.five_tuple(),
            self.tcp.flags,
            self.tcp.seq,
            self.tcp.ack,
            self.payload.len()
        )?;
        if self.has_discovery_option() {
            write!(f, " +id")?;
        }
        Ok(())
    }
}
