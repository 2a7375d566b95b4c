//! Oracles and generators shared by the integration tests. Nothing here
//! calls into the checksum or option code under test.

#![allow(dead_code)]

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use depsim::packet::{Packet, TcpFlags, TcpOption};
use rand::Rng;

/// Folds big-endian 16-bit words of `bytes` (zero-padded) with end-around
/// carry, without complementing.
pub fn fold_sum(bytes: &[u8]) -> u16 {
    let mut total: u64 = 0;
    let mut i = 0;
    while i < bytes.len() {
        let hi = bytes[i] as u64;
        let lo = if i + 1 < bytes.len() { bytes[i + 1] as u64 } else { 0 };
        total += (hi << 8) | lo;
        i += 2;
    }
    while total > 0xffff {
        total = (total & 0xffff) + (total >> 16);
    }
    total as u16
}

fn be16(b: &[u8]) -> usize {
    ((b[0] as usize) << 8) | b[1] as usize
}

/// True when the IPv4 header (if any) and the TCP segment of a wire image
/// both sum to all-ones.
pub fn wire_checksums_ok(bytes: &[u8]) -> bool {
    match bytes[0] >> 4 {
        4 => {
            let ihl = (bytes[0] & 0x0f) as usize * 4;
            let total = be16(&bytes[2..4]);
            if fold_sum(&bytes[..ihl]) != 0xffff {
                return false;
            }
            let seg = &bytes[ihl..total];
            let mut pseudo = Vec::with_capacity(12 + seg.len());
            pseudo.extend_from_slice(&bytes[12..20]);
            pseudo.extend_from_slice(&[0, bytes[9]]);
            pseudo.extend_from_slice(&(seg.len() as u16).to_be_bytes());
            pseudo.extend_from_slice(seg);
            fold_sum(&pseudo) == 0xffff
        }
        6 => {
            let len = be16(&bytes[4..6]);
            let seg = &bytes[40..40 + len];
            let mut pseudo = Vec::with_capacity(40 + seg.len());
            pseudo.extend_from_slice(&bytes[8..40]);
            pseudo.extend_from_slice(&(len as u32).to_be_bytes());
            pseudo.extend_from_slice(&[0, 0, 0, bytes[6]]);
            pseudo.extend_from_slice(seg);
            fold_sum(&pseudo) == 0xffff
        }
        _ => false,
    }
}

pub fn packet_checksums_ok(p: &Packet) -> bool {
    wire_checksums_ok(&p.serialize().expect("valid packet serializes"))
}

fn random_option(rng: &mut impl Rng) -> TcpOption {
    match rng.gen_range(0..6) {
        0 => TcpOption::nop(),
        1 => TcpOption::mss(rng.gen()),
        2 => TcpOption::new(3, vec![rng.gen_range(0..15)]),
        3 => TcpOption::new(4, Vec::new()),
        4 => {
            let mut ts = vec![0u8; 8];
            rng.fill(&mut ts[..]);
            TcpOption::new(8, ts)
        }
        _ => {
            let mut v = vec![0u8; rng.gen_range(0..6)];
            rng.fill(&mut v[..]);
            TcpOption::new(rng.gen_range(30..60), v)
        }
    }
}

/// Random options whose wire length stays within `budget` bytes.
pub fn random_options(rng: &mut impl Rng, budget: usize) -> Vec<TcpOption> {
    let mut out = Vec::new();
    let mut used = 0;
    for _ in 0..rng.gen_range(0..8) {
        let o = random_option(rng);
        if used + o.wire_len() > budget {
            break;
        }
        used += o.wire_len();
        out.push(o);
    }
    out
}

pub fn random_addr(rng: &mut impl Rng, v6: bool) -> SocketAddr {
    let ip = if v6 {
        IpAddr::V6(Ipv6Addr::from(rng.gen::<u128>() | 1))
    } else {
        IpAddr::V4(Ipv4Addr::from(rng.gen_range(0x0100_0000u32..0xe000_0000)))
    };
    SocketAddr::new(ip, rng.gen_range(1..=u16::MAX))
}

/// A valid TCP packet with random addresses, flags, options (at most
/// `option_budget` bytes before padding) and payload.
pub fn random_packet(rng: &mut impl Rng, option_budget: usize) -> Packet {
    let v6 = rng.gen_bool(0.3);
    let (src, dst) = (random_addr(rng, v6), random_addr(rng, v6));
    let flags = TcpFlags::from_bits_truncate(rng.gen::<u8>() & 0x1f | TcpFlags::ACK.bits());
    let mut payload = vec![0u8; rng.gen_range(0..300)];
    rng.fill(&mut payload[..]);
    let mut p = Packet::tcp(src, dst, flags, rng.gen(), rng.gen(), payload).expect("same family");
    p.tcp.window = rng.gen();
    p.tcp.set_options(random_options(rng, option_budget)).expect("within budget");
    p.refresh_checksums();
    p
}
