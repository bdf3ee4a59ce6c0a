"""Ethernet II / IPv4 / TCP framing with RFC 791/793 checksums.

Only the subset the simulator needs: no IP options, no TCP options, no
fragmentation.  Encoding always recomputes both checksums; decoding reports
checksum validity as flags so that analyzers can still inspect bad frames.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

ETH_LEN = 14
IP_LEN = 20
TCP_LEN = 20
HEADERS_LEN = ETH_LEN + IP_LEN + TCP_LEN
MSS = 1460

ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6
DEFAULT_TTL = 64
DEFAULT_WINDOW = 65535

_ETH = struct.Struct("!6s6sH")
_IP = struct.Struct("!BBHHHBBH4s4s")
_TCP = struct.Struct("!HHIIBBHHH")
_PSEUDO = struct.Struct("!4s4sBBH")


class WireError(ValueError):
    """Raised for frames that cannot be parsed or encoded."""


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20

    def label(self) -> str:
        order = ("SYN", "FIN", "RST", "PSH", "ACK", "URG")
        names = [n for n in order if self & TcpFlags[n]]
        return ",".join(names) if names else "<none>"


def internet_checksum(data: bytes) -> int:
    """Ones-complement of the ones-complement sum of 16-bit words."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4_checksum(header: bytes) -> int:
    return internet_checksum(header)


def tcp_checksum(src_ip: bytes, dst_ip: bytes, segment: bytes) -> int:
    """Checksum over the pseudo-header plus TCP header and payload.

    ``segment`` is the TCP header (checksum field zeroed) followed by payload.
    """
    pseudo = _PSEUDO.pack(src_ip, dst_ip, 0, PROTO_TCP, len(segment))
    return internet_checksum(pseudo + segment)


def mac_bytes(mac: str | bytes) -> bytes:
    if isinstance(mac, bytes):
        return mac
    return bytes(int(p, 16) for p in mac.split(":"))


def mac_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def ip_bytes(ip: str | bytes) -> bytes:
    if isinstance(ip, bytes):
        return ip
    return bytes(int(p) for p in ip.split("."))


def ip_str(ip: bytes) -> str:
    return ".".join(str(b) for b in ip)


@dataclass(frozen=True)
class EthernetHeader:
    dst_mac: bytes
    src_mac: bytes
    ethertype: int = ETHERTYPE_IPV4


@dataclass(frozen=True)
class Ipv4Header:
    src_ip: bytes
    dst_ip: bytes
    identification: int = 0
    ttl: int = DEFAULT_TTL
    dscp_ecn: int = 0
    flags_frag: int = 0x4000  # DF
    protocol: int = PROTO_TCP
    total_length: int = field(default=0, compare=False)  # filled in by encode
    checksum: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class TcpHeader:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: TcpFlags
    window: int = DEFAULT_WINDOW
    urgent: int = 0
    checksum: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class WirePacket:
    eth: EthernetHeader
    ip: Ipv4Header
    tcp: TcpHeader
    payload: bytes = b""
    ip_checksum_ok: bool = field(default=True, compare=False)
    tcp_checksum_ok: bool = field(default=True, compare=False)

    @property
    def seq_len(self) -> int:
        """Sequence space consumed: payload plus one each for SYN and FIN."""
        n = len(self.payload)
        if self.tcp.flags & TcpFlags.SYN:
            n += 1
        if self.tcp.flags & TcpFlags.FIN:
            n += 1
        return n

    def with_payload(self, payload: bytes) -> "WirePacket":
        return replace(self, payload=payload)


def encode(packet: WirePacket) -> bytes:
    if len(packet.payload) > MSS:
        raise WireError(f"payload of {len(packet.payload)} bytes exceeds MSS {MSS}")
    eth, ip, tcp = packet.eth, packet.ip, packet.tcp
    total_length = IP_LEN + TCP_LEN + len(packet.payload)
    ip_hdr = _IP.pack(
        0x45, ip.dscp_ecn, total_length, ip.identification & 0xFFFF,
        ip.flags_frag, ip.ttl, ip.protocol, 0, ip.src_ip, ip.dst_ip,
    )
    ip_hdr = ip_hdr[:10] + struct.pack("!H", ipv4_checksum(ip_hdr)) + ip_hdr[12:]
    tcp_hdr = _TCP.pack(
        tcp.src_port, tcp.dst_port, tcp.seq & 0xFFFFFFFF, tcp.ack & 0xFFFFFFFF,
        5 << 4, int(tcp.flags), tcp.window, 0, tcp.urgent,
    )
    csum = tcp_checksum(ip.src_ip, ip.dst_ip, tcp_hdr + packet.payload)
    tcp_hdr = tcp_hdr[:16] + struct.pack("!H", csum) + tcp_hdr[18:]
    return _ETH.pack(eth.dst_mac, eth.src_mac, eth.ethertype) + ip_hdr + tcp_hdr + packet.payload


def decode(frame: bytes) -> WirePacket:
    if len(frame) < HEADERS_LEN:
        raise WireError(f"truncated frame: {len(frame)} bytes")
    dst, src, ethertype = _ETH.unpack_from(frame, 0)
    if ethertype != ETHERTYPE_IPV4:
        raise WireError(f"unsupported ethertype 0x{ethertype:04x}")
    (ver_ihl, dscp, total_length, ident, flags_frag, ttl, proto, ip_csum,
     src_ip, dst_ip) = _IP.unpack_from(frame, ETH_LEN)
    if ver_ihl != 0x45:
        raise WireError(f"unsupported IPv4 version/IHL byte 0x{ver_ihl:02x}")
    if proto != PROTO_TCP:
        raise WireError(f"unsupported IP protocol {proto}")
    if total_length < IP_LEN + TCP_LEN or ETH_LEN + total_length > len(frame):
        raise WireError("IPv4 total length inconsistent with frame")
    ip_hdr = frame[ETH_LEN:ETH_LEN + IP_LEN]
    ip_ok = internet_checksum(ip_hdr) == 0
    t0 = ETH_LEN + IP_LEN
    (sport, dport, seq, ack, offset, flags, window, tcp_csum,
     urgent) = _TCP.unpack_from(frame, t0)
    if offset >> 4 != 5:
        raise WireError("TCP options are not supported")
    segment = frame[t0:ETH_LEN + total_length]
    pseudo = _PSEUDO.pack(src_ip, dst_ip, 0, PROTO_TCP, len(segment))
    tcp_ok = internet_checksum(pseudo + segment) == 0
    return WirePacket(
        eth=EthernetHeader(dst, src, ethertype),
        ip=Ipv4Header(
            src_ip=src_ip, dst_ip=dst_ip, identification=ident, ttl=ttl,
            dscp_ecn=dscp, flags_frag=flags_frag, protocol=proto,
            total_length=total_length, checksum=ip_csum,
        ),
        tcp=TcpHeader(sport, dport, seq, ack, TcpFlags(flags), window, urgent,
                      checksum=tcp_csum),
        payload=bytes(segment[TCP_LEN:]),
        ip_checksum_ok=ip_ok,
        tcp_checksum_ok=tcp_ok,
    )


def make_packet(src_mac, dst_mac, src_ip, dst_ip, src_port, dst_port, seq, ack,
                flags, payload=b"", ip_id=0, ttl=DEFAULT_TTL,
                window=DEFAULT_WINDOW) -> WirePacket:
    return WirePacket(
        eth=EthernetHeader(mac_bytes(dst_mac), mac_bytes(src_mac)),
        ip=Ipv4Header(ip_bytes(src_ip), ip_bytes(dst_ip), identification=ip_id, ttl=ttl),
        tcp=TcpHeader(src_port, dst_port, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      TcpFlags(flags), window),
        payload=bytes(payload),
    )
