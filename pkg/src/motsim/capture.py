"""Mirror-port capture: records, analyst annotations, listings, classic pcap.

Annotations follow the usual protocol-analyzer heuristics:

* ``SpuriousRetransmission`` - a data segment whose whole range was already
  acknowledged by the receiver when it showed up on the tap.
* ``DupAck`` - a pure ACK repeating the previous ACK number and window of
  its direction.
* ``OutOfOrder`` - a data segment starting below the highest sequence number
  already seen in its direction that is neither spurious nor an exact resend.

``GroundTruthForged`` only ever comes from the attacker's sidecar.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .simnet import SimTime
from .tcpstack import seq_le, seq_lt
from .wire import TcpFlags, WireError, WirePacket, decode, ip_str

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535
_GLOBAL = struct.Struct("<IHHiIII")
_RECORD = struct.Struct("<IIII")

HTTP_PORTS = (80,)
IEC104_PORTS = (2404,)


class CaptureError(ValueError):
    pass


class Annotation(enum.Enum):
    SPURIOUS_RETRANSMISSION = "TCP Spurious Retransmission"
    DUP_ACK = "TCP Dup ACK"
    OUT_OF_ORDER = "TCP Out-Of-Order"
    GROUND_TRUTH_FORGED = "FORGED"


@dataclass
class CaptureRecord:
    index: int
    ts: SimTime
    frame: bytes
    annotations: set[Annotation] = field(default_factory=set)

    def packet(self) -> WirePacket | None:
        try:
            return decode(self.frame)
        except WireError:
            return None


@dataclass
class Capture:
    records: list[CaptureRecord] = field(default_factory=list)
    ground_truth: dict[int, str] = field(default_factory=dict)

    def record(self, frame: bytes, ts: SimTime) -> int:
        if self.records and ts < self.records[-1].ts:
            raise CaptureError("timestamps must be non-decreasing")
        index = len(self.records) + 1
        self.records.append(CaptureRecord(index, ts, bytes(frame)))
        return index

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index: int) -> CaptureRecord:
        """1-based access, matching listing numbers."""
        return self.records[index - 1]

    def mark_forged(self, index: int, reason: str) -> None:
        self.ground_truth[index] = reason

    def annotate(self, ground_truth: bool = True) -> "Capture":
        annotate(self)
        if ground_truth:
            for idx in self.ground_truth:
                self[idx].annotations.add(Annotation.GROUND_TRUTH_FORGED)
        return self


def _direction(pkt: WirePacket) -> tuple:
    return (pkt.ip.src_ip, pkt.tcp.src_port, pkt.ip.dst_ip, pkt.tcp.dst_port)


def annotate(capture: Capture) -> Capture:
    """Recompute inferred annotations in place; deterministic and idempotent."""
    last_ack: dict[tuple, tuple[int, int]] = {}
    max_ack: dict[tuple, int] = {}
    max_end: dict[tuple, int] = {}
    seen: set[tuple] = set()
    for rec in capture.records:
        rec.annotations.discard(Annotation.SPURIOUS_RETRANSMISSION)
        rec.annotations.discard(Annotation.DUP_ACK)
        rec.annotations.discard(Annotation.OUT_OF_ORDER)
        pkt = rec.packet()
        if pkt is None:
            continue
        d = _direction(pkt)
        rev = (d[2], d[3], d[0], d[1])
        tcp = pkt.tcp
        n = len(pkt.payload)
        if n:
            end = (tcp.seq + n) % (1 << 32)
            key = (d, tcp.seq, n)
            if rev in max_ack and seq_le(end, max_ack[rev]):
                rec.annotations.add(Annotation.SPURIOUS_RETRANSMISSION)
            elif d in max_end and seq_lt(tcp.seq, max_end[d]) and key not in seen:
                rec.annotations.add(Annotation.OUT_OF_ORDER)
            seen.add(key)
            if d not in max_end or seq_lt(max_end[d], end):
                max_end[d] = end
        control = TcpFlags.SYN | TcpFlags.FIN | TcpFlags.RST
        if tcp.flags & TcpFlags.ACK:
            if (not n and not tcp.flags & control and d in last_ack
                    and last_ack[d] == (tcp.ack, tcp.window)):
                rec.annotations.add(Annotation.DUP_ACK)
            last_ack[d] = (tcp.ack, tcp.window)
            if d not in max_ack or seq_lt(max_ack[d], tcp.ack):
                max_ack[d] = tcp.ack
        if tcp.flags & (TcpFlags.SYN | TcpFlags.FIN):
            end = (tcp.seq + pkt.seq_len) % (1 << 32)
            if d not in max_end or seq_lt(max_end[d], end):
                max_end[d] = end
    return capture


# -- listing -----------------------------------------------------------------

def _summary(pkt: WirePacket) -> tuple[str, str]:
    from . import iec104
    from .httpmini import HttpError, parse_request
    sport, dport = pkt.tcp.src_port, pkt.tcp.dst_port
    payload = pkt.payload
    if payload and (sport in IEC104_PORTS or dport in IEC104_PORTS):
        try:
            return "IEC104", "; ".join(a.describe() for a in iec104.split_apdus(payload))
        except iec104.Iec104Error:
            return "IEC104", "<malformed APDU>"
    if payload and (sport in HTTP_PORTS or dport in HTTP_PORTS):
        if payload.startswith(b"HTTP/1.1 "):
            return "HTTP", payload.split(b"\r\n", 1)[0].decode("latin-1")
        try:
            req = parse_request(payload)
            return "HTTP", f"{req.method} {req.target} {req.version}"
        except (HttpError, UnicodeDecodeError, IndexError):
            return "HTTP", "continuation"
    return "TCP", ""


def render_listing(capture: Capture, overlay: bool = False) -> str:
    """One line per record.

    Columns: index, seconds since first record, ``src:port > dst:port``,
    protocol, ``[flags] Seq= Ack= Win=`` with sequence numbers relative to
    each direction's first SYN, protocol summary, ``Len=<bytes> (<bits> bits)``,
    then bracketed annotations.  Ground truth is shown only with ``overlay``.
    """
    lines = []
    base: dict[tuple, int] = {}
    t0 = capture.records[0].ts if capture.records else 0
    for rec in capture.records:
        pkt = rec.packet()
        if pkt is None:
            lines.append(f"{rec.index:>4} {(rec.ts - t0) / 1e6:>11.6f} <undecodable frame>")
            continue
        d = _direction(pkt)
        rev = (d[2], d[3], d[0], d[1])
        tcp = pkt.tcp
        base.setdefault(d, tcp.seq - (0 if tcp.flags & TcpFlags.SYN else 1))
        rseq = (tcp.seq - base[d]) % (1 << 32)
        rack = (tcp.ack - base[rev]) % (1 << 32) if rev in base else tcp.ack
        proto, summary = _summary(pkt)
        n = len(pkt.payload)
        notes = [a.value for a in sorted(rec.annotations, key=lambda a: a.value)
                 if overlay or a is not Annotation.GROUND_TRUTH_FORGED]
        line = (f"{rec.index:>4} {(rec.ts - t0) / 1e6:>11.6f} "
                f"{ip_str(pkt.ip.src_ip)}:{tcp.src_port} > {ip_str(pkt.ip.dst_ip)}:{tcp.dst_port} "
                f"{proto:<6} [{tcp.flags.label()}] Seq={rseq} Ack={rack if tcp.flags & TcpFlags.ACK else 0} "
                f"Win={tcp.window} Len={n} ({n * 8} bits)")
        if summary:
            line += f" {summary}"
        if notes:
            line += " " + " ".join(f"[{x}]" for x in notes)
        lines.append(line)
    return "\n".join(lines) + ("\n" if lines else "")


# -- pcap --------------------------------------------------------------------

def write_pcap(capture: Capture, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_GLOBAL.pack(PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET))
        for rec in capture.records:
            sec, usec = divmod(rec.ts, 1_000_000)
            fh.write(_RECORD.pack(sec, usec, len(rec.frame), len(rec.frame)))
            fh.write(rec.frame)


def read_pcap(path: str | Path) -> Capture:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise CaptureError("file shorter than the pcap global header")
    magic = struct.unpack_from("<I", data)[0]
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == 0xD4C3B2A1:
        endian = ">"
    else:
        raise CaptureError(f"bad pcap magic 0x{magic:08x}")
    linktype = struct.unpack_from(endian + "I", data, 20)[0]
    if linktype != LINKTYPE_ETHERNET:
        raise CaptureError(f"unsupported link type {linktype}")
    cap = Capture()
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            raise CaptureError("truncated record header")
        sec, usec, incl, _orig = struct.unpack_from(endian + "IIII", data, off)
        off += 16
        if off + incl > len(data):
            raise CaptureError("truncated record body")
        cap.record(data[off:off + incl], sec * 1_000_000 + usec)
        off += incl
    return cap


def write_sidecar(capture: Capture, path: str | Path) -> None:
    with open(path, "w") as fh:
        for idx in sorted(capture.ground_truth):
            fh.write(f"{idx}\t{capture.ground_truth[idx]}\n")


def read_sidecar(path: str | Path) -> dict[int, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            idx, _, reason = line.partition("\t")
            out[int(idx)] = reason
    return out
