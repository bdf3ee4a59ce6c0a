"""Offline detectors for injected TCP segments.

Rules work on the mirror capture, one pass per rule, with state keyed by
connection direction ``(src_ip, src_port, dst_ip, dst_port)``.

==  =====================  ==============================================
R1  OverlapDiffData        overlapping bytes that differ from first seen
R2  DataOnClosedStream     payload after the direction's FIN was ACKed
R3  FinAdvancedLastSeq     FIN past the data seen, or moved past an
                           earlier FIN of the same direction
R4  WindowRecision         ack+window right edge pulled back by more than
                           the bytes newly acknowledged
R5  SmallSegmentBurst      N consecutive tiny data segments
R6  Iec104DuplicateResp    two answers to one interrogation, or an N(S)
                           reused with different ASDU bytes
R7  TtlIpIdAnomaly         TTL off the direction's mode; optionally IP ID
                           off the source's counter
==  =====================  ==============================================

R1 mirrors a stream-reassembly overlap check, R3/R4 connection-analyzer
weirds, R2/R5 stream preprocessor events.  R6 needs IEC-104 awareness.
"""
from __future__ import annotations

import enum
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from . import iec104
from .capture import Capture, read_pcap
from .tcpstack import MOD, seq_le, seq_lt
from .wire import TcpFlags, WirePacket, ip_str


class RuleId(enum.Enum):
    R1 = "R1_OverlapDiffData"
    R2 = "R2_DataOnClosedStream"
    R3 = "R3_FinAdvancedLastSeq"
    R4 = "R4_WindowRecision"
    R5 = "R5_SmallSegmentBurst"
    R6 = "R6_Iec104DuplicateResponse"
    R7 = "R7_TtlIpIdAnomaly"

    @classmethod
    def parse(cls, text: str) -> "RuleId":
        t = text.strip().lower()
        for r in cls:
            if t in (r.name.lower(), r.value.lower()):
                return r
        raise ValueError(f"unknown rule {text!r}")


SEVERITY = {RuleId.R1: "high", RuleId.R2: "medium", RuleId.R3: "low", RuleId.R4: "low",
            RuleId.R5: "low", RuleId.R6: "high", RuleId.R7: "medium"}


@dataclass(frozen=True)
class Alert:
    rule: RuleId
    stream: tuple            # (src_ip, src_port, dst_ip, dst_port) as strings/ints
    record_index: int
    description: str
    severity: str = ""

    def __post_init__(self):
        if not self.severity:
            object.__setattr__(self, "severity", SEVERITY[self.rule])


@dataclass
class DetectConfig:
    rules: frozenset = frozenset(RuleId)
    small_threshold: int = 5
    small_cutoff: int = 16
    ttl_check: bool = True
    ipid_check: bool = False
    ipid_band: int = 64


@dataclass(frozen=True)
class Seg:
    index: int
    pkt: WirePacket

    @property
    def d(self) -> tuple:
        p = self.pkt
        return (p.ip.src_ip, p.tcp.src_port, p.ip.dst_ip, p.tcp.dst_port)

    @property
    def rev(self) -> tuple:
        d = self.d
        return (d[2], d[3], d[0], d[1])

    @property
    def stream(self) -> tuple:
        d = self.d
        return (ip_str(d[0]), d[1], ip_str(d[2]), d[3])


def _alert(rule, seg, text) -> Alert:
    return Alert(rule, seg.stream, seg.index, text)


def rule_overlap_diff_data(segs: list[Seg], config: DetectConfig | None = None) -> list[Alert]:
    """R1: keep first-seen bytes; alert when a later segment disagrees on them."""
    stored: dict[tuple, dict[int, int]] = defaultdict(dict)
    base: dict[tuple, int] = {}
    out = []
    for s in segs:
        p = s.pkt
        if not p.payload:
            continue
        d = s.d
        base.setdefault(d, p.tcp.seq)
        off = (p.tcp.seq - base[d]) % MOD
        mem = stored[d]
        diff = [i for i, b in enumerate(p.payload) if mem.get(off + i, b) != b]
        for i, b in enumerate(p.payload):
            mem.setdefault(off + i, b)
        if diff:
            out.append(_alert(RuleId.R1, s, f"reassembly overlap with different data "
                                            f"({len(diff)} of {len(p.payload)} bytes differ)"))
    return out


def rule_closed_stream(segs: list[Seg], config: DetectConfig | None = None) -> list[Alert]:
    """R2 and R3 share FIN bookkeeping."""
    fin_pos: dict[tuple, int] = {}
    fin_rec: dict[tuple, int] = {}
    closed: dict[tuple, int] = {}
    max_seq: dict[tuple, int] = {}
    out = []
    for s in segs:
        p, d, rev = s.pkt, s.d, s.rev
        tcp = p.tcp
        if d in closed and p.payload:
            out.append(_alert(RuleId.R2, s, "data sent on stream not accepting data "
                                            f"(FIN acknowledged at record {closed[d]})"))
        if tcp.flags & TcpFlags.FIN:
            pos = (tcp.seq + len(p.payload)) % MOD
            if d in max_seq and seq_lt(max_seq[d], tcp.seq):
                out.append(_alert(RuleId.R3, s, "FIN sequence beyond the last data seen"))
            elif d in fin_pos and seq_lt(fin_pos[d], pos):
                out.append(_alert(RuleId.R3, s, f"FIN advanced past the FIN of record "
                                                f"{fin_rec[d]}"))
            if d not in fin_pos:
                fin_pos[d], fin_rec[d] = pos, s.index
        end = (tcp.seq + p.seq_len) % MOD
        if d not in max_seq or seq_lt(max_seq[d], end):
            max_seq[d] = end
        if (tcp.flags & TcpFlags.ACK and rev in fin_pos and rev not in closed
                and seq_lt(fin_pos[rev], tcp.ack)):
            closed[rev] = s.index
    return out


def window_recision(prev_ack: int, prev_win: int, ack: int, win: int) -> bool:
    """True when the right edge moves back by more than the newly acked bytes."""
    shrink = ((prev_ack + prev_win) - (ack + win)) % MOD
    if shrink == 0 or shrink >= 1 << 31:
        return False
    acked = (ack - prev_ack) % MOD
    if acked >= 1 << 31:
        acked = 0
    return shrink > acked


def rule_window_recision(segs: list[Seg], config: DetectConfig | None = None) -> list[Alert]:
    """R4."""
    last: dict[tuple, tuple[int, int]] = {}
    out = []
    for s in segs:
        tcp = s.pkt.tcp
        if not tcp.flags & TcpFlags.ACK or tcp.flags & (TcpFlags.RST | TcpFlags.SYN):
            continue
        d = s.d
        if d in last and window_recision(*last[d], tcp.ack, tcp.window):
            out.append(_alert(RuleId.R4, s, "TCP recv-window shrank by more than the "
                                            "amount of data being ACKed"))
        last[d] = (tcp.ack, tcp.window)
    return out


def rule_small_segments(segs: list[Seg], config: DetectConfig | None = None) -> list[Alert]:
    """R5."""
    cfg = config or DetectConfig()
    run: Counter = Counter()
    out = []
    for s in segs:
        n = len(s.pkt.payload)
        if not n:
            continue
        d = s.d
        if n < cfg.small_cutoff:
            run[d] += 1
            if run[d] == cfg.small_threshold:
                out.append(_alert(RuleId.R5, s, f"consecutive TCP small segments exceeding "
                                                f"threshold ({cfg.small_threshold} under "
                                                f"{cfg.small_cutoff} bytes)"))
        else:
            run[d] = 0
    return out


def rule_iec104_semantic(segs: list[Seg], config: DetectConfig | None = None) -> list[Alert]:
    """R6: (a) duplicate ActCon/ActTerm for one activation, (b) N(S) reuse."""
    max_ack: dict[tuple, int] = {}
    sent: dict[tuple, dict[tuple, int]] = defaultdict(dict)   # (seq, payload) -> end
    answers: dict[tuple, Counter] = {}
    frames: dict[tuple, dict[int, bytes]] = defaultdict(dict)
    out = []
    for s in segs:
        p, d = s.pkt, s.d
        tcp = p.tcp
        if tcp.flags & TcpFlags.ACK and (d not in max_ack or seq_lt(max_ack[d], tcp.ack)):
            max_ack[d] = tcp.ack
        if not p.payload or iec104.IEC104_PORT not in (tcp.src_port, tcp.dst_port):
            continue
        key = (tcp.seq, p.payload)
        end = (tcp.seq + len(p.payload)) % MOD
        if key in sent[d] and not (s.rev in max_ack and seq_le(end, max_ack[s.rev])):
            continue  # plain retransmission of bytes the peer has not yet acknowledged
        sent[d][key] = end
        try:
            apdus = iec104.split_apdus(p.payload)
        except iec104.Iec104Error:
            continue
        dup_answer = reused = False
        for a in apdus:
            if a.format is not iec104.Format.I:
                continue
            asdu = a.asdu
            if asdu.type_id == iec104.TypeId.C_IC_NA_1:
                if asdu.cot == iec104.Cot.ACT:
                    answers[s.rev] = Counter()
                elif asdu.cot in (iec104.Cot.ACTCON, iec104.Cot.ACTTERM) and d in answers:
                    answers[d][asdu.cot] += 1
                    dup_answer |= answers[d][asdu.cot] > 1
            raw = iec104.encode_asdu(asdu)
            prev = frames[d].get(a.ns)
            if prev is not None and prev != raw:
                reused = True
            frames[d][a.ns] = raw
        if dup_answer:
            out.append(_alert(RuleId.R6, s, "second response to one C_IC_NA_1 activation"))
        if reused:
            out.append(_alert(RuleId.R6, s, "I-frame N(S) reused with different ASDU bytes"))
    return out


def rule_ttl_ipid(segs: list[Seg], config: DetectConfig | None = None) -> list[Alert]:
    """R7: needs the whole capture for the modal TTL, so it is two-pass."""
    cfg = config or DetectConfig()
    out = []
    if cfg.ttl_check:
        ttls: dict[tuple, Counter] = defaultdict(Counter)
        for s in segs:
            ttls[s.d][s.pkt.ip.ttl] += 1
        for s in segs:
            mode_ttl = max(sorted(ttls[s.d].items()), key=lambda kv: kv[1])[0]
            if s.pkt.ip.ttl != mode_ttl:
                out.append(_alert(RuleId.R7, s, f"TTL {s.pkt.ip.ttl} differs from stream "
                                                f"mode {mode_ttl}"))
    if cfg.ipid_check:
        last: dict[bytes, int] = {}
        for s in segs:
            src, ipid = s.pkt.ip.src_ip, s.pkt.ip.identification
            if src in last:
                step = (ipid - last[src]) % 65536
                if not 1 <= step <= cfg.ipid_band:
                    out.append(_alert(RuleId.R7, s, f"IP ID {ipid} off the source counter "
                                                    f"(last {last[src]})"))
                    continue
            last[src] = ipid
    return out


RULES = {
    RuleId.R1: rule_overlap_diff_data,
    RuleId.R4: rule_window_recision,
    RuleId.R5: rule_small_segments,
    RuleId.R6: rule_iec104_semantic,
    RuleId.R7: rule_ttl_ipid,
}


@dataclass
class Analysis:
    alerts: list[Alert]
    record_count: int
    rules: frozenset

    def fired(self, rule: RuleId) -> bool:
        return any(a.rule is rule for a in self.alerts)

    def count(self, rule: RuleId) -> int:
        return sum(a.rule is rule for a in self.alerts)


def _segments(capture: Capture) -> list[Seg]:
    out = []
    for rec in capture.records:
        pkt = rec.packet()
        if pkt is not None:
            out.append(Seg(rec.index, pkt))
    return out


def analyze(source, config: DetectConfig | None = None) -> Analysis:
    cfg = config or DetectConfig()
    capture = source if isinstance(source, Capture) else read_pcap(Path(source))
    segs = _segments(capture)
    alerts: list[Alert] = []
    if RuleId.R2 in cfg.rules or RuleId.R3 in cfg.rules:
        alerts += [a for a in rule_closed_stream(segs, cfg) if a.rule in cfg.rules]
    for rid, fn in RULES.items():
        if rid in cfg.rules:
            alerts += fn(segs, cfg)
    order = {r: i for i, r in enumerate(RuleId)}
    alerts.sort(key=lambda a: (a.record_index, order[a.rule], a.description))
    return Analysis(alerts, len(capture), cfg.rules)


# -- scoring and reports -------------------------------------------------------

def _canon(stream: tuple) -> tuple:
    a, b = stream[:2], stream[2:]
    return (a, b) if a <= b else (b, a)


@dataclass
class Score:
    precision: float | None
    recall: float | None
    true_positives: int
    alerts: int


def score(analysis: Analysis, capture: Capture, ground_truth: dict[int, str],
          rule: RuleId) -> Score:
    """Stream-level scoring against the attacker's sidecar.

    An alert counts as true when its connection carried a forged record at or
    before the alert; a forged record counts as found when some alert on its
    connection cites it or a later record.
    """
    forged = {}
    for idx in ground_truth:
        pkt = capture[idx].packet()
        if pkt is not None:
            forged[idx] = _canon(Seg(idx, pkt).stream)
    alerts = [a for a in analysis.alerts if a.rule is rule]
    tp = sum(any(s == _canon(a.stream) and i <= a.record_index for i, s in forged.items())
             for a in alerts)
    found = sum(any(_canon(a.stream) == s and a.record_index >= i for a in alerts)
                for i, s in forged.items())
    return Score(tp / len(alerts) if alerts else None,
                 found / len(forged) if forged else None, tp, len(alerts))


@dataclass
class DetectionMatrix:
    columns: list[str] = field(default_factory=list)
    counts: dict[tuple[RuleId, str], int] = field(default_factory=dict)

    def add(self, column: str, analysis: Analysis) -> None:
        self.columns.append(column)
        for r in RuleId:
            self.counts[(r, column)] = analysis.count(r)

    def fired(self, rule: RuleId, column: str) -> bool:
        return self.counts.get((rule, column), 0) > 0

    def row(self, rule: RuleId) -> dict[str, bool]:
        return {c: self.fired(rule, c) for c in self.columns}

    def format_table(self) -> str:
        width = max(len(r.value) for r in RuleId)
        cols = [max(len(c), 10) for c in self.columns]
        head = " " * width + " | " + " | ".join(c.ljust(w) for c, w in zip(self.columns, cols))
        lines = [head, "-" * len(head)]
        for r in RuleId:
            cells = []
            for c, w in zip(self.columns, cols):
                n = self.counts.get((r, c), 0)
                cells.append((f"fired({n})" if n else "silent").ljust(w))
            lines.append(r.value.ljust(width) + " | " + " | ".join(cells))
        return "\n".join(lines) + "\n"

    def format_kv(self) -> str:
        lines = []
        for r in RuleId:
            for c in self.columns:
                n = self.counts.get((r, c), 0)
                lines.append(f"matrix.{r.value}.{c}={'fired' if n else 'silent'}")
                lines.append(f"matrix.{r.value}.{c}.count={n}")
        return "\n".join(lines) + "\n"


def format_report(analysis: Analysis, capture: Capture | None = None,
                  ground_truth: dict[int, str] | None = None) -> str:
    """Human-readable alert table followed by ``key=value`` lines."""
    lines = [f"records analyzed: {analysis.record_count}",
             f"alerts: {len(analysis.alerts)}", ""]
    for a in analysis.alerts:
        src = f"{a.stream[0]}:{a.stream[1]} > {a.stream[2]}:{a.stream[3]}"
        lines.append(f"#{a.record_index:<5} {a.rule.value:<28} {a.severity:<6} {src}  "
                     f"{a.description}")
    lines.append("")
    lines.append(f"records={analysis.record_count}")
    lines.append(f"alerts={len(analysis.alerts)}")
    for r in RuleId:
        enabled = r in analysis.rules
        lines.append(f"rule.{r.value}.enabled={int(enabled)}")
        lines.append(f"rule.{r.value}.fired={int(analysis.fired(r))}")
        lines.append(f"rule.{r.value}.count={analysis.count(r)}")
        if ground_truth is not None and capture is not None and enabled:
            sc = score(analysis, capture, ground_truth, r)
            fmt = lambda v: "na" if v is None else f"{v:.3f}"
            lines.append(f"rule.{r.value}.precision={fmt(sc.precision)}")
            lines.append(f"rule.{r.value}.recall={fmt(sc.recall)}")
    for k, a in enumerate(analysis.alerts, 1):
        lines.append(f"alert.{k}.rule={a.rule.value}")
        lines.append(f"alert.{k}.record={a.record_index}")
        lines.append(f"alert.{k}.stream={a.stream[0]}:{a.stream[1]}>{a.stream[2]}:{a.stream[3]}")
    return "\n".join(lines) + "\n"
